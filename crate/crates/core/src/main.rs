fn main() {
    std::process::exit(lcb_core::cli::run(std::env::args_os()));
}
