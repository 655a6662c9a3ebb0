use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LcbError {
    #[error("invalid mechanism: {0}")]
    InvalidMechanism(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("quadrature did not converge ({context}): achieved {achieved:.3e}, requested {requested:.3e}")]
    Quadrature { achieved: f64, requested: f64, context: String },
    #[error("root finding failed: {0}")]
    Root(String),
    #[error("hypothesis H is {0}; pass an explicit override to proceed")]
    HypothesisNotEstablished(String),
    #[error("scale table undefined without competition (c = 0)")]
    NoCompetition,
    #[error("cannot certify tail rate: Psi(x) <= 0 on all probes up to {0:.3e}; raise x0")]
    TailRate(f64),
    #[error("near-zero extrapolation unstable: {0}")]
    Extrapolation(String),
    #[error("table integrity: {0}")]
    Table(String),
    #[error("simulation: {0}")]
    Simulation(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for LcbError {
    fn from(e: std::io::Error) -> Self {
        LcbError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, LcbError>;
