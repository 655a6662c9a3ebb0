#ifndef LCB_H
#define LCB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define LCB_OK 0

#define LCB_ERR_NULL -1

#define LCB_ERR_INVALID -2

#define LCB_ERR_HYPOTHESIS -3

#define LCB_ERR_NUMERIC -4

#define LCB_ERR_SIMULATION -5

#define LCB_ERR_PANIC -6

/**
 * Path end states written by the simulation calls.
 */
#define LCB_STATUS_ALIVE 0

#define LCB_STATUS_ABSORBED 1

#define LCB_STATUS_EXTINCT_NUMERICALLY 2

#define LCB_STATUS_KILLED 3

#define LCB_STATUS_EXPLODED 4

/**
 * The excessive function h of a mechanism, with its scale table.
 */
typedef struct LcbHTransform LcbHTransform;

/**
 * A branching mechanism with its competition coefficient.
 */
typedef struct LcbMechanism LcbMechanism;

/**
 * Simulation parameters; obtain defaults from `lcb_sim_params_default`.
 */
typedef struct LcbSimParams {
  double dt;
  double eps_jump;
  double t_max;
  uint64_t seed;
} LcbSimParams;

/**
 * Regime flags: 1 true, 0 false, -1 undetermined.
 */
typedef struct LcbRegime {
  double rho;
  double ell;
  int32_t grey;
  int32_t log_moment;
  int32_t cal_e_infinite;
  int32_t psi_inf_infinite;
  int32_t h_holds;
} LcbRegime;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message on this thread into `buf` (NUL-terminated, truncated to `len`).
 * Returns the full message length in bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
uintptr_t lcb_last_error(char *buf, uintptr_t len);

struct LcbSimParams lcb_sim_params_default(void);

/**
 * Stable mechanism `Ψ(x) = a x^α - γ x`, `1 < α < 2`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
int32_t lcb_mechanism_stable(double a,
                             double alpha,
                             double gamma,
                             double c,
                             struct LcbMechanism **out);

/**
 * Neveu mechanism `Ψ(x) = x ln x`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
int32_t lcb_mechanism_neveu(double c, struct LcbMechanism **out);

/**
 * Feller mechanism `Ψ(x) = σ²x²/2 - γ x`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
int32_t lcb_mechanism_feller(double sigma, double gamma, double c, struct LcbMechanism **out);

/**
 * Any mechanism from a TOML table in the CLI's `[mechanism]` format (without the header).
 *
 * # Safety
 * `text` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
 */
int32_t lcb_mechanism_from_toml(const char *text, struct LcbMechanism **out);

/**
 * # Safety
 * `m` must be null or a handle from this library, not yet freed.
 */
void lcb_mechanism_free(struct LcbMechanism *m);

/**
 * `Ψ(x)` for `x ≥ 0`.
 *
 * # Safety
 * `m` must be a live handle and `out` a valid pointer.
 */
int32_t lcb_mechanism_psi(const struct LcbMechanism *m, double x, double *out);

/**
 * `Ψ⁻¹(θ)`: the largest root of `Ψ(x) = θ`.
 *
 * # Safety
 * `m` must be a live handle and `out` a valid pointer.
 */
int32_t lcb_mechanism_psi_inverse(const struct LcbMechanism *m, double theta, double *out);

/**
 * # Safety
 * `m` must be a live handle and `out` a valid pointer.
 */
int32_t lcb_mechanism_classify(const struct LcbMechanism *m, struct LcbRegime *out);

/**
 * Builds the scale table and h. Fails with `LCB_ERR_HYPOTHESIS` unless the mechanism satisfies ℍ.
 *
 * # Safety
 * `m` must be a live handle and `out` a valid pointer.
 */
int32_t lcb_htransform_new(const struct LcbMechanism *m, struct LcbHTransform **out);

/**
 * # Safety
 * `h` must be null or a handle from this library, not yet freed.
 */
void lcb_htransform_free(struct LcbHTransform *h);

/**
 * # Safety
 * `h` must be a live handle and `out` a valid pointer.
 */
int32_t lcb_htransform_h(const struct LcbHTransform *h, double z, double *out);

/**
 * # Safety
 * `h` must be a live handle and `out` a valid pointer.
 */
int32_t lcb_htransform_ell(const struct LcbHTransform *h, double *out);

/**
 * Coefficients of the conditioned dynamics at state `z` and jump size `y`.
 *
 * # Safety
 * `h` must be a live handle; `b`, `q`, `k` valid pointers.
 */
int32_t lcb_htransform_coefficients(const struct LcbHTransform *h,
                                    double z,
                                    double y,
                                    double *b,
                                    double *q,
                                    double *k);

/**
 * Simulates `n` LCB paths from `z0` to `params.t_max`; writes end values (`∞` after explosion, 0 after
 * absorption) and `LCB_STATUS_*` codes. Output depends only on the inputs, not on thread count.
 *
 * # Safety
 * `m` must be a live handle; `values` and `status` must each hold `n` elements.
 */
int32_t lcb_simulate_lcb(const struct LcbMechanism *m,
                         struct LcbSimParams params,
                         double z0,
                         uintptr_t n,
                         double *values,
                         int32_t *status);

/**
 * As `lcb_simulate_lcb` for the h-transformed process.
 *
 * # Safety
 * `h` must be a live handle; `values` and `status` must each hold `n` elements.
 */
int32_t lcb_simulate_conditioned(const struct LcbHTransform *h,
                                 struct LcbSimParams params,
                                 double z0,
                                 uintptr_t n,
                                 double *values,
                                 int32_t *status);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LCB_H */
