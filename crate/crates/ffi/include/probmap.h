#ifndef PROBMAP_H
#define PROBMAP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ProbmapStatus {
  PROBMAP_STATUS_OK = 0,
  PROBMAP_STATUS_NULL_POINTER = 1,
  PROBMAP_STATUS_INVALID_ARGUMENT = 2,
  PROBMAP_STATUS_SCHEMA = 3,
  PROBMAP_STATUS_NUMERICAL = 4,
  PROBMAP_STATUS_PANIC = 5,
} ProbmapStatus;

/**
 * Opaque low-rank plus diagonal Gaussian.
 */
typedef struct ProbmapLrpd ProbmapLrpd;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Build a distribution from `mu` and `log_d` (length `n_coords`) and the
 * row-major `n_coords × rank` factor `l`.
 *
 * # Safety
 * The arrays must hold the stated number of doubles; `out` must be writable.
 */
enum ProbmapStatus probmap_lrpd_new(size_t n_coords,
                                    size_t rank,
                                    const double *mu,
                                    const double *log_d,
                                    const double *l,
                                    double kappa,
                                    struct ProbmapLrpd **out);

/**
 * Parse the JSON form written by the library and the CLI.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum ProbmapStatus probmap_lrpd_from_json(const char *json, struct ProbmapLrpd **out);

/**
 * Serialise to JSON. Release the string with `probmap_string_free`.
 *
 * # Safety
 * `p` must be a live handle; `out` must be writable.
 */
enum ProbmapStatus probmap_lrpd_to_json(const struct ProbmapLrpd *p, char **out);

/**
 * # Safety
 * `p` must be null or a handle not yet freed.
 */
void probmap_lrpd_free(struct ProbmapLrpd *p);

/**
 * Length of `mu`, or 0 for a null handle.
 *
 * # Safety
 * `p` must be null or a live handle.
 */
size_t probmap_lrpd_n_coords(const struct ProbmapLrpd *p);

/**
 * Columns of the factor, or 0 for a null handle.
 *
 * # Safety
 * `p` must be null or a live handle.
 */
size_t probmap_lrpd_rank(const struct ProbmapLrpd *p);

/**
 * # Safety
 * `p` must be a live handle; `out` must be writable.
 */
enum ProbmapStatus probmap_lrpd_logdet(const struct ProbmapLrpd *p, double *out);

/**
 * `rᵀΣ⁻¹r` for a residual of length `len`.
 *
 * # Safety
 * `r` must hold `len` doubles; `out` must be writable.
 */
enum ProbmapStatus probmap_lrpd_mahalanobis(const struct ProbmapLrpd *p,
                                            const double *r,
                                            size_t len,
                                            double *out);

/**
 * Negative log-likelihood of `target`, optionally with the `2N·ln 2π` term.
 *
 * # Safety
 * `target` must hold `len` doubles; `out` must be writable.
 */
enum ProbmapStatus probmap_lrpd_nll(const struct ProbmapLrpd *p,
                                    const double *target,
                                    size_t len,
                                    bool include_normalizer,
                                    double *out);

/**
 * NLL and its gradient. `d_mu`, `d_log_d` take `n_coords` doubles, `d_l`
 * takes `n_coords × rank` row-major.
 *
 * # Safety
 * Every pointer must be valid for the sizes above.
 */
enum ProbmapStatus probmap_lrpd_nll_grad(const struct ProbmapLrpd *p,
                                         const double *target,
                                         size_t len,
                                         double *value,
                                         double *d_mu,
                                         double *d_log_d,
                                         double *d_l,
                                         double *d_kappa);

/**
 * `count` seeded draws written row-major into `out` (`count × n_coords`).
 *
 * # Safety
 * `out` must hold `count × n_coords` doubles.
 */
enum ProbmapStatus probmap_lrpd_sample(const struct ProbmapLrpd *p,
                                       uint64_t seed,
                                       size_t count,
                                       double *out);

/**
 * Dense `n_coords × n_coords` covariance, row-major.
 *
 * # Safety
 * `out` must hold `n_coords²` doubles.
 */
enum ProbmapStatus probmap_lrpd_dense_cov(const struct ProbmapLrpd *p, double *out);

/**
 * Bidirectional Chamfer distance between two polylines given as
 * interleaved `x, y` arrays.
 *
 * # Safety
 * `a` must hold `2 × a_points` doubles and `b` `2 × b_points`.
 */
enum ProbmapStatus probmap_chamfer(const double *a,
                                   size_t a_points,
                                   const double *b,
                                   size_t b_points,
                                   double *out);

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *probmap_last_error(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, freed once.
 */
void probmap_string_free(char *s);

/**
 * Library version as a static NUL-terminated string.
 */
const char *probmap_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROBMAP_H */
