#ifndef SWITCHEM_H
#define SWITCHEM_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum SwitchemStatus {
  SWITCHEM_STATUS_OK = 0,
  SWITCHEM_STATUS_NULL_POINTER = 1,
  SWITCHEM_STATUS_INVALID_ARGUMENT = 2,
  SWITCHEM_STATUS_NUMERICAL = 3,
  SWITCHEM_STATUS_IO = 4,
  SWITCHEM_STATUS_PANIC = 5,
} SwitchemStatus;

/**
 * A finished fit.
 */
typedef struct SwitchemFit SwitchemFit;

/**
 * Observation series `X_{t_0..t_n}`.
 */
typedef struct SwitchemSeries SwitchemSeries;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *switchem_last_error(void);

/**
 * Wraps `len` observations with step `h`. The data are copied.
 *
 * # Safety
 * `x` must point to `len` readable doubles; `out` must be writable.
 */
enum SwitchemStatus switchem_series_new(const double *x,
                                        size_t len,
                                        double h,
                                        struct SwitchemSeries **out);

/**
 * Simulates a path from a JSON config (same schema as the CLI) with `seed`.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `out` must be writable.
 */
enum SwitchemStatus switchem_series_simulate(const char *config_json,
                                             uint64_t seed,
                                             struct SwitchemSeries **out);

/**
 * Number of stored values (`n + 1`); 0 for a null handle.
 *
 * # Safety
 * `series` must be null or a live handle.
 */
size_t switchem_series_len(const struct SwitchemSeries *series);

/**
 * Copies the values into `buf`, which must hold `len >= switchem_series_len` doubles.
 *
 * # Safety
 * `series` must be a live handle and `buf` must point to `len` writable doubles.
 */
enum SwitchemStatus switchem_series_copy(const struct SwitchemSeries *series,
                                         double *buf,
                                         size_t len);

/**
 * # Safety
 * `series` must be null or a handle not yet freed.
 */
void switchem_series_free(struct SwitchemSeries *series);

/**
 * Runs the EM fit on `series` using the `simulation.generator` and `em`
 * sections of `config_json`. A random start uses `simulation.seed`.
 *
 * A fit that ends in numerical failure still produces a handle and returns
 * `SWITCHEM_STATUS_NUMERICAL`.
 *
 * # Safety
 * `series` must be a live handle, `config_json` NUL-terminated, `out` writable.
 */
enum SwitchemStatus switchem_fit(const struct SwitchemSeries *series,
                                 const char *config_json,
                                 struct SwitchemFit **out);

/**
 * 0 converged, 1 iteration limit reached, 2 numerical failure, -1 null handle.
 *
 * # Safety
 * `fit` must be null or a live handle.
 */
int32_t switchem_fit_status(const struct SwitchemFit *fit);

/**
 * # Safety
 * `fit` must be null or a live handle.
 */
size_t switchem_fit_iterations(const struct SwitchemFit *fit);

/**
 * # Safety
 * `fit` must be null or a live handle.
 */
size_t switchem_fit_n_states(const struct SwitchemFit *fit);

/**
 * Writes the estimate with regimes ordered by decreasing drift level.
 * `b` must hold `n_states` doubles.
 *
 * # Safety
 * `fit` must be a live handle; `b`, `lambda`, `delta` writable.
 */
enum SwitchemStatus switchem_fit_estimate(const struct SwitchemFit *fit,
                                          double *b,
                                          size_t n_states,
                                          double *lambda,
                                          double *delta);

/**
 * The `result.json` document for this fit. Free with [`switchem_string_free`].
 *
 * # Safety
 * `fit` must be null or a live handle.
 */
char *switchem_fit_result_json(const struct SwitchemFit *fit);

/**
 * # Safety
 * `fit` must be null or a handle not yet freed.
 */
void switchem_fit_free(struct SwitchemFit *fit);

/**
 * # Safety
 * `s` must be null or a string returned by this library and not yet freed.
 */
void switchem_string_free(char *s);

/**
 * Density of `NIG(a, 0, delta * t, 0)` at `z`.
 *
 * # Safety
 * `out` must be writable.
 */
enum SwitchemStatus switchem_nig_density(double a, double delta, double t, double z, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SWITCHEM_H */
