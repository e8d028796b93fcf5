#ifndef NOISYCUR_H
#define NOISYCUR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NcStatus {
  NC_STATUS_OK = 0,
  NC_STATUS_NULL_POINTER = 1,
  NC_STATUS_INVALID_ARGUMENT = 2,
  NC_STATUS_DIMENSION_MISMATCH = 3,
  NC_STATUS_NON_FINITE = 4,
  NC_STATUS_INFEASIBLE = 5,
  NC_STATUS_BUDGET_EXCEEDED = 6,
  NC_STATUS_NUMERICAL = 7,
  NC_STATUS_PANIC = 8,
  NC_STATUS_OTHER = 9,
} NcStatus;

/*
 Opaque dense matrix.
 */
typedef struct NcMatrix NcMatrix;

/*
 Opaque result of one reconstruction run.
 */
typedef struct NcReconstruction NcReconstruction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Length in bytes, without the terminator, of the calling thread's last
 error message; zero when the last call succeeded.
 */
size_t nc_last_error_length(void);

/*
 Copies the last error message, NUL-terminated and truncated to fit, into
 `buf`. Returns the number of bytes written without the terminator.

 # Safety
 `buf` must point to `len` writable bytes, or be null with `len == 0`.
 */
size_t nc_last_error_message(char *buf, size_t len);

/*
 Static version string.
 */
const char *nc_version(void);

/*
 Copies `rows * cols` row-major values into a new matrix.

 # Safety
 `data` must point to `rows * cols` readable doubles; `out` must be writable.
 */
enum NcStatus nc_matrix_new(size_t rows, size_t cols, const double *data, struct NcMatrix **out);

/*
 Rank-`rank` approximation of an i.i.d. N(mean, std^2) draw.

 # Safety
 `out` must be writable.
 */
enum NcStatus nc_matrix_synthetic(size_t rows,
                                  size_t cols,
                                  size_t rank,
                                  double mean,
                                  double std,
                                  uint64_t seed,
                                  struct NcMatrix **out);

/*
 # Safety
 `m` must come from this library and not be used afterwards; null is a no-op.
 */
void nc_matrix_free(struct NcMatrix *m);

/*
 # Safety
 `m` must be a live matrix handle; `rows` and `cols` must be writable.
 */
enum NcStatus nc_matrix_shape(const struct NcMatrix *m, size_t *rows, size_t *cols);

/*
 Copies the entries row-major into `buf`, which holds `len` doubles.

 # Safety
 `m` must be a live handle and `buf` must point to `len` writable doubles.
 */
enum NcStatus nc_matrix_copy(const struct NcMatrix *m, double *buf, size_t len);

/*
 `||A - B||_F / ||A||_F`; the absolute error when `A` is zero.

 # Safety
 Both handles must be live and `out` writable.
 */
enum NcStatus nc_relative_error(const struct NcMatrix *a, const struct NcMatrix *b, double *out);

/*
 Sketched-row count and spend for `d` columns under a two-cost budget.

 # Safety
 `s` and `spent` must be writable.
 */
enum NcStatus nc_plan_split(double p_e,
                            double p_c,
                            double budget,
                            size_t n,
                            size_t d,
                            size_t *s,
                            double *spent);

/*
 One reconstruction with a fixed ridge parameter.

 # Safety
 `a` must be a live handle and `out` writable.
 */
enum NcStatus nc_noisycur(const struct NcMatrix *a,
                          size_t d,
                          size_t s,
                          double sigma_c,
                          double sigma_e,
                          double lambda,
                          uint64_t seed,
                          struct NcReconstruction **out);

/*
 One reconstruction with the ridge parameter chosen by `folds`-fold
 cross-validation over `points` log-spaced values in `[lambda_lo, lambda_hi]`.

 # Safety
 `a` must be a live handle and `out` writable.
 */
enum NcStatus nc_noisycur_cv(const struct NcMatrix *a,
                             size_t d,
                             size_t s,
                             double sigma_c,
                             double sigma_e,
                             double lambda_lo,
                             double lambda_hi,
                             size_t points,
                             size_t folds,
                             uint64_t seed,
                             struct NcReconstruction **out);

/*
 # Safety
 `r` must come from this library and not be used afterwards; null is a no-op.
 */
void nc_reconstruction_free(struct NcReconstruction *r);

/*
 New matrix handle holding the estimate.

 # Safety
 `r` must be a live handle and `out` writable.
 */
enum NcStatus nc_reconstruction_estimate(const struct NcReconstruction *r, struct NcMatrix **out);

/*
 Ridge parameter used for the fit.

 # Safety
 `r` must be a live handle and `out` writable.
 */
enum NcStatus nc_reconstruction_lambda(const struct NcReconstruction *r, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NOISYCUR_H */
