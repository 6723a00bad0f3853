#ifndef GDT_H
#define GDT_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum GdtStatus {
  GDT_STATUS_OK = 0,
  GDT_STATUS_NULL_POINTER = 1,
  GDT_STATUS_DIMENSION_MISMATCH = 2,
  GDT_STATUS_NON_FINITE = 3,
  GDT_STATUS_INVALID_CONFIG = 4,
  /**
   * SVD failure, divergence or a degenerate initial point.
   */
  GDT_STATUS_NUMERICAL = 5,
  GDT_STATUS_IO = 6,
  GDT_STATUS_PARSE = 7,
  GDT_STATUS_PANIC = 8,
} GdtStatus;

/**
 * Dense row-major matrix.
 */
typedef struct GdtMat GdtMat;

/**
 * Outcome of [`gdt_mtl_solve`].
 */
typedef struct GdtReport GdtReport;

/**
 * Solver settings. Non-positive `eta` or `lambda` select the automatic rule.
 */
typedef struct GdtSolveConfig {
  size_t rank;
  size_t s1;
  size_t s2;
  double eta;
  size_t max_iters;
  double rel_tol;
  double lambda;
} GdtSolveConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until the
 * next call into this library on the same thread.
 */
const char *gdt_last_error_message(void);

/**
 * Copies `rows * cols` row-major values into a new matrix.
 *
 * # Safety
 * `data` must point to `rows * cols` readable doubles; `out` must be writable.
 */
enum GdtStatus gdt_mat_new(size_t rows, size_t cols, const double *data, struct GdtMat **out);

/**
 * Releases a matrix. NULL is ignored.
 *
 * # Safety
 * `m` must come from this library and not be freed twice.
 */
void gdt_mat_free(struct GdtMat *m);

/**
 * Number of rows, or 0 for NULL.
 *
 * # Safety
 * `m` must be NULL or a live matrix handle.
 */
size_t gdt_mat_rows(const struct GdtMat *m);

/**
 * Number of columns, or 0 for NULL.
 *
 * # Safety
 * `m` must be NULL or a live matrix handle.
 */
size_t gdt_mat_cols(const struct GdtMat *m);

/**
 * Copies the row-major entries into `buf`, which must hold `len == rows * cols` doubles.
 *
 * # Safety
 * `buf` must point to `len` writable doubles.
 */
enum GdtStatus gdt_mat_copy_data(const struct GdtMat *m, double *buf, size_t len);

/**
 * Reads a numeric CSV file (no header).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum GdtStatus gdt_mat_read_csv(const char *path, struct GdtMat **out);

/**
 * Writes a matrix as CSV.
 *
 * # Safety
 * `m` must be a live handle and `path` a NUL-terminated string.
 */
enum GdtStatus gdt_mat_write_csv(const struct GdtMat *m, const char *path);

/**
 * Keeps the `s` rows with largest ℓ₂ norm (ties to the lower index) and zeroes the rest.
 *
 * # Safety
 * `m` must be a live handle; `out` must be writable.
 */
enum GdtStatus gdt_hard_threshold_rows(const struct GdtMat *m, size_t s, struct GdtMat **out);

/**
 * Rotation-aligned distance between the stacked pairs `[U; V]` and `[U*; V*]`.
 *
 * # Safety
 * All matrix arguments must be live handles; `out` must be writable.
 */
enum GdtStatus gdt_subspace_distance(const struct GdtMat *u,
                                     const struct GdtMat *v,
                                     const struct GdtMat *u_star,
                                     const struct GdtMat *v_star,
                                     double *out);

/**
 * Defaults: rank and budgets unset (must be filled in), automatic step and
 * penalty, 500 iterations, no early stop.
 */
struct GdtSolveConfig gdt_solve_config_default(void);

/**
 * Fits `Y ≈ XΘ` with `Θ` low rank and row/column sparse: lasso
 * initialization followed by thresholded factored gradient descent.
 *
 * # Safety
 * `x` and `y` must be live handles, `cfg` readable and `out` writable.
 */
enum GdtStatus gdt_mtl_solve(const struct GdtMat *x,
                             const struct GdtMat *y,
                             const struct GdtSolveConfig *cfg,
                             struct GdtReport **out);

/**
 * Releases a report. NULL is ignored.
 *
 * # Safety
 * `r` must come from this library and not be freed twice.
 */
void gdt_report_free(struct GdtReport *r);

/**
 * Copies the estimate `Θ` into a new matrix.
 *
 * # Safety
 * `r` must be a live handle; `out` must be writable.
 */
enum GdtStatus gdt_report_theta(const struct GdtReport *r, struct GdtMat **out);

/**
 * Iterations performed, or 0 for NULL.
 *
 * # Safety
 * `r` must be NULL or a live handle.
 */
size_t gdt_report_iterations(const struct GdtReport *r);

/**
 * `(1/2n)‖Y − XΘ‖²_F` at the estimate, or NaN for NULL.
 *
 * # Safety
 * `r` must be NULL or a live handle.
 */
double gdt_report_objective(const struct GdtReport *r);

/**
 * 1 if the relative-change tolerance stopped the run, else 0.
 *
 * # Safety
 * `r` must be NULL or a live handle.
 */
int32_t gdt_report_converged(const struct GdtReport *r);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GDT_H */
