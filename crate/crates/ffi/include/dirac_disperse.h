#ifndef DIRAC_DISPERSE_H
#define DIRAC_DISPERSE_H

#include <stddef.h>
#include <stdint.h>

// Success.
#define DD_OK 0

// A required pointer argument was null.
#define DD_ERR_NULL 1

// Invalid argument or precondition violation.
#define DD_ERR_VALIDATION 2

// Numerical failure (singular operator, lost hermiticity, insufficient resolution).
#define DD_ERR_NUMERICAL 3

// File system failure.
#define DD_ERR_IO 4

// Output buffer too small; the required size has been reported.
#define DD_ERR_BUFFER 5

// A panic was caught at the boundary.
#define DD_ERR_PANIC 6

// `N³` midpoint cells on `[-R, R]³`.
#define DD_GRID_UNIFORM_TENSOR 0

// Gauss–Legendre radius and polar angle with uniform azimuth on the ball of radius `R`.
#define DD_GRID_RADIAL_SPHERICAL 1

#define DD_FAMILY_ZERO 0

#define DD_FAMILY_ISOTROPIC_SCALAR 1

#define DD_FAMILY_DIAGONAL_SIGNATURE 2

#define DD_FAMILY_OFF_DIAGONAL_COUPLING 3

#define DD_FAMILY_RANDOM_HERMITIAN 4

#define DD_FAMILY_GAUSSIAN_WELL 5

// Opaque spatial grid.
typedef struct DdGrid DdGrid;

// Opaque sampled and factorized potential.
typedef struct DdPotential DdPotential;

// Opaque threshold classification with its operators.
typedef struct DdThreshold DdThreshold;

// Scalar digest of a threshold classification.
typedef struct {
  // 1 when zero energy is regular, 0 when it is an eigenvalue.
  int32_t regular;
  size_t kernel_dimension;
  double sigma_min;
  double sigma_max;
} DdThresholdInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *dd_version(void);

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `len`) and returns the full length including the NUL, or 0 if
// no error has been recorded.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t dd_last_error(char *buf, size_t len);

// Builds a grid; `scheme` is one of the `DD_GRID_*` codes.
//
// # Safety
// `out` must be valid for a write.
int32_t dd_grid_new(uint32_t scheme, size_t n, double box_radius, DdGrid **out);

// # Safety
// `grid` must be null or a handle from [`dd_grid_new`] not yet freed.
void dd_grid_free(DdGrid *grid);

// Number of quadrature points, 0 for a null handle.
//
// # Safety
// `grid` must be null or a live handle.
size_t dd_grid_len(const DdGrid *grid);

// Writes point `index` into `out[0..3]` and its weight into `weight`.
//
// # Safety
// `grid` must be a live handle, `out` valid for 3 doubles and `weight` null or valid for one.
int32_t dd_grid_point(const DdGrid *grid, size_t index, double *out, double *weight);

// Samples and factorizes a potential family on a grid.
//
// # Safety
// `grid` must be a live handle and `out` valid for a write.
int32_t dd_potential_new(const DdGrid *grid,
                         uint32_t family,
                         double coupling,
                         double delta,
                         uint64_t seed,
                         DdPotential **out);

// # Safety
// `pot` must be null or a handle from [`dd_potential_new`] not yet freed.
void dd_potential_free(DdPotential *pot);

// 1 if the potential vanishes identically, 0 if not, -1 for a null handle.
//
// # Safety
// `pot` must be null or a live handle.
int32_t dd_potential_is_zero(const DdPotential *pot);

// Classifies zero energy; `tol` is the kernel tolerance relative to `σ_max`.
//
// # Safety
// `pot` and `grid` must be live handles for the same grid and `out` valid for a write.
int32_t dd_classify(const DdPotential *pot, const DdGrid *grid, double tol, DdThreshold **out);

// # Safety
// `th` must be null or a handle from [`dd_classify`] not yet freed.
void dd_threshold_free(DdThreshold *th);

// # Safety
// `th` must be a live handle and `out` valid for a write.
int32_t dd_threshold_info(const DdThreshold *th, DdThresholdInfo *out);

// Writes the JSON digest of the classification into `buf` with a trailing NUL.
// `needed` receives the required size; [`DD_ERR_BUFFER`] is returned if `len` is smaller.
//
// # Safety
// `th` must be a live handle, `buf` null or valid for `len` bytes and `needed` null or valid for a write.
int32_t dd_threshold_summary_json(const DdThreshold *th,
                                  char *buf,
                                  size_t len,
                                  size_t *needed);

// Brackets the first critical coupling of a family in `[g_min, g_max]`.
// `found` receives 1 and `bracket[0..2]` the bracket if one exists, else 0.
//
// # Safety
// `grid` must be a live handle, `bracket` valid for 2 doubles and `found` valid for a write.
int32_t dd_coupling_scan(const DdGrid *grid,
                         uint32_t family,
                         double delta,
                         uint64_t seed,
                         double g_min,
                         double g_max,
                         size_t steps,
                         double *bracket,
                         int32_t *found);

// Free spectral density `μ(λ)(x, y) / (2πi)` at separation `d = x - y`.
//
// # Safety
// `d` must be valid for 3 doubles and `out` for 32.
int32_t dd_free_density(double lambda, const double *d, double *out);

// Perturbed spectral density `[R_V⁺ - R_V⁻](λ)(x, y) / (2πi)`.
//
// # Safety
// Handles must be live and belong together, `x` and `y` valid for 3 doubles, `out` for 32.
int32_t dd_spectral_density(const DdPotential *pot,
                            const DdGrid *grid,
                            const DdThreshold *th,
                            double lambda,
                            const double *x,
                            const double *y,
                            double *out);

// Least-squares slope of `log values` against `log times` over `[t_min, t_max]`.
//
// # Safety
// `times` and `values` must be valid for `n` doubles; `slope` and `residual` for a write each.
int32_t dd_fit_log_slope(const double *times,
                         const double *values,
                         size_t n,
                         double t_min,
                         double t_max,
                         double *slope,
                         double *residual);

// Runs the command-line driver with `argv[0..argc]` and returns its exit status.
//
// # Safety
// `argv` must hold `argc` valid NUL-terminated strings.
int32_t dd_cli_run(int32_t argc, const char *const *argv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIRAC_DISPERSE_H */
