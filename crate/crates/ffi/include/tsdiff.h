#ifndef TSDIFF_H
#define TSDIFF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TsdGrid {
  TSD_GRID_UNIFORM = 0,
  TSD_GRID_QUADRATIC = 1,
} TsdGrid;

typedef enum TsdMethod {
  TSD_METHOD_DDPM = 0,
  TSD_METHOD_DDIM = 1,
  TSD_METHOD_S_PNDM = 2,
  TSD_METHOD_F_PNDM = 3,
} TsdMethod;

typedef enum TsdStatus {
  TSD_STATUS_OK = 0,
  TSD_STATUS_NULL_POINTER = 1,
  TSD_STATUS_INVALID_ARGUMENT = 2,
  TSD_STATUS_IO = 3,
  TSD_STATUS_INVARIANT = 4,
  TSD_STATUS_DIVERGED = 5,
  TSD_STATUS_BUFFER_TOO_SMALL = 6,
  TSD_STATUS_PANIC = 7,
} TsdStatus;

// Opaque ε-predictor.
typedef struct TsdModel TsdModel;

// Opaque noise schedule.
typedef struct TsdSchedule TsdSchedule;

// Sampling request. `window == 0` disables time shifting.
typedef struct TsdSampleParams {
  enum TsdMethod method;
  enum TsdGrid grid;
  size_t steps;
  size_t n;
  double eta;
  uint64_t seed;
  size_t window;
  size_t cutoff;
} TsdSampleParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL-terminated, truncated
// to `len`). Returns the full message length in bytes, excluding the terminator.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t tsd_last_error_message(char *buf, size_t len);

// Linear β schedule.
//
// # Safety
// `out` must be a valid pointer.
enum TsdStatus tsd_schedule_new_linear(size_t steps,
                                       double beta_start,
                                       double beta_end,
                                       struct TsdSchedule **out);

// # Safety
// `schedule` must be null or a handle from `tsd_schedule_new_linear` not yet freed.
void tsd_schedule_free(struct TsdSchedule *schedule);

// # Safety
// `schedule` must be a live handle; `out` a valid pointer.
enum TsdStatus tsd_schedule_len(const struct TsdSchedule *schedule, size_t *out);

// ᾱ_t.
//
// # Safety
// `schedule` must be a live handle; `out` a valid pointer.
enum TsdStatus tsd_schedule_alpha_bar(const struct TsdSchedule *schedule, size_t t, double *out);

// Exact ε-predictor for isotropic Gaussian data `N(mean, variance·I)`.
//
// # Safety
// `schedule` must be a live handle, `mean` must point to `dim` doubles, `out` a valid pointer.
enum TsdStatus tsd_model_new_gaussian(const struct TsdSchedule *schedule,
                                      const double *mean,
                                      size_t dim,
                                      double variance,
                                      struct TsdModel **out);

// Loads a JSON checkpoint; its schedule must match `schedule`.
//
// # Safety
// `schedule` must be a live handle, `path` a NUL-terminated UTF-8 string, `out` a valid pointer.
enum TsdStatus tsd_model_load(const struct TsdSchedule *schedule,
                              const char *path,
                              struct TsdModel **out);

// Wraps the model so each step carries a state error of relative size `phi`.
//
// # Safety
// `model` and `schedule` must be live handles.
enum TsdStatus tsd_model_perturb(struct TsdModel *model,
                                 const struct TsdSchedule *schedule,
                                 double phi,
                                 uint64_t key);

// # Safety
// `model` must be null or a live handle.
void tsd_model_free(struct TsdModel *model);

// # Safety
// `model` must be a live handle; `out` a valid pointer.
enum TsdStatus tsd_model_dim(const struct TsdModel *model, size_t *out);

// Runs a sampler and writes `n × dim` row-major samples into `out`.
//
// # Safety
// Handles must be live, `params` valid, `out` must point to `out_len` writable doubles.
enum TsdStatus tsd_sample(const struct TsdModel *model,
                          const struct TsdSchedule *schedule,
                          const struct TsdSampleParams *params,
                          double *out,
                          size_t out_len);

// Sample variance (divisor d−1) of one flattened state.
//
// # Safety
// `x` must point to `len` doubles; `out` a valid pointer.
enum TsdStatus tsd_intra_sample_variance(const double *x, size_t len, double *out);

// Timestep in the window around `center` whose 1−ᾱ is closest to `variance`.
//
// # Safety
// `schedule` must be a live handle; `out` a valid pointer.
enum TsdStatus tsd_select_shifted_timestep(const struct TsdSchedule *schedule,
                                           double variance,
                                           size_t center,
                                           size_t window,
                                           size_t *out);

// σ_{t−1} − ‖e‖²/(d(d−1)).
//
// # Safety
// `out` must be a valid pointer.
enum TsdStatus tsd_optimal_shift_variance(double sigma_prev,
                                          double err_sq,
                                          size_t dim,
                                          size_t t,
                                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TSDIFF_H */
