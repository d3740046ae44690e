#ifndef ADAMOGE_H
#define ADAMOGE_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result code of every fallible call.
typedef enum AdamogeStatus {
  ADAMOGE_STATUS_OK = 0,
  ADAMOGE_STATUS_NULL_POINTER = 1,
  ADAMOGE_STATUS_INVALID_ARGUMENT = 2,
  ADAMOGE_STATUS_IO = 3,
  ADAMOGE_STATUS_PARSE = 4,
  ADAMOGE_STATUS_CONFIG = 5,
  ADAMOGE_STATUS_CHECKPOINT = 6,
  ADAMOGE_STATUS_FINGERPRINT_MISMATCH = 7,
  ADAMOGE_STATUS_DATA = 8,
  ADAMOGE_STATUS_NUMERIC = 9,
  ADAMOGE_STATUS_BUFFER_SIZE = 10,
  ADAMOGE_STATUS_PANIC = 11,
} AdamogeStatus;

// Loaded model with the normalization it was trained under.
typedef struct AdamogeModel AdamogeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Loads a checkpoint written by `adamoge train`.
//
// `config_path` may be null for the built-in defaults. Unless
// `allow_fingerprint_mismatch` is set, the checkpoint must have been
// written for the same config.
//
// # Safety
// String arguments must be null or nul-terminated; `out` must be writable.
enum AdamogeStatus adamoge_model_load(const char *config_path,
                                      const char *checkpoint_path,
                                      bool allow_fingerprint_mismatch,
                                      struct AdamogeModel **out);

// Lookback, horizon and variable count of a model. Any output may be null.
//
// # Safety
// `model` must come from [`adamoge_model_load`]; non-null outputs must be writable.
enum AdamogeStatus adamoge_model_dims(const struct AdamogeModel *model,
                                      size_t *lookback,
                                      size_t *horizon,
                                      size_t *variables);

// Number of trainable scalars.
//
// # Safety
// `model` must come from [`adamoge_model_load`]; `out` must be writable.
enum AdamogeStatus adamoge_model_param_count(const struct AdamogeModel *model, size_t *out);

// Forecasts `n` windows in original units.
//
// `window` holds `n * L * V` row-major values `(n, L, V)`; `out` receives
// `n * H * V` values `(n, H, V)`.
//
// # Safety
// `window` must point to `window_len` readable doubles and `out` to
// `out_len` writable doubles.
enum AdamogeStatus adamoge_model_forecast(const struct AdamogeModel *model,
                                          const double *window,
                                          size_t window_len,
                                          double *out,
                                          size_t out_len);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must be null or come from [`adamoge_model_load`], and must not be
// used afterwards.
void adamoge_model_free(struct AdamogeModel *model);

// Message of the last failed call on this thread, or null.
//
// The pointer stays valid until the next call into this library on the
// same thread.
const char *adamoge_last_error(void);

// Unnormalized real FFT of `len >= 2` samples into `len / 2 + 1` bins.
//
// # Safety
// `x` must point to `len` readable doubles; `re` and `im` to `bins`
// writable doubles each.
enum AdamogeStatus adamoge_rfft(const double *x, size_t len, double *re, double *im, size_t bins);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADAMOGE_H */
