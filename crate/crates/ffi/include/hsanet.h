#ifndef HSANET_H
#define HSANET_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum HsanetStatus {
  HSANET_STATUS_OK = 0,
  HSANET_STATUS_NULL_POINTER = 1,
  HSANET_STATUS_INVALID_ARGUMENT = 2,
  HSANET_STATUS_CONFIG = 3,
  HSANET_STATUS_IO = 4,
  HSANET_STATUS_FORMAT = 5,
  HSANET_STATUS_NUMERICAL = 6,
  HSANET_STATUS_PANIC = 7,
} HsanetStatus;

/**
 * Network architecture presets for [`hsanet_model_new`].
 */
typedef enum HsanetPreset {
  HSANET_PRESET_DEFAULT = 0,
  HSANET_PRESET_TINY = 1,
} HsanetPreset;

typedef enum HsanetModality {
  HSANET_MODALITY_CT = 0,
  HSANET_MODALITY_PET = 1,
} HsanetModality;

/**
 * Opaque network plus parameters.
 */
typedef struct HsanetModel HsanetModel;

/**
 * Image-quality metrics on `[0, 1]` data.
 */
typedef struct HsanetMetrics {
  double psnr;
  double ssim;
  double rmse;
  /**
   * RMSE in display units (HU for CT, SUV for PET).
   */
  double rmse_display;
} HsanetMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null after a
 * successful call. Valid until the next call into the library.
 */
const char *hsanet_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hsanet_version(void);

/**
 * Builds a freshly initialized network. The output convolution starts at
 * zero, so a new model returns its input unchanged.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum HsanetStatus hsanet_model_new(enum HsanetPreset preset,
                                   uint64_t seed,
                                   struct HsanetModel **out);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum HsanetStatus hsanet_model_load(const char *path, struct HsanetModel **out);

/**
 * Writes the model parameters as a checkpoint without optimizer state.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum HsanetStatus hsanet_model_save(const struct HsanetModel *model, const char *path);

/**
 * Releases a handle. Null is accepted and ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void hsanet_model_free(struct HsanetModel *model);

/**
 * Number of learnable scalars.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum HsanetStatus hsanet_model_param_count(const struct HsanetModel *model, size_t *out);

/**
 * Denoises `n` single-channel `h x w` images. Any size is accepted; the
 * network pads internally and crops back.
 *
 * # Safety
 * `input` and `output` must each point to `n * h * w` doubles; they may
 * alias.
 */
enum HsanetStatus hsanet_denoise(const struct HsanetModel *model,
                                 const double *input,
                                 size_t n,
                                 size_t h,
                                 size_t w,
                                 double *output);

/**
 * PSNR, SSIM and RMSE of `pred` against `target`, averaged over the `n`
 * images for SSIM and pooled for PSNR and RMSE.
 *
 * # Safety
 * `pred` and `target` must each point to `n * h * w` doubles; `out` must be
 * writable.
 */
enum HsanetStatus hsanet_metrics(const double *pred,
                                 const double *target,
                                 size_t n,
                                 size_t h,
                                 size_t w,
                                 enum HsanetModality modality,
                                 struct HsanetMetrics *out);

/**
 * Learning rate at step `n` of `total` under the polynomial schedule.
 *
 * # Safety
 * `out` must be writable.
 */
enum HsanetStatus hsanet_poly_lr(double base, uint64_t n, uint64_t total, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HSANET_H */
