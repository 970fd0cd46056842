#ifndef CDDPM_H
#define CDDPM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every fallible function.
 */
enum CddpmStatus
#ifdef __cplusplus
  : int32_t
#endif // __cplusplus
 {
  CDDPM_STATUS_OK = 0,
  CDDPM_STATUS_NULL_POINTER = 1,
  CDDPM_STATUS_INVALID_ARGUMENT = 2,
  CDDPM_STATUS_DIMENSION_MISMATCH = 3,
  CDDPM_STATUS_IO = 4,
  CDDPM_STATUS_FORMAT = 5,
  CDDPM_STATUS_CONFIG = 6,
  CDDPM_STATUS_INCOMPATIBLE_CHECKPOINT = 7,
  CDDPM_STATUS_UNDEFINED = 8,
  CDDPM_STATUS_INTERNAL = 9,
  CDDPM_STATUS_PANIC = 10,
};
#ifndef __cplusplus
typedef int32_t CddpmStatus;
#endif // __cplusplus

/**
 * A 3D binary mask.
 */
typedef struct CddpmMask CddpmMask;

/**
 * A trained denoiser together with its noise schedule and noise settings.
 */
typedef struct CddpmModel CddpmModel;

/**
 * A 3D intensity volume.
 */
typedef struct CddpmVolume CddpmVolume;

/**
 * Post-processing settings; obtain defaults from
 * [`cddpm_postproc_default`].
 */
typedef struct CddpmPostProc {
  bool median_filter;
  bool brain_erosion;
  bool component_filter;
  /**
   * Odd edge length of the cubic median window.
   */
  size_t median_kernel;
  size_t erosion_iterations;
  size_t min_component_size;
  /**
   * 6 or 26.
   */
  uint32_t connectivity;
} CddpmPostProc;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cddpm_version(void);

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next library call on this thread.
 */
const char *cddpm_last_error_message(void);

/**
 * Create a volume from `d·h·w` values in z-major, row-major order.
 *
 * # Safety
 * `data` must point to `d·h·w` readable doubles; `out` must be writable.
 */
CddpmStatus cddpm_volume_new(size_t d,
                             size_t h,
                             size_t w,
                             const double *data,
                             struct CddpmVolume **out_volume);

/**
 * Read a volume file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out_volume` must be writable.
 */
CddpmStatus cddpm_volume_load(const char *path, struct CddpmVolume **out_volume);

/**
 * Write a volume file (values are stored as 32-bit floats).
 *
 * # Safety
 * `volume` must be a live handle and `path` a NUL-terminated string.
 */
CddpmStatus cddpm_volume_save(const struct CddpmVolume *volume, const char *path);

/**
 * Dimensions of a volume.
 *
 * # Safety
 * `volume` must be a live handle; the outputs must be writable.
 */
CddpmStatus cddpm_volume_dims(const struct CddpmVolume *volume, size_t *d, size_t *h, size_t *w);

/**
 * Copy the values into `buffer`, which must hold `len = d·h·w` doubles.
 *
 * # Safety
 * `volume` must be a live handle; `buffer` must have room for `len` values.
 */
CddpmStatus cddpm_volume_copy_data(const struct CddpmVolume *volume, double *buffer, size_t len);

/**
 * Release a volume; null is ignored.
 *
 * # Safety
 * `volume` must be null or a handle not yet freed.
 */
void cddpm_volume_free(struct CddpmVolume *volume);

/**
 * Create a mask from `d·h·w` bytes; nonzero bytes are foreground.
 *
 * # Safety
 * `data` must point to `d·h·w` readable bytes; `out_mask` must be writable.
 */
CddpmStatus cddpm_mask_new(size_t d,
                           size_t h,
                           size_t w,
                           const uint8_t *data,
                           struct CddpmMask **out_mask);

/**
 * Read a mask file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out_mask` must be writable.
 */
CddpmStatus cddpm_mask_load(const char *path, struct CddpmMask **out_mask);

/**
 * Write a mask file.
 *
 * # Safety
 * `mask` must be a live handle and `path` a NUL-terminated string.
 */
CddpmStatus cddpm_mask_save(const struct CddpmMask *mask, const char *path);

/**
 * Number of foreground voxels.
 *
 * # Safety
 * `mask` must be a live handle; `count` must be writable.
 */
CddpmStatus cddpm_mask_count(const struct CddpmMask *mask, size_t *count);

/**
 * Copy the mask as 0/1 bytes into `buffer` of `len = d·h·w` bytes.
 *
 * # Safety
 * `mask` must be a live handle; `buffer` must have room for `len` bytes.
 */
CddpmStatus cddpm_mask_copy_data(const struct CddpmMask *mask, uint8_t *buffer, size_t len);

/**
 * Release a mask; null is ignored.
 *
 * # Safety
 * `mask` must be null or a handle not yet freed.
 */
void cddpm_mask_free(struct CddpmMask *mask);

/**
 * Dice overlap; two empty masks give 1.
 *
 * # Safety
 * Handles must be live; `result` must be writable.
 */
CddpmStatus cddpm_dice(const struct CddpmMask *pred, const struct CddpmMask *gt, double *result);

/**
 * Area under the precision-recall curve of `score` against `gt`.
 *
 * # Safety
 * Handles must be live; `result` must be writable.
 */
CddpmStatus cddpm_auprc(const struct CddpmVolume *score,
                        const struct CddpmMask *gt,
                        double *result);

/**
 * Structural similarity of two volumes.
 *
 * # Safety
 * Handles must be live; `result` must be writable.
 */
CddpmStatus cddpm_ssim(const struct CddpmVolume *a, const struct CddpmVolume *b, double *result);

/**
 * Peak signal-to-noise ratio; identical volumes give +infinity.
 *
 * # Safety
 * Handles must be live; `result` must be writable.
 */
CddpmStatus cddpm_psnr(const struct CddpmVolume *a, const struct CddpmVolume *b, double *result);

/**
 * KL divergence between the in-brain intensity histograms of an input and
 * its reconstruction.
 *
 * # Safety
 * Handles must be live; `result` must be writable.
 */
CddpmStatus cddpm_histogram_kld(const struct CddpmVolume *input,
                                const struct CddpmVolume *reconstruction,
                                const struct CddpmMask *brain,
                                double *result);

/**
 * Default post-processing settings.
 */
struct CddpmPostProc cddpm_postproc_default(void);

/**
 * Anomaly score map: residual, optional median filter and optional
 * restriction to the eroded brain mask.
 *
 * # Safety
 * Handles must be live; `settings` must point to valid settings;
 * `out_score` must be writable.
 */
CddpmStatus cddpm_score_map(const struct CddpmVolume *input,
                            const struct CddpmVolume *reconstruction,
                            const struct CddpmMask *brain,
                            const struct CddpmPostProc *settings,
                            struct CddpmVolume **out_score);

/**
 * Binarize a score map at `threshold` and, if enabled, drop small
 * connected components.
 *
 * # Safety
 * Handles must be live; `settings` must point to valid settings;
 * `out_mask` must be writable.
 */
CddpmStatus cddpm_segment(const struct CddpmVolume *score,
                          double threshold,
                          const struct CddpmPostProc *settings,
                          struct CddpmMask **out_mask);

/**
 * Load a model checkpoint. With a configuration file, its schedule and
 * noise settings are used and the checkpoint must match its model
 * section; with `config_path` null the defaults apply.
 *
 * # Safety
 * `checkpoint_path` must be a NUL-terminated string, `config_path` null or
 * NUL-terminated; `out_model` must be writable.
 */
CddpmStatus cddpm_model_load(const char *checkpoint_path,
                             const char *config_path,
                             struct CddpmModel **out_model);

/**
 * Reconstruct a volume at the noise levels `t_list[0..n_levels]`,
 * averaging the levels. `seed` fixes the test-time noise.
 *
 * # Safety
 * Handles must be live; `t_list` must hold `n_levels` values;
 * `out_reconstruction` must be writable.
 */
CddpmStatus cddpm_reconstruct(const struct CddpmModel *model,
                              const struct CddpmVolume *input,
                              const size_t *t_list,
                              size_t n_levels,
                              uint64_t seed,
                              struct CddpmVolume **out_reconstruction);

/**
 * Release a model; null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void cddpm_model_free(struct CddpmModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CDDPM_H */
