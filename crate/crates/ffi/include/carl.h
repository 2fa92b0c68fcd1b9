#ifndef CARL_H
#define CARL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CarlLayer {
  CARL_LAYER_SPECTRAL = 0,
  CARL_LAYER_SPATIAL = 1,
} CarlLayer;

typedef enum CarlStatus {
  CARL_STATUS_OK = 0,
  CARL_STATUS_NULL_POINTER = 1,
  CARL_STATUS_INVALID_ARGUMENT = 2,
  CARL_STATUS_CONFIG = 3,
  CARL_STATUS_IO = 4,
  CARL_STATUS_FORMAT = 5,
  CARL_STATUS_NUMERIC = 6,
  CARL_STATUS_BUFFER_TOO_SMALL = 7,
  CARL_STATUS_PANIC = 8,
} CarlStatus;

/**
 * Encoder weights loaded from a pre-training or training checkpoint.
 */
typedef struct CarlEncoder CarlEncoder;

/**
 * A hyperspectral or multispectral image.
 */
typedef struct CarlImage CarlImage;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *carl_version(void);

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next call into the library on this thread.
 */
const char *carl_last_error(void);

/**
 * Reads a `.csp` image file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum CarlStatus carl_image_read(const char *path, struct CarlImage **out);

/**
 * Builds an unlabelled image from `height·width·channels` reflectances in
 * row-major pixel order with interleaved channels.
 *
 * # Safety
 * `wavelengths` must hold `channels` values and `data` `height·width·channels`.
 */
enum CarlStatus carl_image_new(size_t height,
                               size_t width,
                               size_t channels,
                               const double *wavelengths,
                               const double *data,
                               struct CarlImage **out);

/**
 * # Safety
 * `image` must come from this library; the output pointers must be writable.
 */
enum CarlStatus carl_image_dims(const struct CarlImage *image,
                                size_t *height,
                                size_t *width,
                                size_t *channels);

/**
 * # Safety
 * `image` must come from this library and `path` be a NUL-terminated string.
 */
enum CarlStatus carl_image_write(const struct CarlImage *image, const char *path);

/**
 * # Safety
 * `image` must come from this library (or be null) and not be used afterwards.
 */
void carl_image_free(struct CarlImage *image);

/**
 * Loads the encoder of a checkpoint written by `carl pretrain` (the
 * student) or `carl train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum CarlStatus carl_encoder_load(const char *path, struct CarlEncoder **out);

/**
 * # Safety
 * `encoder` must come from this library (or be null) and not be used afterwards.
 */
void carl_encoder_free(struct CarlEncoder *encoder);

/**
 * Width of one patch feature vector for `layer`.
 *
 * # Safety
 * `encoder` must come from this library and `dim` be writable.
 */
enum CarlStatus carl_encoder_feature_dim(const struct CarlEncoder *encoder,
                                         enum CarlLayer layer,
                                         size_t *dim);

/**
 * Patch grid of an image of the given size.
 *
 * # Safety
 * `encoder` must come from this library; the output pointers must be writable.
 */
enum CarlStatus carl_encoder_grid(const struct CarlEncoder *encoder,
                                  size_t height,
                                  size_t width,
                                  size_t *grid_h,
                                  size_t *grid_w);

/**
 * Frozen per-patch features, `grid_h·grid_w` rows of `feature_dim` values.
 * `written` receives the required length; if `len` is smaller nothing is
 * copied and `CARL_STATUS_BUFFER_TOO_SMALL` is returned.
 *
 * # Safety
 * `out` must hold `len` values; the handles must come from this library.
 */
enum CarlStatus carl_encoder_features(const struct CarlEncoder *encoder,
                                      const struct CarlImage *image,
                                      enum CarlLayer layer_kind,
                                      double *out,
                                      size_t len,
                                      size_t *written);

/**
 * Per-pixel class predictions of a segmentation checkpoint, row-major.
 *
 * # Safety
 * `out` must hold `len` values; the handles must come from this library.
 */
enum CarlStatus carl_encoder_segment(const struct CarlEncoder *encoder,
                                     const struct CarlImage *image,
                                     uint32_t *out,
                                     size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CARL_H */
