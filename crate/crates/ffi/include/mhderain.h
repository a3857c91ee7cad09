#ifndef MHDERAIN_H
#define MHDERAIN_H

/* Generated by cbindgen from the mhderain-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call in this interface.
 */
typedef enum MhdnStatus {
  /**
   * The call succeeded.
   */
  MHDN_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  MHDN_STATUS_NULL_POINTER = 1,
  /**
   * A path or string argument was not valid UTF-8.
   */
  MHDN_STATUS_INVALID_UTF8 = 2,
  /**
   * An argument was rejected: bad dimensions, values outside [0, 1],
   * or buffers that do not match the stated shape.
   */
  MHDN_STATUS_INVALID_INPUT = 3,
  /**
   * Reading or writing a file failed, including image decode errors.
   */
  MHDN_STATUS_IO_FAILED = 4,
  /**
   * The checkpoint file exists but could not be understood.
   */
  MHDN_STATUS_BAD_CHECKPOINT = 5,
  /**
   * An unexpected internal failure; details via `mhdn_last_error`.
   */
  MHDN_STATUS_INTERNAL = 6,
} MhdnStatus;

/**
 * A loaded deraining model. Create with `mhdn_model_load`, release with
 * `mhdn_model_free`. Calls on one model are safe from multiple threads
 * because inference never mutates it.
 */
typedef struct MhdnModel MhdnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mhdn_version(void);

/**
 * Message for the most recent failure on the calling thread, or an empty
 * string. The pointer stays valid until the next failing call on the same
 * thread.
 */
const char *mhdn_last_error(void);

/**
 * Loads a training checkpoint and rebuilds its network. On success writes
 * an owned handle to `out_model`; free it with `mhdn_model_free`.
 *
 * # Safety
 * `checkpoint_path` must be NUL-terminated and `out_model` must point to
 * writable storage for one pointer.
 */
enum MhdnStatus mhdn_model_load(const char *checkpoint_path, struct MhdnModel **out_model);

/**
 * Releases a model handle. A null pointer is a no-op.
 *
 * # Safety
 * `model` must be null or a pointer obtained from `mhdn_model_load` that
 * has not been freed yet.
 */
void mhdn_model_free(struct MhdnModel *model);

/**
 * Derains one RGB image. `rainy` holds `height * width * 3` floats in
 * [0, 1], interleaved RGB in row-major order; the result is written to
 * `derained`, which must have the same length. The buffers may alias.
 *
 * # Safety
 * `model` must be a live handle and both buffers must cover
 * `height * width * 3` floats.
 */
enum MhdnStatus mhdn_derain_rgb(const struct MhdnModel *model,
                                const float *rainy,
                                size_t height,
                                size_t width,
                                float *derained);

/**
 * Derains an image file. The input may be PNG or JPEG; the output is
 * written as PNG regardless of extension.
 *
 * # Safety
 * `model` must be a live handle; both paths must be NUL-terminated.
 */
enum MhdnStatus mhdn_derain_file(const struct MhdnModel *model,
                                 const char *input_path,
                                 const char *output_path);

/**
 * Peak signal-to-noise ratio in dB between two equal-length buffers of
 * [0, 1] samples. Identical buffers report 100 dB.
 *
 * # Safety
 * `a` and `b` must cover `len` floats and `out_db` must be writable.
 */
enum MhdnStatus mhdn_psnr(const float *a, const float *b, size_t len, double *out_db);

/**
 * Mean structural similarity between two interleaved images of the given
 * dimensions, using the default 11x11 Gaussian window. Images must be at
 * least as large as the window.
 *
 * # Safety
 * `a` and `b` must cover `height * width * channels` floats and `out`
 * must be writable.
 */
enum MhdnStatus mhdn_ssim(const float *a,
                          const float *b,
                          size_t height,
                          size_t width,
                          size_t channels,
                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MHDERAIN_H */
