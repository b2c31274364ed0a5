#ifndef DESHADOW_H
#define DESHADOW_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum DsStatus {
  DS_STATUS_OK = 0,
  DS_STATUS_NULL_POINTER = 1,
  DS_STATUS_INVALID_ARGUMENT = 2,
  DS_STATUS_IO = 3,
  DS_STATUS_CHECKPOINT = 4,
  DS_STATUS_CONFIG = 5,
  DS_STATUS_INTERNAL = 6,
  DS_STATUS_PANIC = 7,
} DsStatus;

/**
 * A trained remover together with the config it was trained under.
 */
typedef struct DsRemover DsRemover;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until
 * the next call into this library from the same thread.
 */
const char *ds_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ds_version(void);

/**
 * Generate a phantom B-scan with `n_shadows` injected shadows. Each
 * output buffer must hold `height * width` floats; the mask is 0 or 1.
 *
 * # Safety
 * Output pointers must be valid for `height * width` writes.
 */
enum DsStatus ds_phantom_generate(uintptr_t height,
                                  uintptr_t width,
                                  uintptr_t n_shadows,
                                  uint64_t seed,
                                  float *out_shadowed,
                                  float *out_mask,
                                  float *out_ground_truth);

/**
 * Load the remover from a training checkpoint into `*out`. Release with
 * [`ds_remover_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DsStatus ds_remover_load(const char *path, struct DsRemover **out);

/**
 * # Safety
 * `handle` must come from [`ds_remover_load`] and not be used afterwards.
 */
void ds_remover_free(struct DsRemover *handle);

/**
 * Network input size the remover was trained at.
 *
 * # Safety
 * All pointers must be valid.
 */
enum DsStatus ds_remover_input_size(const struct DsRemover *handle,
                                    uintptr_t *height,
                                    uintptr_t *width);

/**
 * Deshadow one image of any size; it is resized to the network size and
 * back. `pixels` and `out` hold `height * width` floats and may alias.
 *
 * # Safety
 * `handle` must be live; buffers must be valid for `height * width` floats.
 */
enum DsStatus ds_remover_deshadow(const struct DsRemover *handle,
                                  const float *pixels,
                                  uintptr_t height,
                                  uintptr_t width,
                                  float *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DESHADOW_H */
