#ifndef PARTSEG_H
#define PARTSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum PsStatus {
  PS_STATUS_OK = 0,
  PS_STATUS_NULL_POINTER = 1,
  PS_STATUS_INVALID_ARGUMENT = 2,
  PS_STATUS_NOT_FOUND = 3,
  PS_STATUS_BAD_FORMAT = 4,
  PS_STATUS_INVALID_PROMPT = 5,
  PS_STATUS_INVALID_SCALE = 6,
  PS_STATUS_BUFFER_TOO_SMALL = 7,
  PS_STATUS_IO = 8,
  PS_STATUS_INTERNAL = 9,
} PsStatus;

/**
 * A loaded segmentation model.
 */
typedef struct PsModel PsModel;

/**
 * A point cloud normalised to the unit sphere, with optional part labels.
 */
typedef struct PsShape PsShape;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread ("" after a success).
 * The pointer stays valid until the next call on the same thread.
 */
const char *ps_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ps_version(void);

/**
 * Loads a model bundle from `path` (UTF-8, NUL-terminated).
 *
 * # Safety
 * `path` must be a valid C string and `out` a valid pointer.
 */
enum PsStatus ps_model_load(const char *path, struct PsModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`ps_model_load`] and not be used afterwards.
 */
void ps_model_free(struct PsModel *model);

/**
 * Creates a shape from `n` interleaved xyz coordinates, normalised to the
 * unit sphere. `labels` may be null; otherwise it holds `n` part ids, which
 * are renumbered to `0..K` in order of first appearance.
 *
 * # Safety
 * `xyz` must hold `3 n` floats, `labels` (if non-null) `n` values.
 */
enum PsStatus ps_shape_new(const float *xyz,
                           size_t n,
                           const uint32_t *labels,
                           struct PsShape **out);

/**
 * Generates a labelled synthetic shape with `parts` parts (0 picks the
 * generator's default range) sampled at `points` points.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum PsStatus ps_shape_synthetic(uint64_t seed, size_t parts, size_t points, struct PsShape **out);

/**
 * Releases a shape; null is ignored.
 *
 * # Safety
 * `shape` must come from a `ps_shape_*` constructor and not be used afterwards.
 */
void ps_shape_free(struct PsShape *shape);

/**
 * Number of points; 0 for a null handle.
 *
 * # Safety
 * `shape` must be null or a live handle.
 */
size_t ps_shape_len(const struct PsShape *shape);

/**
 * Number of labelled parts; 0 when unlabelled or null.
 *
 * # Safety
 * `shape` must be null or a live handle.
 */
size_t ps_shape_part_count(const struct PsShape *shape);

/**
 * Copies the normalised coordinates (`3 n` floats).
 *
 * # Safety
 * `shape` must be a live handle and `out` hold `cap` floats.
 */
enum PsStatus ps_shape_points(const struct PsShape *shape, float *out, size_t cap);

/**
 * Copies the part labels (`n` values); [`PsStatus::NotFound`] when unlabelled.
 *
 * # Safety
 * `shape` must be a live handle and `out` hold `cap` values.
 */
enum PsStatus ps_shape_labels(const struct PsShape *shape, uint32_t *out, size_t cap);

/**
 * Interactive segmentation: per-point probabilities for the part under
 * point `prompt`. `scale` may be null (no scale prompt) or point to a value
 * in `[0, 1]`. `probs` receives `n` floats; `mask` (nullable) receives `n`
 * bytes, 1 where the probability is at least `threshold`.
 *
 * # Safety
 * Handles must be live; `probs` must hold `probs_cap` floats and `mask`
 * (if non-null) `mask_cap` bytes.
 */
enum PsStatus ps_segment(const struct PsModel *model,
                         struct PsShape *shape,
                         size_t prompt,
                         const float *scale,
                         float threshold,
                         float *probs,
                         size_t probs_cap,
                         uint8_t *mask,
                         size_t mask_cap);

/**
 * Full segmentation from `count` point prompts (`scales` nullable, else
 * `count` values in `[0, 1]`): one mask per prompt at threshold `theta`,
 * overlaps resolved with weight `alpha_conf`, gaps filled by `k`-NN
 * propagation. `labels` receives `n` prompt indices.
 *
 * # Safety
 * Handles must be live; `prompts` must hold `count` values, `scales` (if
 * non-null) `count` floats and `labels` `labels_cap` values.
 */
enum PsStatus ps_full_segment(const struct PsModel *model,
                              struct PsShape *shape,
                              const size_t *prompts,
                              const float *scales,
                              size_t count,
                              float theta,
                              float alpha_conf,
                              size_t k,
                              uint32_t *labels,
                              size_t labels_cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PARTSEG_H */
