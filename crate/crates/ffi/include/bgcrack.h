#ifndef BGCRACK_H
#define BGCRACK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BgcStatus {
  BGC_STATUS_OK = 0,
  BGC_STATUS_NULL_POINTER = 1,
  BGC_STATUS_INVALID_ARGUMENT = 2,
  BGC_STATUS_SHAPE = 3,
  BGC_STATUS_GEOMETRY = 4,
  BGC_STATUS_CONFIG = 5,
  BGC_STATUS_CHECKPOINT = 6,
  BGC_STATUS_IO = 7,
  BGC_STATUS_INTERNAL = 8,
  BGC_STATUS_PANIC = 9,
} BgcStatus;

/**
 * Opaque model handle.
 */
typedef struct BgcModel BgcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into this library from the same thread.
 */
const char *bgc_last_error_message(void);

/**
 * Freshly initialised model with default widths.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage.
 */
enum BgcStatus bgc_model_new(bool no_edge, uint64_t seed, struct BgcModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum BgcStatus bgc_model_load(const char *path, struct BgcModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum BgcStatus bgc_model_save(const struct BgcModel *model, const char *path);

/**
 * Release a handle. NULL is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void bgc_model_free(struct BgcModel *model);

/**
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum BgcStatus bgc_model_num_params(const struct BgcModel *model, uint64_t *out);

/**
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum BgcStatus bgc_model_has_edge(const struct BgcModel *model, bool *out);

/**
 * Crack body and edge probabilities for an interleaved 8-bit RGB image of
 * `height × width` pixels. Outputs are row-major `height × width` maps;
 * `out_edge` may be NULL and is zero-filled for edge-ablated models.
 *
 * # Safety
 * `rgb` must hold `3·height·width` bytes, `out_body` (and `out_edge` when
 * not NULL) `height·width` floats.
 */
enum BgcStatus bgc_model_predict(const struct BgcModel *model,
                                 const uint8_t *rgb,
                                 size_t height,
                                 size_t width,
                                 float *out_body,
                                 float *out_edge);

/**
 * Mean per-image IoU of `n` probability maps thresholded at 0.5 against
 * 0/1 ground truth.
 *
 * # Safety
 * `preds` and `gts` must each hold `n·height·width` elements.
 */
enum BgcStatus bgc_mi_iou(const float *preds,
                          const uint8_t *gts,
                          size_t n,
                          size_t height,
                          size_t width,
                          double *out);

/**
 * Mean per-image continuous Dice.
 *
 * # Safety
 * As for [`bgc_mi_iou`].
 */
enum BgcStatus bgc_mi_dice(const float *preds,
                           const uint8_t *gts,
                           size_t n,
                           size_t height,
                           size_t width,
                           double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BGCRACK_H */
