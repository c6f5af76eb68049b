#ifndef SCNET_H
#define SCNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum ScnStatus {
  SCN_STATUS_OK = 0,
  SCN_STATUS_NULL_POINTER = 1,
  SCN_STATUS_INVALID_ARGUMENT = 2,
  SCN_STATUS_SHAPE = 3,
  SCN_STATUS_EMPTY_MASK = 4,
  SCN_STATUS_CONFIG = 5,
  SCN_STATUS_CHECKPOINT = 6,
  SCN_STATUS_IO = 7,
  SCN_STATUS_DATASET = 8,
  SCN_STATUS_NO_BACKGROUND = 9,
  SCN_STATUS_EMPTY_LOSS = 10,
  SCN_STATUS_PANIC = 11,
} ScnStatus;

/**
 * A trained or freshly initialised model.
 */
typedef struct ScnModel ScnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates a model with default hyperparameters and seeded random weights.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum ScnStatus scn_model_new(uint64_t seed, struct ScnModel **out);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ScnStatus scn_model_load(const char *path, struct ScnModel **out);

/**
 * Writes the model's parameters to `path`.
 *
 * # Safety
 * `model` must come from this library and `path` be NUL-terminated.
 */
enum ScnStatus scn_model_save(const struct ScnModel *model, const char *path);

/**
 * Number of named parameter tensors in the model.
 *
 * # Safety
 * `model` must come from this library; `out` must be valid.
 */
enum ScnStatus scn_model_tensor_count(const struct ScnModel *model, size_t *out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void scn_model_free(struct ScnModel *model);

/**
 * Segments `query` given `shots` labeled supports of the same size.
 *
 * `support_images` holds `shots` consecutive images and `support_masks`
 * `shots` consecutive masks. `out_mask` receives `height × width` bytes of
 * 0 or 1. Height and width must be multiples of 4.
 *
 * # Safety
 * All pointers must reference arrays of the sizes described above.
 */
enum ScnStatus scn_infer(const struct ScnModel *model,
                         const double *query,
                         const double *support_images,
                         const uint8_t *support_masks,
                         size_t shots,
                         size_t height,
                         size_t width,
                         uint8_t *out_mask);

/**
 * Intersection over union of two masks; 1 when both are empty.
 *
 * # Safety
 * `pred` and `gt` must hold `height × width` bytes; `out` must be valid.
 */
enum ScnStatus scn_iou(const uint8_t *pred,
                       const uint8_t *gt,
                       size_t height,
                       size_t width,
                       double *out);

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`) and returns the full message length in bytes.
 *
 * # Safety
 * `buf` must hold `len` writable bytes, or be null with `len` 0.
 */
size_t scn_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *scn_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCNET_H */
