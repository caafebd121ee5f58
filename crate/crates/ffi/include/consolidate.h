#ifndef CONSOLIDATE_H
#define CONSOLIDATE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes mirrored from the library's error variants.
 */
typedef enum ConsolidateStatus {
  ConsolidateStatus_Ok = 0,
  ConsolidateStatus_ShapeError = 1,
  ConsolidateStatus_DataError = 2,
  ConsolidateStatus_SingularError = 3,
  ConsolidateStatus_ValidationError = 4,
  ConsolidateStatus_RecipeError = 5,
  ConsolidateStatus_RankError = 6,
  ConsolidateStatus_GeometryError = 7,
  ConsolidateStatus_DivergenceError = 8,
  ConsolidateStatus_FormatError = 9,
  ConsolidateStatus_IoError = 10,
  ConsolidateStatus_NullArgument = 11,
  ConsolidateStatus_InvalidUtf8 = 12,
  ConsolidateStatus_InternalPanic = 13,
} ConsolidateStatus;

/**
 * Opaque checkpoint handle.
 */
typedef struct ConsolidateCheckpoint ConsolidateCheckpoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Crate version as a static NUL-terminated string.
 */
const char *consolidate_version(void);

/**
 * Detail text of the last error on this thread; empty when no error.
 */
const char *consolidate_last_error(void);

/**
 * Reads an MRGF checkpoint from `path` into a new handle.
 */
enum ConsolidateStatus consolidate_checkpoint_read(const char *path,
                                                   struct ConsolidateCheckpoint **out);

/**
 * Writes the handle's checkpoint to `path` (atomic temp-and-rename).
 */
enum ConsolidateStatus consolidate_checkpoint_write(const struct ConsolidateCheckpoint *handle,
                                                    const char *path);

/**
 * Releases a handle. Null is a no-op.
 */
void consolidate_checkpoint_free(struct ConsolidateCheckpoint *handle);

/**
 * Number of tensors in the checkpoint; 0 for a null handle.
 */
uintptr_t consolidate_checkpoint_tensor_count(const struct ConsolidateCheckpoint *handle);

/**
 * Borrowed tensor name at `index` in manifest order; null when out of range.
 */
const char *consolidate_checkpoint_tensor_name(const struct ConsolidateCheckpoint *handle,
                                               uintptr_t index);

/**
 * Element count of the named tensor.
 */
enum ConsolidateStatus consolidate_checkpoint_tensor_len(const struct ConsolidateCheckpoint *handle,
                                                         const char *name,
                                                         uintptr_t *out_len);

/**
 * Writes the tensor shape into `out_dims` (up to `cap` entries) and the
 * rank into `out_rank`.
 */
enum ConsolidateStatus consolidate_checkpoint_tensor_shape(const struct ConsolidateCheckpoint *handle,
                                                           const char *name,
                                                           uintptr_t *out_dims,
                                                           uintptr_t cap,
                                                           uintptr_t *out_rank);

/**
 * Copies the tensor's row-major f32 data into `out` (capacity `cap`).
 */
enum ConsolidateStatus consolidate_checkpoint_tensor_data(const struct ConsolidateCheckpoint *handle,
                                                          const char *name,
                                                          float *out,
                                                          uintptr_t cap);

/**
 * Model-level task-vector norm ‖expert − base‖ across all tensors.
 */
enum ConsolidateStatus consolidate_delta_norm(const struct ConsolidateCheckpoint *base,
                                              const struct ConsolidateCheckpoint *expert,
                                              double *out_norm);

/**
 * Parses a recipe JSON document (the same schema the CLI accepts, with
 * base/expert/calibration paths inside), runs the merge, and writes the
 * merged checkpoint to `out_path`.
 */
enum ConsolidateStatus consolidate_merge_recipe_json(const char *recipe_json, const char *out_path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONSOLIDATE_H */
