#ifndef MKDIFF_H
#define MKDIFF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by all functions.
 */
typedef enum MkdiffStatus {
  MKDIFF_STATUS_OK = 0,
  MKDIFF_STATUS_NULL_POINTER = 1,
  MKDIFF_STATUS_INVALID_ARGUMENT = 2,
  MKDIFF_STATUS_IO = 3,
  MKDIFF_STATUS_FORMAT = 4,
  MKDIFF_STATUS_NUMERICAL = 5,
  MKDIFF_STATUS_BUFFER_TOO_SMALL = 6,
  MKDIFF_STATUS_INTERNAL = 7,
} MkdiffStatus;

/**
 * Diffusion operators for one point cloud.
 */
typedef struct MkdiffBank MkdiffBank;

/**
 * A loaded checkpoint.
 */
typedef struct MkdiffModel MkdiffModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call on the same thread.
 */
const char *mkdiff_last_error(void);

/**
 * Load a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MkdiffStatus mkdiff_model_load(const char *path, struct MkdiffModel **out);

/**
 * Release a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`mkdiff_model_load`] and not be used afterwards.
 */
void mkdiff_model_free(struct MkdiffModel *model);

/**
 * Number of output channels per point (descriptor dimension or class count).
 *
 * # Safety
 * `model` must be a live handle or null.
 */
size_t mkdiff_model_out_dim(const struct MkdiffModel *model);

/**
 * 1 for a segmentation model, 0 for a descriptor model, -1 for null.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
int32_t mkdiff_model_is_segmentation(const struct MkdiffModel *model);

/**
 * Run the network on `n` points (`coords` holds `3n` values, row major) and
 * write the `n × out_dim` outputs to `out`: unit-norm descriptors or class
 * logits depending on the head.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum MkdiffStatus mkdiff_model_forward(const struct MkdiffModel *model,
                                       const double *coords,
                                       size_t n,
                                       double *out,
                                       size_t out_len);

/**
 * Predict one dataset label per point with a segmentation model.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum MkdiffStatus mkdiff_model_predict(const struct MkdiffModel *model,
                                       const double *coords,
                                       size_t n,
                                       uint32_t *labels,
                                       size_t labels_len);

/**
 * Build a random-walk kernel bank over `n` points with `n_sigmas` Gaussian
 * widths, `k` neighbours and `t` steps.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum MkdiffStatus mkdiff_bank_build(const double *coords,
                                    size_t n,
                                    const double *sigmas,
                                    size_t n_sigmas,
                                    size_t k,
                                    size_t t,
                                    struct MkdiffBank **out);

/**
 * Release a bank. Null is ignored.
 *
 * # Safety
 * `bank` must come from [`mkdiff_bank_build`] and not be used afterwards.
 */
void mkdiff_bank_free(struct MkdiffBank *bank);

/**
 * Diffuse an `n × f` feature matrix with every kernel; writes `n × (S·f)`
 * values where column block `s` belongs to the `s`-th smallest sigma.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum MkdiffStatus mkdiff_bank_apply(const struct MkdiffBank *bank,
                                    const double *features,
                                    size_t f,
                                    double *out,
                                    size_t out_len);

/**
 * Number of points the bank was built on, 0 for null.
 *
 * # Safety
 * `bank` must be a live handle or null.
 */
size_t mkdiff_bank_len(const struct MkdiffBank *bank);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MKDIFF_H */
