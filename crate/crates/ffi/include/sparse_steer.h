#ifndef SPARSE_STEER_H
#define SPARSE_STEER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum SsStatus {
  SS_STATUS_OK = 0,
  SS_STATUS_NULL_POINTER = 1,
  SS_STATUS_INVALID_ARGUMENT = 2,
  SS_STATUS_IO = 3,
  SS_STATUS_FORMAT = 4,
  SS_STATUS_TRUNCATION = 5,
  SS_STATUS_SHAPE = 6,
  SS_STATUS_DEGENERATE = 7,
  SS_STATUS_OUT_OF_RANGE = 8,
  SS_STATUS_PANIC = 99,
} SsStatus;

/**
 * An embedding bundle.
 */
typedef struct SsBundle SsBundle;

/**
 * A cosine classifier head.
 */
typedef struct SsHead SsHead;

/**
 * A trained sparse autoencoder.
 */
typedef struct SsModel SsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failure on this thread, or null. The pointer stays
 * valid until the next call into this library from the same thread.
 */
const char *ss_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ss_version(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SsStatus ss_bundle_load(const char *path, struct SsBundle **out);

/**
 * # Safety
 * `bundle` must come from [`ss_bundle_load`] and not be freed yet. Null is
 * ignored.
 */
void ss_bundle_free(struct SsBundle *bundle);

/**
 * # Safety
 * `bundle` must be a live handle or null.
 */
size_t ss_bundle_rows(const struct SsBundle *bundle);

/**
 * # Safety
 * `bundle` must be a live handle or null.
 */
size_t ss_bundle_dim(const struct SsBundle *bundle);

/**
 * Copies row `i` into `out`, which must hold exactly `dim` floats.
 *
 * # Safety
 * `bundle` must be a live handle and `out` valid for `len` writes.
 */
enum SsStatus ss_bundle_row(const struct SsBundle *bundle, size_t i, float *out, size_t len);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SsStatus ss_model_load(const char *path, struct SsModel **out);

/**
 * # Safety
 * `model` must come from [`ss_model_load`] and not be freed yet. Null is
 * ignored.
 */
void ss_model_free(struct SsModel *model);

/**
 * # Safety
 * `model` must be a live handle or null.
 */
size_t ss_model_dim(const struct SsModel *model);

/**
 * # Safety
 * `model` must be a live handle or null.
 */
size_t ss_model_latent_dim(const struct SsModel *model);

/**
 * # Safety
 * `model` must be a live handle or null.
 */
size_t ss_model_k(const struct SsModel *model);

/**
 * Top-k reconstruction of `x`.
 *
 * # Safety
 * `x` must be valid for `len` reads and `out` for `len` writes.
 */
enum SsStatus ss_reconstruct(const struct SsModel *model, const float *x, size_t len, float *out);

/**
 * Per-sample steering vector `decode(gamma * c) - decode(c)`.
 *
 * # Safety
 * `x` must be valid for `len` reads and `out` for `len` writes.
 */
enum SsStatus ss_steering_vector(const struct SsModel *model,
                                 const float *x,
                                 size_t len,
                                 double gamma,
                                 float *out);

/**
 * Norm-preserving steering of `x` with strength `lambda`.
 *
 * # Safety
 * `x` must be valid for `len` reads and `out` for `len` writes.
 */
enum SsStatus ss_steer(const struct SsModel *model,
                       const float *x,
                       size_t len,
                       double gamma,
                       double lambda,
                       float *out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SsStatus ss_head_load(const char *path, struct SsHead **out);

/**
 * # Safety
 * `head` must come from [`ss_head_load`] and not be freed yet. Null is
 * ignored.
 */
void ss_head_free(struct SsHead *head);

/**
 * # Safety
 * `head` must be a live handle or null.
 */
size_t ss_head_num_classes(const struct SsHead *head);

/**
 * Most similar class by cosine; ties go to the lower class id.
 *
 * # Safety
 * `x` must be valid for `len` reads; `class_out` and `score_out` must be
 * writable (`score_out` may be null).
 */
enum SsStatus ss_classify(const struct SsHead *head,
                          const float *x,
                          size_t len,
                          uint32_t *class_out,
                          double *score_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPARSE_STEER_H */
