#ifndef FVLAB_H
#define FVLAB_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum FvlabStatus {
  FVLAB_STATUS_OK = 0,
  FVLAB_STATUS_NULL_POINTER = 1,
  FVLAB_STATUS_INVALID_UTF8 = 2,
  FVLAB_STATUS_BUFFER_TOO_SMALL = 3,
  FVLAB_STATUS_PARAMETER = 4,
  FVLAB_STATUS_RANGE = 5,
  FVLAB_STATUS_LENGTH = 6,
  FVLAB_STATUS_FORMAT = 7,
  FVLAB_STATUS_INTEGRITY = 8,
  FVLAB_STATUS_CAPABILITY = 9,
  FVLAB_STATUS_TRUNCATION = 10,
  FVLAB_STATUS_IO = 11,
  FVLAB_STATUS_STORE = 12,
  FVLAB_STATUS_DEGENERATE = 13,
  FVLAB_STATUS_OTHER = 14,
  FVLAB_STATUS_PANIC = 15,
} FvlabStatus;

/**
 * Opaque model handle.
 */
typedef struct FvlabModel FvlabModel;

/**
 * Opaque function-vector store handle.
 */
typedef struct FvlabStore FvlabStore;

/**
 * Additive steering `h += alpha * vector` at the output of block `layer`.
 */
typedef struct FvlabSteer {
  size_t layer;
  /**
   * `d_model` floats.
   */
  const float *vector;
  size_t vector_len;
  float alpha;
  /**
   * Nonzero steers only the final position.
   */
  uint8_t final_position_only;
} FvlabSteer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *fvlab_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fvlab_version(void);

/**
 * Loads `path` (an XFVC checkpoint) and the `tokenizer.json` beside it.
 */
enum FvlabStatus fvlab_model_load(const char *path, struct FvlabModel **out);

/**
 * Releases a model. Null is ignored.
 */
void fvlab_model_free(struct FvlabModel *model);

/**
 * Dimensions of a loaded model. Any output pointer may be null.
 */
enum FvlabStatus fvlab_model_dims(const struct FvlabModel *model,
                                  size_t *n_layers,
                                  size_t *d_model,
                                  size_t *vocab_size,
                                  size_t *max_context);

enum FvlabStatus fvlab_encode(const struct FvlabModel *model,
                              const uint8_t *text,
                              size_t text_len,
                              uint32_t *out,
                              size_t cap,
                              size_t *out_len);

enum FvlabStatus fvlab_decode(const struct FvlabModel *model,
                              const uint32_t *ids,
                              size_t n_ids,
                              uint8_t *out,
                              size_t cap,
                              size_t *out_len);

/**
 * Next-token logits at the final position (`vocab_size` floats), with
 * optional steering (`steer` may be null).
 */
enum FvlabStatus fvlab_forward(const struct FvlabModel *model,
                               const uint32_t *ids,
                               size_t n_ids,
                               const struct FvlabSteer *steer,
                               float *out,
                               size_t cap,
                               size_t *out_len);

/**
 * Residual stream after block `layer` at the final position (`d_model`
 * floats).
 */
enum FvlabStatus fvlab_residual(const struct FvlabModel *model,
                                const uint32_t *ids,
                                size_t n_ids,
                                size_t layer,
                                const struct FvlabSteer *steer,
                                float *out,
                                size_t cap,
                                size_t *out_len);

/**
 * Logit-lens logits for a residual vector (`d_model` floats in).
 */
enum FvlabStatus fvlab_lens_logits(const struct FvlabModel *model,
                                   const float *h,
                                   size_t h_len,
                                   float *out,
                                   size_t cap,
                                   size_t *out_len);

/**
 * Greedy decoding of up to `max_new` tokens after `ids`. On
 * `FVLAB_TRUNCATION` the tokens produced before the context limit are
 * still written.
 */
enum FvlabStatus fvlab_generate(const struct FvlabModel *model,
                                const uint32_t *ids,
                                size_t n_ids,
                                size_t max_new,
                                const struct FvlabSteer *steer,
                                uint32_t *out,
                                size_t cap,
                                size_t *out_len);

/**
 * Opens an FV store file.
 */
enum FvlabStatus fvlab_store_open(const char *path, struct FvlabStore **out);

void fvlab_store_free(struct FvlabStore *store);

/**
 * Number of stored vectors and their dimension. Either pointer may be null.
 */
enum FvlabStatus fvlab_store_info(const struct FvlabStore *store, size_t *len, size_t *d_model);

/**
 * Copies the FV for (`task`, template `T<template>`, `layer`).
 */
enum FvlabStatus fvlab_store_get(const struct FvlabStore *store,
                                 const char *task,
                                 uint8_t template_,
                                 size_t layer,
                                 float *out,
                                 size_t cap,
                                 size_t *out_len);

/**
 * Pearson correlation with its two-sided p-value.
 */
enum FvlabStatus fvlab_pearson(const double *xs, const double *ys, size_t n, double *r, double *p);

/**
 * Welch two-sample t-test, two-sided.
 */
enum FvlabStatus fvlab_welch(const double *a,
                             size_t n_a,
                             const double *b,
                             size_t n_b,
                             double *t,
                             double *p);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FVLAB_H */
