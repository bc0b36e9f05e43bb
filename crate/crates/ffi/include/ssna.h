#ifndef SSNA_H
#define SSNA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SsnaStatus {
  SSNA_STATUS_OK = 0,
  SSNA_STATUS_NULL_POINTER = 1,
  SSNA_STATUS_INVALID_ARGUMENT = 2,
  SSNA_STATUS_NOT_FOUND = 3,
  SSNA_STATUS_IO = 4,
  SSNA_STATUS_CONFIG = 5,
  SSNA_STATUS_DATA = 6,
  SSNA_STATUS_NUMERIC = 7,
  SSNA_STATUS_PANIC = 8,
} SsnaStatus;

/**
 * Trained network with its adapted catalog. Independent of the store it
 * was opened with.
 */
typedef struct SsnaModel SsnaModel;

/**
 * Embedding file loaded in memory.
 */
typedef struct SsnaStore SsnaStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static NUL-terminated string.
 */
const char *ssna_version(void);

/**
 * Message of the last failed call on this thread, or an empty string.
 * Valid until the next call into the library on the same thread.
 */
const char *ssna_last_error(void);

/**
 * Opens an SSNAEMB1 embedding file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `store` a writable pointer.
 */
enum SsnaStatus ssna_store_open(const char *path, struct SsnaStore **store);

/**
 * # Safety
 * `store` must come from [`ssna_store_open`] and not be used afterwards.
 * NULL is ignored.
 */
void ssna_store_free(struct SsnaStore *store);

/**
 * Item count, stored layer count and embedding width.
 *
 * # Safety
 * `store` must be a live handle; the outputs must be writable.
 */
enum SsnaStatus ssna_store_dims(const struct SsnaStore *store,
                                size_t *items,
                                size_t *layers,
                                size_t *d_llm);

/**
 * Row of an item id. Returns `SSNA_STATUS_NOT_FOUND` for unknown ids.
 *
 * # Safety
 * `store` must be a live handle, `id` NUL-terminated, `row` writable.
 */
enum SsnaStatus ssna_store_row(const struct SsnaStore *store, const char *id, size_t *row);

/**
 * Copies the stored vector of `row` at `layer` (0 = top) into `buf`,
 * which must hold exactly `d_llm` floats.
 *
 * # Safety
 * `store` must be a live handle and `buf` valid for `len` writes.
 */
enum SsnaStatus ssna_store_vector(const struct SsnaStore *store,
                                  size_t row,
                                  size_t layer,
                                  float *buf,
                                  size_t len);

/**
 * Loads a checkpoint and adapts every item of `store`. The store may be
 * freed afterwards.
 *
 * # Safety
 * `path` must be NUL-terminated, `store` a live handle, `model` writable.
 */
enum SsnaStatus ssna_model_open(const char *path,
                                const struct SsnaStore *store,
                                struct SsnaModel **model);

/**
 * # Safety
 * `model` must come from [`ssna_model_open`] and not be used afterwards.
 * NULL is ignored.
 */
void ssna_model_free(struct SsnaModel *model);

/**
 * Catalog size and adapted embedding width.
 *
 * # Safety
 * `model` must be a live handle; the outputs must be writable.
 */
enum SsnaStatus ssna_model_dims(const struct SsnaModel *model, size_t *items, size_t *dim);

/**
 * Copies the adapted embedding of `row` into `buf` of exactly `dim` values.
 *
 * # Safety
 * `model` must be a live handle and `buf` valid for `len` writes.
 */
enum SsnaStatus ssna_model_item_embedding(const struct SsnaModel *model,
                                          size_t row,
                                          double *buf,
                                          size_t len);

/**
 * Top-`k` items for a chronological history of item rows.
 *
 * Only the most recent items within the encoder's window are used. With
 * `exclude_history` the history items are never returned. Writes up to `k`
 * rows (and cosine scores, when `scores` is not NULL) and stores the
 * number written in `written`.
 *
 * # Safety
 * `model` must be a live handle, `history` valid for `history_len` reads,
 * `rows` (and `scores` unless NULL) valid for `k` writes, `written` writable.
 */
enum SsnaStatus ssna_model_recommend(const struct SsnaModel *model,
                                     const size_t *history,
                                     size_t history_len,
                                     size_t k,
                                     bool exclude_history,
                                     size_t *rows,
                                     double *scores,
                                     size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SSNA_H */
