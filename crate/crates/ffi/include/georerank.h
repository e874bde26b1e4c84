#ifndef GEORERANK_H
#define GEORERANK_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GrStatus {
  GR_STATUS_OK = 0,
  GR_STATUS_NULL_ARGUMENT = 1,
  GR_STATUS_INVALID_UTF8 = 2,
  GR_STATUS_IO = 3,
  GR_STATUS_DATA = 4,
  GR_STATUS_CONFIG = 5,
  GR_STATUS_EMPTY = 6,
  GR_STATUS_PANIC = 7,
} GrStatus;

/**
 * A loaded set of candidate lists.
 */
typedef struct GrDataset GrDataset;

/**
 * Rerank output for a dataset.
 */
typedef struct GrResults GrResults;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer is
 * valid until the next library call on the same thread.
 */
const char *gr_last_error_message(void);

/**
 * Loads and validates a candidate-list file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum GrStatus gr_dataset_load(const char *path, struct GrDataset **out);

/**
 * Builds a synthetic dataset with the ground truth at a random position.
 *
 * # Safety
 * `out` must be writable.
 */
enum GrStatus gr_dataset_synthetic(size_t n_queries,
                                   size_t k,
                                   uint64_t seed,
                                   struct GrDataset **out);

/**
 * Number of queries; 0 for NULL.
 *
 * # Safety
 * `dataset` must be NULL or a live handle.
 */
size_t gr_dataset_len(const struct GrDataset *dataset);

/**
 * # Safety
 * `dataset` must be NULL or a handle not yet freed.
 */
void gr_dataset_free(struct GrDataset *dataset);

/**
 * Pairwise merge-sort rerank against the simulated oracle judge.
 *
 * # Safety
 * `dataset` must be a live handle; `out` must be writable.
 */
enum GrStatus gr_rerank_oracle(const struct GrDataset *dataset,
                               double flip_probability,
                               uint64_t seed,
                               bool per_call_noise,
                               size_t workers,
                               struct GrResults **out);

/**
 * Pointwise rerank with synthetic scores. `strategy` is one of `direct`,
 * `likert`, `yesno`, `reason_yesno`; `regime` is `constant`, `separated` or
 * `overlapping`.
 *
 * # Safety
 * String arguments must be NUL-terminated; `dataset` must be a live handle;
 * `out` must be writable.
 */
enum GrStatus gr_rerank_synthetic(const struct GrDataset *dataset,
                                  const char *strategy,
                                  const char *regime,
                                  uint64_t seed,
                                  size_t workers,
                                  struct GrResults **out);

/**
 * Number of per-query results; 0 for NULL.
 *
 * # Safety
 * `results` must be NULL or a live handle.
 */
size_t gr_results_len(const struct GrResults *results);

/**
 * Total comparator calls across all queries; 0 for NULL.
 *
 * # Safety
 * `results` must be NULL or a live handle.
 */
uint64_t gr_results_comparator_calls(const struct GrResults *results);

/**
 * Writes results as JSON lines.
 *
 * # Safety
 * `results` must be a live handle; `path` must be NUL-terminated.
 */
enum GrStatus gr_results_save(const struct GrResults *results, const char *path);

/**
 * # Safety
 * `results` must be NULL or a handle not yet freed.
 */
void gr_results_free(struct GrResults *results);

/**
 * Recall@k in percent of `results` against the ground truth in `dataset`.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum GrStatus gr_recall_at_k(const struct GrResults *results,
                             const struct GrDataset *dataset,
                             size_t k,
                             double *out);

/**
 * Expected rating from the probabilities of labels "1".."5".
 *
 * # Safety
 * `probs` must point to 5 readable doubles; `out` must be writable.
 */
enum GrStatus gr_expected_likert(const double *probs, double *out);

/**
 * `yes / (yes + no)`.
 *
 * # Safety
 * `out` must be writable.
 */
enum GrStatus gr_yes_probability(double yes, double no, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GEORERANK_H */
