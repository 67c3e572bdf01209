#ifndef ATTNLOC_H
#define ATTNLOC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AttnlocStatus {
  ATTNLOC_STATUS_OK = 0,
  ATTNLOC_STATUS_NULL_POINTER = 1,
  ATTNLOC_STATUS_INVALID_ARGUMENT = 2,
  ATTNLOC_STATUS_CONFIG_ERROR = 3,
  ATTNLOC_STATUS_BACKEND_ERROR = 4,
  ATTNLOC_STATUS_DATA_ERROR = 5,
  ATTNLOC_STATUS_BUFFER_TOO_SMALL = 6,
  ATTNLOC_STATUS_PANIC = 7,
} AttnlocStatus;

typedef enum AttnlocHighlight {
  ATTNLOC_HIGHLIGHT_LINE_INDEX = 0,
  ATTNLOC_HIGHLIGHT_MARKER_COMMENT = 1,
} AttnlocHighlight;

typedef enum AttnlocFlatten {
  ATTNLOC_FLATTEN_LAYERWISE = 0,
  ATTNLOC_FLATTEN_AVG_POOL = 1,
} AttnlocFlatten;

/**
 * Attention provider handle.
 */
typedef struct AttnlocBackend AttnlocBackend;

/**
 * Row-major `f64` matrix handle.
 */
typedef struct AttnlocMatrix AttnlocMatrix;

/**
 * Trained classifier handle.
 */
typedef struct AttnlocModel AttnlocModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Owned by the
 * library and valid until the next failing call on the same thread.
 */
const char *attnloc_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *attnloc_version(void);

/**
 * Built-in toy transformer with the given shape.
 */
enum AttnlocStatus attnloc_toy_backend_new(uint64_t seed,
                                           size_t d_model,
                                           size_t num_layers,
                                           size_t num_heads,
                                           struct AttnlocBackend **out);

/**
 * Backend serving attention dumps from `dir`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum AttnlocStatus attnloc_dump_backend_new(const char *dir, struct AttnlocBackend **out);

/**
 * # Safety
 * `backend` must be null or a handle from a `_new` call, freed once.
 */
void attnloc_backend_free(struct AttnlocBackend *backend);

/**
 * # Safety
 * `backend` must be a live handle; the out pointers must be writable.
 */
enum AttnlocStatus attnloc_backend_shape(const struct AttnlocBackend *backend,
                                         size_t *num_layers,
                                         size_t *num_heads);

/**
 * Per-line feature matrix (`loc × feature_len`) for one program.
 *
 * # Safety
 * `backend` must be a live handle, `code` and `language` NUL-terminated,
 * `out` writable.
 */
enum AttnlocStatus attnloc_sample_features(const struct AttnlocBackend *backend,
                                           const char *code,
                                           const char *language,
                                           enum AttnlocHighlight highlight,
                                           enum AttnlocFlatten flatten,
                                           struct AttnlocMatrix **out);

/**
 * Copies `rows × cols` values (row-major) into a new matrix.
 *
 * # Safety
 * `data` must point to `rows * cols` readable doubles; `out` writable.
 */
enum AttnlocStatus attnloc_matrix_new(const double *data,
                                      size_t rows,
                                      size_t cols,
                                      struct AttnlocMatrix **out);

/**
 * # Safety
 * `m` must be null or a live handle.
 */
size_t attnloc_matrix_rows(const struct AttnlocMatrix *m);

/**
 * # Safety
 * `m` must be null or a live handle.
 */
size_t attnloc_matrix_cols(const struct AttnlocMatrix *m);

/**
 * Copies the row-major values into `buf`, which holds `len` doubles.
 *
 * # Safety
 * `m` must be a live handle; `buf` must hold `len` writable doubles.
 */
enum AttnlocStatus attnloc_matrix_copy(const struct AttnlocMatrix *m, double *buf, size_t len);

/**
 * # Safety
 * `m` must be null or a handle from this library, freed once.
 */
void attnloc_matrix_free(struct AttnlocMatrix *m);

/**
 * Loads a model file written by `attnloc train`.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` writable.
 */
enum AttnlocStatus attnloc_model_load(const char *path, struct AttnlocModel **out);

/**
 * Feature dimension the model expects.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t attnloc_model_input_dim(const struct AttnlocModel *model);

/**
 * Per-line probabilities for a feature matrix; writes `rows` values.
 *
 * # Safety
 * Handles must be live; `out` must hold `len` writable doubles.
 */
enum AttnlocStatus attnloc_model_score(const struct AttnlocModel *model,
                                       const struct AttnlocMatrix *features,
                                       double *out,
                                       size_t len);

/**
 * # Safety
 * `model` must be null or a handle from this library, freed once.
 */
void attnloc_model_free(struct AttnlocModel *model);

/**
 * Repeated-output baseline. `lines` concatenates the 1-based lines of all
 * `num_runs` runs; `run_lengths[i]` is the length of run `i`. Writes `loc`
 * scores into `out`.
 *
 * # Safety
 * `lines` must hold `sum(run_lengths)` values, `run_lengths` `num_runs`
 * values and `out` `loc` writable doubles.
 */
enum AttnlocStatus attnloc_baseline_score(const size_t *lines,
                                          const size_t *run_lengths,
                                          size_t num_runs,
                                          size_t loc,
                                          double *out);

/**
 * Harmonic mean of precision and recall, 0 when both are 0.
 */
double attnloc_f1(double precision, double recall);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ATTNLOC_H */
