#ifndef ENERGYSCAPE_H
#define ENERGYSCAPE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum EsStatus {
  ES_STATUS_OK = 0,
  ES_STATUS_NULL_POINTER = 1,
  ES_STATUS_INVALID_ARGUMENT = 2,
  /**
   * More units than exact enumeration supports.
   */
  ES_STATUS_CAPACITY = 3,
  /**
   * Constant columns, degenerate moments or empty samples.
   */
  ES_STATUS_DEGENERATE = 4,
  /**
   * The fit stopped before converging; the partial model is still returned.
   */
  ES_STATUS_NON_CONVERGENCE = 5,
  ES_STATUS_RANGE = 6,
  ES_STATUS_INTERNAL = 99,
} EsStatus;

/**
 * Opaque fitted or user-built pairwise model.
 */
typedef struct EsMemModel EsMemModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *es_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *es_version(void);

/**
 * Build a model from fields `h[n_units]` and upper-triangle couplings
 * `w_upper[n_units (n_units - 1) / 2]`, row-major over `i < j`.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum EsStatus es_mem_model_new(size_t n_units,
                               const double *h,
                               const double *w_upper,
                               struct EsMemModel **out);

/**
 * Fit a model to row-major binary states `states[n_timepoints * n_units]`
 * (0 or 1) with default settings. On `ES_STATUS_NON_CONVERGENCE` the partial
 * model is still written to `out` and must be freed.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum EsStatus es_mem_fit(const uint8_t *states,
                         size_t n_timepoints,
                         size_t n_units,
                         struct EsMemModel **out);

/**
 * Release a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void es_mem_free(struct EsMemModel *model);

/**
 * Number of units, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t es_mem_n_units(const struct EsMemModel *model);

/**
 * Copy `h[n_units]` and the full symmetric `w[n_units * n_units]`.
 *
 * # Safety
 * `model` must be a live handle; buffers must hold the stated lengths.
 */
enum EsStatus es_mem_params(const struct EsMemModel *model, double *h_out, double *w_out);

/**
 * Energy of the state with bit `i` of `code` giving unit `i`.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum EsStatus es_mem_energy(const struct EsMemModel *model, uint32_t code, double *out);

/**
 * Log partition function.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum EsStatus es_mem_log_partition(const struct EsMemModel *model, double *out);

/**
 * Fit quality of a fitted model. Models built with `es_mem_model_new` have
 * no diagnostics and return `ES_STATUS_INVALID_ARGUMENT`.
 *
 * # Safety
 * `model` must be a live handle; out pointers writable.
 */
enum EsStatus es_mem_fit_quality(const struct EsMemModel *model,
                                 double *moment_correlation,
                                 bool *accepted,
                                 bool *converged);

/**
 * Mean-threshold binarization of row-major `signals[n_timepoints * n_units]`
 * into `states_out` (same shape) and `codes_out[n_timepoints]`; either output
 * may be null.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum EsStatus es_binarize_mean(const double *signals,
                               size_t n_timepoints,
                               size_t n_units,
                               uint8_t *states_out,
                               uint32_t *codes_out);

/**
 * Energy of each state code in `codes[len]`, written to `out[len]`.
 *
 * # Safety
 * `model` must be a live handle; buffers valid for `len`.
 */
enum EsStatus es_energy_series(const struct EsMemModel *model,
                               const uint32_t *codes,
                               size_t len,
                               double *out);

/**
 * Number of entries written by [`es_landscape_features`].
 */
size_t es_feature_len(void);

/**
 * The landscape feature vector of an energy series `values[len]`, written
 * to `out[es_feature_len()]`.
 *
 * # Safety
 * Buffers must be valid for the stated lengths.
 */
enum EsStatus es_landscape_features(const double *values, size_t len, double fraction, double *out);

/**
 * Two-sided Mann-Whitney test; `u_out` is the statistic of sample `a`.
 *
 * # Safety
 * Buffers must be valid for the stated lengths; outputs writable.
 */
enum EsStatus es_mann_whitney(const double *a,
                              size_t n1,
                              const double *b,
                              size_t n2,
                              double *u_out,
                              double *p_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ENERGYSCAPE_H */
