#ifndef MASKTS_H
#define MASKTS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum {
  MTS_STATUS_OK = 0,
  /**
   * Bad shapes, out-of-range values or degenerate inputs.
   */
  MTS_STATUS_CONTRACT = 1,
  /**
   * Malformed file contents.
   */
  MTS_STATUS_FORMAT = 2,
  MTS_STATUS_IO = 3,
  MTS_STATUS_NULL_POINTER = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  MTS_STATUS_PANIC = 5,
} MtsStatus;

/**
 * Which binned calibration error to compute.
 */
typedef enum {
  /**
   * Expected calibration error of confidences.
   */
  MTS_METRIC_ECE = 0,
  /**
   * Maximum calibration error of confidences.
   */
  MTS_METRIC_MCE = 1,
  /**
   * Static calibration error of positive-class probabilities.
   */
  MTS_METRIC_SCE = 2,
  /**
   * Adaptive calibration error of positive-class probabilities.
   */
  MTS_METRIC_ACE = 3,
} MtsMetric;

/**
 * Opaque calibration model.
 */
typedef struct MtsModel MtsModel;

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *mts_last_error_message(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *mts_version(void);

/**
 * Loads a checkpoint written by `maskts train`.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
MtsStatus mts_model_load(const char *path, MtsModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`mts_model_load`] and not be used afterwards.
 */
void mts_model_free(MtsModel *model);

/**
 * Global temperature stored in the model.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
MtsStatus mts_model_t0(const MtsModel *model, float *out);

/**
 * Calibrates one `height × width` record. `image` and `logits` are inputs;
 * `probability` and `temperature` receive `height · width` values each.
 * `temperature` may be null. Composition with the global temperature on
 * predicted background follows the checkpoint unless `use_mask_ts` is 0.
 *
 * # Safety
 * Array pointers must reference `height · width` valid elements.
 */
MtsStatus mts_model_calibrate(const MtsModel *model,
                              const float *image,
                              const float *logits,
                              size_t height,
                              size_t width,
                              int32_t use_mask_ts,
                              float *probability,
                              float *temperature);

/**
 * Fits a global temperature to `n` logits and 0/1 labels.
 *
 * # Safety
 * `logits` and `labels` must reference `n` elements; `out_t0` must be valid.
 */
MtsStatus mts_fit_temperature(const float *logits, const float *labels, size_t n, float *out_t0);

/**
 * `σ(z / t0)` for `n` logits.
 *
 * # Safety
 * `logits` and `probability` must reference `n` elements.
 */
MtsStatus mts_apply_temperature(const float *logits, size_t n, float t0, float *probability);

/**
 * Computes `metric` in percent over `n` samples with `bins` bins. For ECE
 * and MCE `scores` are confidences and `outcomes` mark correct predictions;
 * for SCE and ACE `scores` are positive-class probabilities and `outcomes`
 * are labels. Nonzero outcome bytes count as true.
 *
 * # Safety
 * `scores` and `outcomes` must reference `n` elements; `out` must be valid.
 */
MtsStatus mts_metric(MtsMetric metric,
                     const float *scores,
                     const uint8_t *outcomes,
                     size_t n,
                     size_t bins,
                     double *out);

#endif  /* MASKTS_H */
