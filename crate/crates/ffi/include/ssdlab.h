#ifndef SSDLAB_H
#define SSDLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes mirroring the CLI exit-code contract.
 */
typedef enum SsdlabStatus {
  SSDLAB_STATUS_OK = 0,
  /**
   * Generic failure; see `ssdlab_last_error`.
   */
  SSDLAB_STATUS_ERROR = 1,
  /**
   * Invalid configuration or malformed input file.
   */
  SSDLAB_STATUS_CONFIG = 2,
  /**
   * Non-finite loss during training.
   */
  SSDLAB_STATUS_NUMERIC = 3,
  /**
   * A required pointer argument was null.
   */
  SSDLAB_STATUS_NULL_ARGUMENT = 4,
  /**
   * A panic was caught at the boundary.
   */
  SSDLAB_STATUS_PANIC = 5,
} SsdlabStatus;

/**
 * Opaque trainer handle.
 */
typedef struct SsdlabTrainer {
  uint8_t _private[0];
} SsdlabTrainer;

/**
 * Per-step scalar metrics.
 */
typedef struct SsdlabStepMetrics {
  uint64_t iteration;
  double total_loss;
  double supervised_loss;
  double unsupervised_loss;
  double consistency_loss;
  size_t n_pseudo_confident;
  size_t n_pseudo_reliable;
  /**
   * 1 while the one-to-many stage is active, 0 afterwards.
   */
  int32_t stage_one_to_many;
} SsdlabStepMetrics;

/**
 * Evaluation summary; absent AP values are NaN.
 */
typedef struct SsdlabEvalReport {
  double map;
  double ap50;
  double ap75;
  double ap_small;
  double ap_medium;
  double ap_large;
  double duplicate_rate;
  size_t n_predictions;
} SsdlabEvalReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message into `buf` (truncated, always
 * NUL-terminated). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must point to `len` writable bytes, or be null (query length).
 */
size_t ssdlab_last_error(char *buf, size_t len);

/**
 * Static version string of the library.
 */
const char *ssdlab_version(void);

/**
 * Generate a synthetic dataset: `n` training images plus a quarter as a
 * test set, written under `out_dir` as `train/` and `test/`.
 *
 * # Safety
 * `spec_json` may be null (defaults); other pointers must be valid
 * NUL-terminated strings.
 */
enum SsdlabStatus ssdlab_generate_dataset(const char *spec_json,
                                          const char *out_dir,
                                          size_t n,
                                          uint64_t seed);

/**
 * Run a full training run from a RunConfig JSON document (the document
 * itself, not a path). Writes the run directory exactly like the CLI and
 * stores the final mAP (NaN when absent) in `out_map` if non-null.
 *
 * # Safety
 * `config_json` must be a valid NUL-terminated string; `out_map` may be
 * null.
 */
enum SsdlabStatus ssdlab_run_training(const char *config_json, double *out_map);

/**
 * Create a step-wise trainer from a RunConfig JSON document. The handle
 * owns its datasets; release it with `ssdlab_trainer_free`.
 *
 * # Safety
 * `config_json` must be a valid NUL-terminated string and `out` a valid
 * pointer to receive the handle.
 */
enum SsdlabStatus ssdlab_trainer_new(const char *config_json, struct SsdlabTrainer **out);

/**
 * Advance the trainer by one optimizer step.
 *
 * # Safety
 * `handle` must come from `ssdlab_trainer_new`; `metrics` may be null.
 */
enum SsdlabStatus ssdlab_trainer_step(struct SsdlabTrainer *handle,
                                      struct SsdlabStepMetrics *metrics);

/**
 * Evaluate the EMA teacher on the held-out test set.
 *
 * # Safety
 * `handle` must come from `ssdlab_trainer_new` and `report` must be a
 * valid pointer.
 */
enum SsdlabStatus ssdlab_trainer_evaluate(struct SsdlabTrainer *handle,
                                          struct SsdlabEvalReport *report);

/**
 * Current iteration counter (steps completed).
 *
 * # Safety
 * `handle` must come from `ssdlab_trainer_new`.
 */
uint64_t ssdlab_trainer_iteration(const struct SsdlabTrainer *handle);

/**
 * Release a trainer handle.
 *
 * # Safety
 * `handle` must come from `ssdlab_trainer_new` and not be used afterward.
 */
void ssdlab_trainer_free(struct SsdlabTrainer *handle);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SSDLAB_H */
