#ifndef UQSIM_H
#define UQSIM_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum UqsimStatus {
  UQSIM_STATUS_OK = 0,
  UQSIM_STATUS_NULL_POINTER = 1,
  UQSIM_STATUS_INVALID_ARGUMENT = 2,
  UQSIM_STATUS_NUMERIC = 3,
  UQSIM_STATUS_TRAINING = 4,
  UQSIM_STATUS_METHOD = 5,
  UQSIM_STATUS_CONFIG = 6,
  UQSIM_STATUS_REPORT = 7,
  UQSIM_STATUS_PARSE = 8,
  UQSIM_STATUS_IO = 9,
  UQSIM_STATUS_PANIC = 10,
} UqsimStatus;

typedef struct UqsimArtifact UqsimArtifact;

typedef struct UqsimConfig UqsimConfig;

typedef struct UqsimPredictor UqsimPredictor;

/**
 * Grid-averaged metrics of one completed task.
 */
typedef struct UqsimRunMetrics {
  size_t n;
  uint64_t run_seed;
  double mean_aleatoric;
  double mean_epistemic;
  double mean_bias;
  double mean_sigma_distance;
} UqsimRunMetrics;

typedef struct UqsimEstimate {
  double aleatoric;
  double epistemic;
} UqsimEstimate;

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next `uqsim_` call on the same thread.
 */
const char *uqsim_last_error(void);

/**
 * Configuration with every default filled in.
 */
struct UqsimConfig *uqsim_config_default(void);

/**
 * Parses a TOML configuration document.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a writable pointer.
 */
enum UqsimStatus uqsim_config_parse(const char *text, struct UqsimConfig **out);

/**
 * # Safety
 * `cfg` must be null or a handle from this library not yet freed.
 */
void uqsim_config_free(struct UqsimConfig *cfg);

/**
 * Runs the experiment and writes its outputs into `output_dir`. Task
 * failures do not make the call fail; see
 * [`uqsim_artifact_failure_count`].
 *
 * # Safety
 * `cfg` must be a live handle, `output_dir` a NUL-terminated path and
 * `out` writable.
 */
enum UqsimStatus uqsim_run_experiment(const struct UqsimConfig *cfg,
                                      const char *output_dir,
                                      struct UqsimArtifact **out);

/**
 * Number of tasks that completed.
 *
 * # Safety
 * `art` must be null or a live handle.
 */
size_t uqsim_artifact_result_count(const struct UqsimArtifact *art);

/**
 * Number of tasks recorded as failed in the manifest.
 *
 * # Safety
 * `art` must be null or a live handle.
 */
size_t uqsim_artifact_failure_count(const struct UqsimArtifact *art);

/**
 * Method name of completed task `index`; null when out of range. Owned by
 * the artifact.
 *
 * # Safety
 * `art` must be null or a live handle.
 */
const char *uqsim_artifact_method(const struct UqsimArtifact *art, size_t index);

/**
 * # Safety
 * `art` must be a live handle and `out` writable.
 */
enum UqsimStatus uqsim_artifact_metrics(const struct UqsimArtifact *art,
                                        size_t index,
                                        struct UqsimRunMetrics *out);

/**
 * # Safety
 * `art` must be null or a handle from this library not yet freed.
 */
void uqsim_artifact_free(struct UqsimArtifact *art);

/**
 * Checks a run directory; `passed` is false if any file fails.
 *
 * # Safety
 * `dir` must be a NUL-terminated path and `passed` writable.
 */
enum UqsimStatus uqsim_verify_artifact(const char *dir, bool *passed);

/**
 * Fits one method on the training sample of run `run_seed` at size `n`.
 *
 * # Safety
 * `cfg` must be a live handle, `method` a NUL-terminated name and `out`
 * writable.
 */
enum UqsimStatus uqsim_fit_method(const struct UqsimConfig *cfg,
                                  const char *method,
                                  size_t n,
                                  uint64_t run_seed,
                                  struct UqsimPredictor **out);

/**
 * Predictive mean and decomposition at each of `len` inputs. `members`
 * of zero uses the configured count.
 *
 * # Safety
 * `pred` must be a live handle; `xs`, `means` and `estimates` must each
 * hold `len` elements.
 */
enum UqsimStatus uqsim_predictor_evaluate(struct UqsimPredictor *pred,
                                          const double *xs,
                                          size_t len,
                                          size_t members,
                                          double *means,
                                          struct UqsimEstimate *estimates);

/**
 * # Safety
 * `pred` must be null or a handle from this library not yet freed.
 */
void uqsim_predictor_free(struct UqsimPredictor *pred);

/**
 * Law-of-total-variance split of `len` Gaussian members.
 *
 * # Safety
 * `means` and `variances` must hold `len` elements; `out` must be writable.
 */
enum UqsimStatus uqsim_variance_decomposition(const double *means,
                                              const double *variances,
                                              size_t len,
                                              struct UqsimEstimate *out);

/**
 * Closed-form split of a Normal-Inverse-Gamma prediction.
 *
 * # Safety
 * `out` must be writable.
 */
enum UqsimStatus uqsim_der_decomposition(double gamma,
                                         double nu,
                                         double alpha,
                                         double beta,
                                         struct UqsimEstimate *out);

/**
 * Draws `n` training pairs from the synthetic process with the given Beta
 * input law.
 *
 * # Safety
 * `xs` and `ys` must each have room for `n` values.
 */
enum UqsimStatus uqsim_generate_dataset(double beta_alpha,
                                        double beta_beta,
                                        size_t n,
                                        uint64_t seed,
                                        double *xs,
                                        double *ys);

#endif  /* UQSIM_H */
