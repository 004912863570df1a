#ifndef DPOK_H
#define DPOK_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum DpokStatus {
  DPOK_STATUS_OK = 0,
  DPOK_STATUS_NULL_POINTER = 1,
  DPOK_STATUS_INVALID_ARGUMENT = 2,
  DPOK_STATUS_IO = 3,
  DPOK_STATUS_FORMAT = 4,
  DPOK_STATUS_NUMERIC = 5,
  DPOK_STATUS_PRECONDITION = 6,
  DPOK_STATUS_DIVERGED = 7,
  DPOK_STATUS_INTERNAL = 8,
} DpokStatus;

/**
 * Frozen denoiser parameters.
 */
typedef struct DpokModel DpokModel;

/**
 * Reward scenario handle.
 */
typedef struct DpokScenario DpokScenario;

/**
 * Noise schedule handle.
 */
typedef struct DpokSchedule DpokSchedule;

/**
 * Aggregate evaluation metrics.
 */
typedef struct DpokMetrics {
  double mean_reward;
  double reward_se;
  double mean_quality;
  double kl_to_pretrained;
  double target_mass;
} DpokMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *dpok_version(void);

/**
 * Message describing the last failure on this thread, or NULL if none.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *dpok_last_error(void);

/**
 * Linear β schedule from `beta_min` to `beta_max` over `horizon` steps.
 * `posterior_variance` selects the posterior variance as the reverse
 * variance; otherwise β_t is used.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for a handle.
 */
enum DpokStatus dpok_schedule_new(size_t horizon,
                                  double beta_min,
                                  double beta_max,
                                  bool posterior_variance,
                                  struct DpokSchedule **out);

/**
 * The default schedule (50 steps, β from 1e-3 to 0.2, posterior variance).
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for a handle.
 */
enum DpokStatus dpok_schedule_default(struct DpokSchedule **out);

/**
 * Number of steps, or 0 for a null handle.
 *
 * # Safety
 * `schedule` must be null or a live handle.
 */
size_t dpok_schedule_horizon(const struct DpokSchedule *schedule);

/**
 * # Safety
 * `schedule` must be null or a handle not yet freed.
 */
void dpok_schedule_free(struct DpokSchedule *schedule);

/**
 * One of the built-in scenarios: color, composition, counting, location,
 * multi, biased.
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out` must be writable.
 */
enum DpokStatus dpok_scenario_by_name(const char *name, struct DpokScenario **out);

/**
 * Sample dimension, or 0 for a null handle.
 *
 * # Safety
 * `scenario` must be null or a live handle.
 */
size_t dpok_scenario_dim(const struct DpokScenario *scenario);

/**
 * Number of prompts, or 0 for a null handle.
 *
 * # Safety
 * `scenario` must be null or a live handle.
 */
size_t dpok_scenario_prompt_count(const struct DpokScenario *scenario);

/**
 * Reward of the sample `x0[0..dim]` under `prompt`.
 *
 * # Safety
 * `x0` must point to `dim` doubles; `out` must be writable.
 */
enum DpokStatus dpok_scenario_reward(const struct DpokScenario *scenario,
                                     const double *x0,
                                     size_t dim,
                                     size_t prompt,
                                     double *out);

/**
 * # Safety
 * `scenario` must be null or a handle not yet freed.
 */
void dpok_scenario_free(struct DpokScenario *scenario);

/**
 * Trains the default network on the scenario's data for `steps` minibatch
 * steps.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum DpokStatus dpok_model_pretrain(const struct DpokSchedule *schedule,
                                    const struct DpokScenario *scenario,
                                    size_t steps,
                                    uint64_t seed,
                                    struct DpokModel **out);

/**
 * Loads a checkpoint. When `out_schedule` is non-null and the checkpoint
 * records its schedule, a schedule handle is written there too (NULL
 * otherwise).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable;
 * `out_schedule` may be null.
 */
enum DpokStatus dpok_model_load(const char *path,
                                struct DpokModel **out,
                                struct DpokSchedule **out_schedule);

/**
 * Writes a checkpoint; `schedule` may be null.
 *
 * # Safety
 * `model` must be live; `path` must be a NUL-terminated string.
 */
enum DpokStatus dpok_model_save(const struct DpokModel *model,
                                const struct DpokSchedule *schedule,
                                const char *path);

/**
 * Number of parameters, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t dpok_model_num_params(const struct DpokModel *model);

/**
 * Sample dimension, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t dpok_model_dim(const struct DpokModel *model);

/**
 * Draws one sample for `prompt` into `out_x0[0..dim]`.
 *
 * # Safety
 * Handles must be live; `out_x0` must have room for `dim` doubles.
 */
enum DpokStatus dpok_model_sample(const struct DpokModel *model,
                                  const struct DpokSchedule *schedule,
                                  size_t prompt,
                                  uint64_t seed,
                                  double *out_x0,
                                  size_t dim);

/**
 * Monte Carlo evaluation over `n` rollouts. KL is measured against
 * `anchor`, or against the model itself when `anchor` is null.
 *
 * # Safety
 * Handles must be live (`anchor` may be null); `out` must be writable.
 */
enum DpokStatus dpok_model_evaluate(const struct DpokModel *model,
                                    const struct DpokModel *anchor,
                                    const struct DpokSchedule *schedule,
                                    const struct DpokScenario *scenario,
                                    size_t n,
                                    uint64_t seed,
                                    struct DpokMetrics *out);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void dpok_model_free(struct DpokModel *model);

/**
 * Runs the experiment described by a JSON config file, writing its
 * artifacts to the configured output directory.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string.
 */
enum DpokStatus dpok_run_config(const char *config_path);

/**
 * Runs the numerical verification suite; `out_passed` receives whether
 * every check passed.
 *
 * # Safety
 * `out_passed` must be writable.
 */
enum DpokStatus dpok_verify(uint64_t seed, bool *out_passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DPOK_H */
