#ifndef SAINT_FFI_H
#define SAINT_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Policy class selector for [`saint_policy_new`].
 */
typedef enum SaintPolicyClass {
  SAINT_POLICY_CLASS_SAINT = 0,
  SAINT_POLICY_CLASS_FACTORIZED = 1,
  SAINT_POLICY_CLASS_AUTOREGRESSIVE = 2,
  SAINT_POLICY_CLASS_FLAT = 3,
} SaintPolicyClass;

typedef enum SaintStatus {
  SAINT_STATUS_OK = 0,
  SAINT_STATUS_NULL_POINTER = 1,
  SAINT_STATUS_INVALID_ARGUMENT = 2,
  SAINT_STATUS_CONFIG = 3,
  SAINT_STATUS_REFUSED = 4,
  SAINT_STATUS_IO = 5,
  SAINT_STATUS_NUMERIC = 6,
  SAINT_STATUS_PARSE = 7,
  SAINT_STATUS_CONTRACT = 8,
  SAINT_STATUS_PANIC = 9,
} SaintStatus;

/**
 * Opaque environment: a built instance plus its running episode.
 */
typedef struct SaintEnv SaintEnv;

/**
 * Opaque policy of any class.
 */
typedef struct SaintPolicyHandle SaintPolicyHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *saint_last_error(void);

/**
 * Builds an environment with `dims` axes of `size` positions. `discount`
 * only affects [`saint_env_oracle`].
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum SaintStatus saint_env_new(size_t dims,
                               size_t size,
                               double pit_fraction,
                               uint64_t seed,
                               double discount,
                               struct SaintEnv **out_env);

/**
 * # Safety
 * `env` must come from [`saint_env_new`] and not be used afterwards.
 */
void saint_env_free(struct SaintEnv *env);

/**
 * Observation width (the number of axes).
 *
 * # Safety
 * `env` must be a live handle or null.
 */
size_t saint_env_state_dim(const struct SaintEnv *env);

/**
 * Number of binary sub-actions per step.
 *
 * # Safety
 * `env` must be a live handle or null.
 */
size_t saint_env_num_sub_actions(const struct SaintEnv *env);

/**
 * Starts a new episode and writes its first observation.
 *
 * # Safety
 * `env` must be a live handle; `obs` must point to `obs_len` doubles.
 */
enum SaintStatus saint_env_reset(struct SaintEnv *env, double *obs, size_t obs_len);

/**
 * Applies one joint action. `done` is set to 1 when the episode ended.
 *
 * # Safety
 * `env` must be a live handle; `action` must point to `action_len`
 * values, `obs` to `obs_len` doubles; `reward` and `done` must be
 * writable.
 */
enum SaintStatus saint_env_step(struct SaintEnv *env,
                                const uint32_t *action,
                                size_t action_len,
                                double *obs,
                                size_t obs_len,
                                double *reward,
                                int32_t *done);

/**
 * Optimal expected return from the start under the environment's
 * discount.
 *
 * # Safety
 * `env` must be a live handle; `value` must be writable.
 */
enum SaintStatus saint_env_oracle(const struct SaintEnv *env, double *value);

/**
 * Creates a policy with default widths for `cardinalities` and
 * `state_dim`. Baselines use a trunk of `hidden` units; SAINT ignores it.
 *
 * # Safety
 * `cardinalities` must point to `n` values; `out_policy` must be
 * writable.
 */
enum SaintStatus saint_policy_new(enum SaintPolicyClass class_,
                                  const uint32_t *cardinalities,
                                  size_t n,
                                  size_t state_dim,
                                  size_t hidden,
                                  uint64_t seed,
                                  struct SaintPolicyHandle **out_policy);

/**
 * Loads a checkpoint written by [`saint_policy_save`] or the CLI.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out_policy` must be writable.
 */
enum SaintStatus saint_policy_load(const char *path, struct SaintPolicyHandle **out_policy);

/**
 * # Safety
 * `policy` must be a live handle; `path` a NUL-terminated string.
 */
enum SaintStatus saint_policy_save(const struct SaintPolicyHandle *policy, const char *path);

/**
 * # Safety
 * `policy` must come from this library and not be used afterwards.
 */
void saint_policy_free(struct SaintPolicyHandle *policy);

/**
 * Number of trainable scalars, 0 for a null handle.
 *
 * # Safety
 * `policy` must be a live handle or null.
 */
size_t saint_policy_num_params(const struct SaintPolicyHandle *policy);

/**
 * # Safety
 * Buffers must hold the stated lengths; `log_prob` must be writable.
 */
enum SaintStatus saint_policy_log_prob(const struct SaintPolicyHandle *policy,
                                       const double *state,
                                       size_t state_len,
                                       const uint32_t *action,
                                       size_t action_len,
                                       double *log_prob);

/**
 * Samples a joint action with a generator seeded by `seed`. `log_prob`
 * may be null.
 *
 * # Safety
 * Buffers must hold the stated lengths.
 */
enum SaintStatus saint_policy_sample(const struct SaintPolicyHandle *policy,
                                     const double *state,
                                     size_t state_len,
                                     uint64_t seed,
                                     uint32_t *action,
                                     size_t action_len,
                                     double *log_prob);

/**
 * # Safety
 * Buffers must hold the stated lengths.
 */
enum SaintStatus saint_policy_greedy(const struct SaintPolicyHandle *policy,
                                     const double *state,
                                     size_t state_len,
                                     uint32_t *action,
                                     size_t action_len);

/**
 * Trains `policy` online on the environment's layout. `train_config`
 * holds `train.key = value` lines (may be null or empty for defaults);
 * `seed` seeds sampling and the critic. Writes the mean return over the
 * last tenth of episodes.
 *
 * # Safety
 * Handles must be live; `train_config` null or NUL-terminated;
 * `final_mean` writable.
 */
enum SaintStatus saint_train(const struct SaintEnv *env,
                             struct SaintPolicyHandle *policy,
                             const char *train_config,
                             uint64_t seed,
                             double *final_mean);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAINT_FFI_H */
