#ifndef GRPO_LAB_H
#define GRPO_LAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Limit evaluated by [`grpo_advantage_limit`].
 */
typedef enum GrpoLimitMode {
  GRPO_LIMIT_MODE_LARGE_GROUP = 0,
  GRPO_LIMIT_MODE_PAIRWISE = 1,
} GrpoLimitMode;

/**
 * Result code of every fallible call.
 */
typedef enum GrpoStatus {
  GRPO_STATUS_OK = 0,
  GRPO_STATUS_INVALID_ARGUMENT = 1,
  GRPO_STATUS_DIMENSION_MISMATCH = 2,
  GRPO_STATUS_UNSUPPORTED = 3,
  GRPO_STATUS_NON_FINITE = 4,
  GRPO_STATUS_CONFIG = 5,
  GRPO_STATUS_IO = 6,
  GRPO_STATUS_NULL_POINTER = 7,
  GRPO_STATUS_PANIC = 8,
} GrpoStatus;

/**
 * Softmax policy over `(prompt, position, token)` logits.
 */
typedef struct GrpoPolicy GrpoPolicy;

/**
 * Finished training run: per-step metrics and final parameters.
 */
typedef struct GrpoRun GrpoRun;

/**
 * Verifiable-reward task.
 */
typedef struct GrpoTask GrpoTask;

/**
 * Metrics of one training step.
 */
typedef struct GrpoStepMetrics {
  uint64_t step;
  uint64_t epoch;
  double mean_reward;
  double p_hat_mean;
  double degenerate_fraction;
  double grad_norm;
  double lr;
  uint64_t cumulative_rollouts;
  double exact_success;
} GrpoStepMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *grpo_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *grpo_version(void);

/**
 * Normalizes `len` rewards into `out` (also of length `len`).
 *
 * # Safety
 * `rewards` and `out` must point to `len` valid `double`s.
 */
enum GrpoStatus grpo_group_normalize(const double *rewards, size_t len, double eps, double *out);

/**
 * # Safety
 * `out1` and `out2` must be valid for writes.
 */
enum GrpoStatus grpo_pair_advantage(double r1, double r2, double *out1, double *out2);

/**
 * `mode` is a [`GrpoLimitMode`] value.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum GrpoStatus grpo_advantage_limit(double x, double p, uint32_t mode, double *out);

/**
 * Learning rate for `q` prompts per step given `base_lr` tuned at `q0`;
 * `linear = false` returns `base_lr` unchanged.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum GrpoStatus grpo_lr_for_batch(double base_lr, size_t q0, size_t q, bool linear, double *out);

/**
 * Probability of at least one success in `2m` draws at `schedule[0]`
 * (`p_2m`) and in `m` pairs along the schedule (`p_mx2`).
 *
 * # Safety
 * `schedule` must point to `len` valid `double`s; outputs must be writable.
 */
enum GrpoStatus grpo_hard_question_probabilities(const double *schedule,
                                                 size_t len,
                                                 double *p_2m,
                                                 double *p_mx2);

/**
 * Needle task: one correct sequence per prompt, drawn from `seed`.
 *
 * # Safety
 * `out` must be valid for writes; free the result with [`grpo_task_free`].
 */
enum GrpoStatus grpo_task_new_needle(size_t vocab_size,
                                     size_t seq_len,
                                     size_t num_prompts,
                                     uint64_t seed,
                                     struct GrpoTask **out);

/**
 * k-of-V task: `k` correct tokens at every position.
 *
 * # Safety
 * `out` must be valid for writes; free the result with [`grpo_task_free`].
 */
enum GrpoStatus grpo_task_new_kofv(size_t vocab_size,
                                   size_t seq_len,
                                   size_t k,
                                   size_t num_prompts,
                                   struct GrpoTask **out);

/**
 * # Safety
 * `task` must be null or a handle from a `grpo_task_new_*` call that has
 * not been freed.
 */
void grpo_task_free(struct GrpoTask *task);

/**
 * # Safety
 * `out` must be valid for writes; free the result with [`grpo_policy_free`].
 */
enum GrpoStatus grpo_policy_new_uniform(size_t num_prompts,
                                        size_t seq_len,
                                        size_t vocab_size,
                                        struct GrpoPolicy **out);

/**
 * Copies `len = num_prompts * seq_len * vocab_size` logits laid out as
 * `[prompt][position][token]`.
 *
 * # Safety
 * `logits` must point to `len` valid `double`s and `out` be writable.
 */
enum GrpoStatus grpo_policy_from_logits(size_t num_prompts,
                                        size_t seq_len,
                                        size_t vocab_size,
                                        const double *logits,
                                        size_t len,
                                        struct GrpoPolicy **out);

/**
 * # Safety
 * `policy` must be null or a live policy handle.
 */
void grpo_policy_free(struct GrpoPolicy *policy);

/**
 * Number of logits, or 0 for a null handle.
 *
 * # Safety
 * `policy` must be null or a live policy handle.
 */
size_t grpo_policy_dim(const struct GrpoPolicy *policy);

/**
 * Copies the logits into `out`, which must hold exactly `dim` values.
 *
 * # Safety
 * `policy` must be a live handle and `out` point to `len` writable `double`s.
 */
enum GrpoStatus grpo_policy_logits(const struct GrpoPolicy *policy, double *out, size_t len);

/**
 * Exact probability that one rollout on `prompt` is correct.
 *
 * # Safety
 * Handles must be live and `out` writable.
 */
enum GrpoStatus grpo_success_probability(const struct GrpoTask *task,
                                         const struct GrpoPolicy *policy,
                                         size_t prompt,
                                         double *out);

/**
 * Exact success probability averaged over prompts.
 *
 * # Safety
 * Handles must be live and `out` writable.
 */
enum GrpoStatus grpo_mean_success_probability(const struct GrpoTask *task,
                                              const struct GrpoPolicy *policy,
                                              double *out);

/**
 * Trains the configuration given as INI text (the format of the command
 * line tool's `--config` files). Nothing is written to disk.
 *
 * # Safety
 * `config_text` must be a NUL-terminated UTF-8 string and `out` writable;
 * free the result with [`grpo_run_free`].
 */
enum GrpoStatus grpo_run_train(const char *config_text, struct GrpoRun **out);

/**
 * # Safety
 * `run` must be null or a live run handle.
 */
void grpo_run_free(struct GrpoRun *run);

/**
 * Number of recorded steps, or 0 for a null handle.
 *
 * # Safety
 * `run` must be null or a live run handle.
 */
size_t grpo_run_num_steps(const struct GrpoRun *run);

/**
 * Total rollouts generated, or 0 for a null handle.
 *
 * # Safety
 * `run` must be null or a live run handle.
 */
uint64_t grpo_run_total_rollouts(const struct GrpoRun *run);

/**
 * Metrics of step `index` (0-based).
 *
 * # Safety
 * `run` must be a live handle and `out` writable.
 */
enum GrpoStatus grpo_run_step_metrics(const struct GrpoRun *run,
                                      size_t index,
                                      struct GrpoStepMetrics *out);

/**
 * Copies the final parameters into a new policy handle.
 *
 * # Safety
 * `run` must be a live handle and `out` writable; free the result with
 * [`grpo_policy_free`].
 */
enum GrpoStatus grpo_run_policy(const struct GrpoRun *run, struct GrpoPolicy **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRPO_LAB_H */
