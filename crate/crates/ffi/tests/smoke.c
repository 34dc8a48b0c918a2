#include <math.h>
#include <stdio.h>
#include <string.h>

#include "grpo_lab.h"

#define CHECK(cond)                                                  \
  do {                                                               \
    if (!(cond)) {                                                   \
      fprintf(stderr, "%s:%d: %s (%s)\n", __FILE__, __LINE__, #cond, \
              grpo_last_error_message());                            \
      return 1;                                                      \
    }                                                                \
  } while (0)

int main(void) {
  double rewards[4] = {1.0, 0.0, 0.0, 0.0};
  double adv[4];
  CHECK(grpo_group_normalize(rewards, 4, 0.0, adv) == GRPO_STATUS_OK);
  CHECK(fabs(adv[0] - sqrt(3.0)) < 1e-12);

  double lim;
  CHECK(grpo_advantage_limit(1.0, 0.5, GRPO_LIMIT_MODE_PAIRWISE, &lim) == GRPO_STATUS_OK);
  CHECK(lim == 0.5);
  CHECK(grpo_advantage_limit(1.0, 1.5, GRPO_LIMIT_MODE_LARGE_GROUP, &lim) == GRPO_STATUS_INVALID_ARGUMENT);
  CHECK(strlen(grpo_last_error_message()) > 0);

  GrpoTask *task = NULL;
  GrpoPolicy *policy = NULL;
  CHECK(grpo_task_new_kofv(8, 2, 2, 4, &task) == GRPO_STATUS_OK);
  CHECK(grpo_policy_new_uniform(4, 2, 8, &policy) == GRPO_STATUS_OK);
  double p;
  CHECK(grpo_mean_success_probability(task, policy, &p) == GRPO_STATUS_OK);
  CHECK(fabs(p - 1.0 / 16.0) < 1e-15);

  const char *config =
      "[task]\nfamily = kofv\nvocab_size = 4\nk = 1\nnum_prompts = 2\n"
      "[trainer]\nprompts_per_step = 2\ngroup_size = 2\nepochs = 3\n"
      "[objective]\nkind = two_grpo\n";
  GrpoRun *run = NULL;
  CHECK(grpo_run_train(config, &run) == GRPO_STATUS_OK);
  CHECK(grpo_run_num_steps(run) == 3);
  CHECK(grpo_run_total_rollouts(run) == 12);
  GrpoStepMetrics m;
  CHECK(grpo_run_step_metrics(run, 2, &m) == GRPO_STATUS_OK);
  CHECK(m.step == 3 && m.cumulative_rollouts == 12);

  grpo_run_free(run);
  grpo_policy_free(policy);
  grpo_task_free(task);
  printf("ok %s\n", grpo_version());
  return 0;
}
