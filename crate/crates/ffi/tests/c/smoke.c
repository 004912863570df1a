#include <stdio.h>
#include <string.h>

#include "dpok.h"

#define CHECK(call)                                                              \
  do {                                                                           \
    DpokStatus status_ = (call);                                                 \
    if (status_ != DPOK_STATUS_OK) {                                             \
      fprintf(stderr, "%s failed (%d): %s\n", #call, (int)status_,               \
              dpok_last_error() ? dpok_last_error() : "?");                      \
      return 1;                                                                  \
    }                                                                            \
  } while (0)

int main(int argc, char **argv) {
  if (argc < 2) {
    fprintf(stderr, "usage: smoke <checkpoint path>\n");
    return 2;
  }
  DpokSchedule *schedule = NULL;
  DpokScenario *scenario = NULL;
  DpokModel *model = NULL;
  DpokModel *loaded = NULL;
  DpokSchedule *loaded_schedule = NULL;

  if (dpok_scenario_by_name("no-such-scenario", &scenario) != DPOK_STATUS_INVALID_ARGUMENT ||
      dpok_last_error() == NULL) {
    fprintf(stderr, "unknown scenario not rejected\n");
    return 1;
  }
  CHECK(dpok_schedule_new(10, 1e-3, 0.2, true, &schedule));
  CHECK(dpok_scenario_by_name("color", &scenario));
  size_t dim = dpok_scenario_dim(scenario);
  if (dim != 2 || dpok_schedule_horizon(schedule) != 10) {
    fprintf(stderr, "unexpected shapes\n");
    return 1;
  }

  double target[2] = {-1.039230, -0.6};
  double reward = 0.0;
  CHECK(dpok_scenario_reward(scenario, target, dim, 0, &reward));
  if (reward < 0.999) {
    fprintf(stderr, "reward at the target should be ~1, got %f\n", reward);
    return 1;
  }

  CHECK(dpok_model_pretrain(schedule, scenario, 50, 1, &model));
  double x0[2];
  CHECK(dpok_model_sample(model, schedule, 0, 7, x0, dim));

  DpokMetrics metrics;
  CHECK(dpok_model_evaluate(model, NULL, schedule, scenario, 64, 0, &metrics));
  if (metrics.kl_to_pretrained != 0.0) {
    fprintf(stderr, "self KL should be zero\n");
    return 1;
  }

  CHECK(dpok_model_save(model, schedule, argv[1]));
  CHECK(dpok_model_load(argv[1], &loaded, &loaded_schedule));
  if (loaded_schedule == NULL || dpok_model_num_params(loaded) != dpok_model_num_params(model)) {
    fprintf(stderr, "checkpoint round trip lost data\n");
    return 1;
  }
  double again[2];
  CHECK(dpok_model_sample(loaded, loaded_schedule, 0, 7, again, dim));
  if (memcmp(x0, again, sizeof x0) != 0) {
    fprintf(stderr, "reloaded model samples differently\n");
    return 1;
  }

  dpok_model_free(loaded);
  dpok_schedule_free(loaded_schedule);
  dpok_model_free(model);
  dpok_scenario_free(scenario);
  dpok_schedule_free(schedule);
  printf("ok %s reward=%.6f x0=(%.4f, %.4f)\n", dpok_version(), reward, x0[0], x0[1]);
  return 0;
}
