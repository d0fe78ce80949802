/* Exercises the C interface from C. */
#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "tedm/tedm.h"

static int failures = 0;

#define EXPECT(cond)                                                   \
  do {                                                                 \
    if (!(cond)) {                                                     \
      fprintf(stderr, "%s:%d: expectation failed: %s\n", __FILE__, __LINE__, #cond); \
      ++failures;                                                      \
    }                                                                  \
  } while (0)

static int log_calls = 0;
static void count_log(const char* line, void* user) {
  (void)line;
  (void)user;
  ++log_calls;
}

static void test_config(void) {
  tedm_config* cfg = NULL;
  EXPECT(tedm_config_default(&cfg) == TEDM_OK);
  EXPECT(tedm_config_set(cfg, "heads.kinds", "tedm,ledm") == TEDM_OK);
  char buf[64];
  size_t needed = 0;
  EXPECT(tedm_config_get(cfg, "heads.kinds", buf, sizeof buf, &needed) == TEDM_OK);
  EXPECT(strcmp(buf, "tedm,ledm") == 0);
  EXPECT(needed == strlen("tedm,ledm") + 1);
  EXPECT(tedm_config_get(cfg, "heads.kinds", NULL, 0, &needed) == TEDM_OK);
  EXPECT(tedm_config_get(cfg, "heads.kinds", buf, 3, &needed) == TEDM_RANGE_ERROR);

  EXPECT(tedm_config_set(cfg, "heads.no_such_key", "1") == TEDM_CONFIG_ERROR);
  EXPECT(strstr(tedm_last_error(), "no_such_key") != NULL);
  EXPECT(tedm_config_set(cfg, "heads.kinds", "") == TEDM_OK);
  EXPECT(tedm_config_validate(cfg) == TEDM_CONFIG_ERROR);
  EXPECT(tedm_config_set(NULL, "seed", "1") == TEDM_INVALID_ARGUMENT);

  size_t len = 0;
  EXPECT(tedm_config_canonical(cfg, NULL, 0, &len) == TEDM_OK);
  char* text = malloc(len);
  EXPECT(tedm_config_canonical(cfg, text, len, &len) == TEDM_OK);
  tedm_config* copy = NULL;
  EXPECT(tedm_config_parse(text, &copy) == TEDM_OK);
  free(text);
  tedm_config_free(copy);

  tedm_config* missing = NULL;
  EXPECT(tedm_config_load("/nonexistent/x.cfg", &missing) == TEDM_CONFIG_ERROR);
  EXPECT(missing == NULL);
  tedm_config_free(cfg);
  tedm_config_free(NULL);
}

static void test_numerics(void) {
  tedm_schedule* s = NULL;
  EXPECT(tedm_schedule_linear(1000, 1e-4, 0.02, &s) == TEDM_OK);
  double ab = 0;
  EXPECT(tedm_schedule_alpha_bar(s, 50, &ab) == TEDM_OK);
  EXPECT(fabs(ab - 0.97101572293944016) < 1e-12);
  EXPECT(tedm_schedule_alpha_bar(s, 0, &ab) == TEDM_INVALID_TIMESTEP);
  EXPECT(tedm_schedule_alpha_bar(s, 1001, &ab) == TEDM_INVALID_TIMESTEP);
  tedm_schedule_free(s);
  EXPECT(tedm_schedule_linear(10, 0.5, 0.1, &s) == TEDM_INVALID_SCHEDULE);

  const uint8_t a[8] = {1, 1, 1, 1, 0, 0, 0, 0};
  const uint8_t b[8] = {0, 0, 1, 1, 1, 1, 0, 0};
  double d = 0, p = 0, r = 0;
  EXPECT(tedm_dice(a, b, 2, 4, &d) == TEDM_OK);
  EXPECT(d == 0.5);
  EXPECT(tedm_precision_recall(a, b, 2, 4, &p, &r) == TEDM_OK);
  EXPECT(p == 0.5 && r == 0.5);

  const double x[5] = {1, 2, 3, 4, 5}, zero[5] = {0, 0, 0, 0, 0};
  int sig = -1;
  EXPECT(tedm_wilcoxon(x, zero, 5, 0.05, &p, &sig) == TEDM_OK);
  EXPECT(fabs(p - 0.0625) < 1e-15);
  EXPECT(sig == 0);
  EXPECT(tedm_wilcoxon(x, zero, 0, 0.05, &p, &sig) == TEDM_SHAPE_ERROR);

  const double pv[3] = {0.01, 0.5, 0.2};
  double adj[3];
  EXPECT(tedm_bonferroni(pv, 3, 5, adj) == TEDM_OK);
  EXPECT(fabs(adj[0] - 0.05) < 1e-15 && adj[1] == 1.0 && adj[2] == 1.0);
  const double bad[1] = {1.5};
  EXPECT(tedm_bonferroni(bad, 1, 2, adj) == TEDM_RANGE_ERROR);
}

static void test_cost(void) {
  tedm_config* cfg = NULL;
  tedm_config_default(&cfg);
  tedm_cost c;
  EXPECT(tedm_estimate_cost(cfg, "supervised", &c) == TEDM_OK);
  EXPECT(c.total_macs == c.denoiser_macs);
  EXPECT(c.denoiser_forwards == 1);
  EXPECT(tedm_estimate_cost(cfg, "tedm", &c) == TEDM_OK);
  EXPECT(c.denoiser_forwards == 8);
  EXPECT(c.mlp_input == 120);
  EXPECT(tedm_estimate_cost(cfg, "unet", &c) == TEDM_CONFIG_ERROR);
  tedm_config_free(cfg);
}

static void test_run(const char* dir) {
  EXPECT(strcmp(tedm_stage_name(TEDM_STAGE_TRAIN_HEAD), "train-head") == 0);
  EXPECT(tedm_stage_name(7) == NULL);
  EXPECT(strcmp(tedm_status_name(TEDM_STAGE_ERROR), "StageError") == 0);

  tedm_config* cfg = NULL;
  EXPECT(tedm_config_parse("data.height = 16\ndata.width = 16\ndata.unlabeled = 4\ndata.labeled_pool = 2\n"
                           "data.test = 2\ndenoiser.widths = 4,8\ndenoiser.mid_width = 8\ndenoiser.time_dim = 8\n"
                           "heads.sizes = 1\npretrain.steps = 4\npretrain.learning_rate = 1e30\n",
                           &cfg) == TEDM_OK);
  int failed = 42;
  EXPECT(tedm_run(cfg, dir, 9, NULL, NULL, &failed) == TEDM_INVALID_ARGUMENT);
  EXPECT(failed == -1);
  EXPECT(tedm_run(cfg, dir, TEDM_STAGE_REPORT, count_log, NULL, &failed) == TEDM_STAGE_ERROR);
  EXPECT(failed == TEDM_STAGE_PRETRAIN);
  EXPECT(strncmp(tedm_last_error(), "pretrain: ", 10) == 0);
  EXPECT(log_calls > 0);

  EXPECT(tedm_config_set(cfg, "pretrain.learning_rate", "1e-3") == TEDM_OK);
  EXPECT(tedm_run(cfg, dir, TEDM_STAGE_PRETRAIN, NULL, NULL, &failed) == TEDM_OK);
  EXPECT(failed == -1);
  tedm_config_free(cfg);
}

int main(int argc, char** argv) {
  test_config();
  test_numerics();
  test_cost();
  test_run(argc > 1 ? argv[1] : "capi_run");
  if (failures) {
    fprintf(stderr, "%d expectation(s) failed\n", failures);
    return 1;
  }
  printf("C API: all expectations passed\n");
  return 0;
}
