/* C interface to the tedm library.
 *
 * Every function returns a status code (TEDM_OK on success). On failure the
 * message is available from tedm_last_error() on the calling thread until the
 * next failing call there. Handles are opaque and freed with the matching
 * *_free function; freeing NULL is a no-op.
 */
#ifndef TEDM_TEDM_H
#define TEDM_TEDM_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define TEDM_API __declspec(dllexport)
#else
#define TEDM_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

enum tedm_status {
  TEDM_OK = 0,
  TEDM_INVALID_SCHEDULE = 1,
  TEDM_SHAPE_ERROR = 2,
  TEDM_INVALID_TIMESTEP = 3,
  TEDM_EMPTY_DATASET = 4,
  TEDM_DIVERGED_TRAINING = 5,
  TEDM_MODEL_ERROR = 6,
  TEDM_UNSUPPORTED_RESIZE = 7,
  TEDM_STORAGE_ERROR = 8,
  TEDM_FORMAT_ERROR = 9,
  TEDM_MIXED_STEP_ERROR = 10,
  TEDM_RANGE_ERROR = 11,
  TEDM_EMPTY_GROUP = 12,
  TEDM_INVALID_SPEC = 13,
  TEDM_DEGENERATE_INTENSITY = 14,
  TEDM_DEGENERATE_VARIANCE = 15,
  TEDM_BUDGET_ERROR = 16,
  TEDM_CONFIG_ERROR = 17,
  TEDM_MANIFEST_ERROR = 18,
  TEDM_STAGE_ERROR = 19,
  TEDM_INVALID_ARGUMENT = 20,
  TEDM_INTERNAL = 99
};

enum tedm_stage {
  TEDM_STAGE_DATA = 0,
  TEDM_STAGE_PRETRAIN = 1,
  TEDM_STAGE_EXTRACT = 2,
  TEDM_STAGE_TRAIN_HEAD = 3,
  TEDM_STAGE_EVALUATE = 4,
  TEDM_STAGE_REPORT = 5
};

TEDM_API const char* tedm_version(void);
TEDM_API const char* tedm_last_error(void);
TEDM_API const char* tedm_status_name(int status);
/* "data", "pretrain", "extract", "train-head", "evaluate", "report"; NULL if out of range. */
TEDM_API const char* tedm_stage_name(int stage);

/* ---- experiment configuration */

typedef struct tedm_config tedm_config;

TEDM_API int tedm_config_default(tedm_config** out);
TEDM_API int tedm_config_parse(const char* text, tedm_config** out);
TEDM_API int tedm_config_load(const char* path, tedm_config** out);
TEDM_API void tedm_config_free(tedm_config* config);
TEDM_API int tedm_config_set(tedm_config* config, const char* key, const char* value);
TEDM_API int tedm_config_set_seed(tedm_config* config, uint64_t seed);
/* Copies the value with its terminator into buf when it fits; *needed gets
 * the required size including the terminator. */
TEDM_API int tedm_config_get(const tedm_config* config, const char* key, char* buf, size_t capacity,
                             size_t* needed);
/* Whole configuration as "key = value" lines, same buffer contract. */
TEDM_API int tedm_config_canonical(const tedm_config* config, char* buf, size_t capacity, size_t* needed);
TEDM_API int tedm_config_validate(const tedm_config* config);

/* ---- pipeline */

typedef void (*tedm_log_fn)(const char* line, void* user);

/* Runs stages up to and including last_stage into out_dir. On a stage
 * failure returns TEDM_STAGE_ERROR and stores the stage in *failed_stage
 * (may be NULL); otherwise *failed_stage is set to -1. */
TEDM_API int tedm_run(const tedm_config* config, const char* out_dir, int last_stage, tedm_log_fn log, void* user,
                      int* failed_stage);

typedef struct {
  size_t denoiser_forwards;
  double denoiser_macs;
  size_t mlp_input;
  size_t mlp_evaluations;
  double mlp_macs_per_pixel;
  size_t n_pixels;
  double total_macs;
} tedm_cost;

TEDM_API int tedm_estimate_cost(const tedm_config* config, const char* head_kind, tedm_cost* out);

/* ---- numerics */

typedef struct tedm_schedule tedm_schedule;

TEDM_API int tedm_schedule_linear(size_t total_steps, double beta_start, double beta_end, tedm_schedule** out);
TEDM_API void tedm_schedule_free(tedm_schedule* schedule);
TEDM_API int tedm_schedule_alpha_bar(const tedm_schedule* schedule, size_t t, double* out);

/* Masks are h*w bytes, nonzero meaning foreground. */
TEDM_API int tedm_dice(const uint8_t* pred, const uint8_t* gt, size_t height, size_t width, double* out);
TEDM_API int tedm_precision_recall(const uint8_t* pred, const uint8_t* gt, size_t height, size_t width,
                                   double* precision, double* recall);
TEDM_API int tedm_wilcoxon(const double* a, const double* b, size_t n, double alpha, double* p_value,
                           int* significant);
TEDM_API int tedm_bonferroni(const double* p_values, size_t n, size_t m, double* adjusted);

#ifdef __cplusplus
}
#endif

#endif
