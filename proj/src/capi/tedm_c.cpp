#include "tedm/tedm.h"

#include <cstring>
#include <string>

#include "tedm/diffusion/diffusion.hpp"
#include "tedm/eval/metrics.hpp"
#include "tedm/runner/config.hpp"
#include "tedm/runner/cost.hpp"
#include "tedm/runner/pipeline.hpp"

struct tedm_config {
  tedm::runner::ExperimentConfig cfg;
};

struct tedm_schedule {
  tedm::diffusion::NoiseSchedule schedule;
};

namespace {

thread_local std::string g_last_error;

int set_error(int status, const std::string& message) {
  g_last_error = message;
  return status;
}

template <typename F>
int guarded(F&& body) {
  try {
    body();
    return TEDM_OK;
  } catch (const tedm::Error& e) {
    return set_error(static_cast<int>(e.code()), e.what());
  } catch (const std::bad_alloc&) {
    return set_error(TEDM_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return set_error(TEDM_INTERNAL, e.what());
  }
}

void need(const void* p, const char* what) {
  if (!p) tedm::fail(tedm::ErrorCode::kInvalidArgument, std::string(what) + " is null");
}

void copy_out(const std::string& s, char* buf, std::size_t capacity, std::size_t* needed) {
  if (needed) *needed = s.size() + 1;
  if (buf && capacity >= s.size() + 1) std::memcpy(buf, s.c_str(), s.size() + 1);
  else if (buf || !needed)
    tedm::fail(tedm::ErrorCode::kRangeError, "buffer of " + std::to_string(capacity) + " bytes is too small");
}

tedm::eval::BinaryMask to_mask(const uint8_t* p, std::size_t h, std::size_t w) {
  tedm::eval::BinaryMask m(h, w);
  for (std::size_t i = 0; i < h * w; ++i) m.values[i] = p[i] != 0;
  return m;
}

}  // namespace

extern "C" {

const char* tedm_version(void) { return "1.0.0"; }

const char* tedm_last_error(void) { return g_last_error.c_str(); }

const char* tedm_status_name(int status) {
  if (status == TEDM_OK) return "Ok";
  return tedm::error_code_name(static_cast<tedm::ErrorCode>(status)).data();
}

const char* tedm_stage_name(int stage) {
  if (stage < TEDM_STAGE_DATA || stage > TEDM_STAGE_REPORT) return nullptr;
  return tedm::runner::stage_name(tedm::runner::kAllStages[stage]);
}

int tedm_config_default(tedm_config** out) {
  return guarded([&] {
    need(out, "out");
    *out = new tedm_config{};
  });
}

int tedm_config_parse(const char* text, tedm_config** out) {
  return guarded([&] {
    need(text, "text");
    need(out, "out");
    *out = new tedm_config{tedm::runner::parse_config(text)};
  });
}

int tedm_config_load(const char* path, tedm_config** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new tedm_config{tedm::runner::load_config(path)};
  });
}

void tedm_config_free(tedm_config* config) { delete config; }

int tedm_config_set(tedm_config* config, const char* key, const char* value) {
  return guarded([&] {
    need(config, "config");
    need(key, "key");
    need(value, "value");
    config->cfg.set(key, value);
  });
}

int tedm_config_set_seed(tedm_config* config, uint64_t seed) {
  return guarded([&] {
    need(config, "config");
    config->cfg.seed = seed;
  });
}

int tedm_config_get(const tedm_config* config, const char* key, char* buf, size_t capacity, size_t* needed) {
  return guarded([&] {
    need(config, "config");
    need(key, "key");
    copy_out(config->cfg.get(key), buf, capacity, needed);
  });
}

int tedm_config_canonical(const tedm_config* config, char* buf, size_t capacity, size_t* needed) {
  return guarded([&] {
    need(config, "config");
    copy_out(config->cfg.canonical(), buf, capacity, needed);
  });
}

int tedm_config_validate(const tedm_config* config) {
  return guarded([&] {
    need(config, "config");
    config->cfg.validate();
  });
}

int tedm_run(const tedm_config* config, const char* out_dir, int last_stage, tedm_log_fn log, void* user,
             int* failed_stage) {
  if (failed_stage) *failed_stage = -1;
  return guarded([&] {
    need(config, "config");
    need(out_dir, "out_dir");
    if (last_stage < TEDM_STAGE_DATA || last_stage > TEDM_STAGE_REPORT)
      tedm::fail(tedm::ErrorCode::kInvalidArgument, "unknown stage " + std::to_string(last_stage));
    tedm::runner::PipelineOptions opts;
    opts.last = tedm::runner::kAllStages[last_stage];
    if (log) opts.log = [log, user](const std::string& line) { log(line.c_str(), user); };
    try {
      tedm::runner::run_pipeline(config->cfg, out_dir, opts);
    } catch (const tedm::runner::StageFailure& e) {
      if (failed_stage) *failed_stage = static_cast<int>(e.stage());
      throw;
    }
  });
}

int tedm_estimate_cost(const tedm_config* config, const char* head_kind, tedm_cost* out) {
  return guarded([&] {
    need(config, "config");
    need(head_kind, "head_kind");
    need(out, "out");
    const auto r = tedm::runner::estimate_cost(config->cfg, head_kind);
    *out = {r.denoiser_forwards, r.denoiser_macs, r.mlp_input, r.mlp_evaluations,
            r.mlp_macs_per_pixel, r.n_pixels,     r.total_macs};
  });
}

int tedm_schedule_linear(size_t total_steps, double beta_start, double beta_end, tedm_schedule** out) {
  return guarded([&] {
    need(out, "out");
    *out = new tedm_schedule{tedm::diffusion::build_schedule(total_steps, beta_start, beta_end)};
  });
}

void tedm_schedule_free(tedm_schedule* schedule) { delete schedule; }

int tedm_schedule_alpha_bar(const tedm_schedule* schedule, size_t t, double* out) {
  return guarded([&] {
    need(schedule, "schedule");
    need(out, "out");
    *out = schedule->schedule.alpha_bar(t);
  });
}

int tedm_dice(const uint8_t* pred, const uint8_t* gt, size_t height, size_t width, double* out) {
  return guarded([&] {
    need(pred, "pred");
    need(gt, "gt");
    need(out, "out");
    *out = tedm::eval::dice(to_mask(pred, height, width), to_mask(gt, height, width));
  });
}

int tedm_precision_recall(const uint8_t* pred, const uint8_t* gt, size_t height, size_t width, double* precision,
                          double* recall) {
  return guarded([&] {
    need(pred, "pred");
    need(gt, "gt");
    need(precision, "precision");
    need(recall, "recall");
    const auto pr = tedm::eval::precision_recall(to_mask(pred, height, width), to_mask(gt, height, width));
    *precision = pr.precision;
    *recall = pr.recall;
  });
}

int tedm_wilcoxon(const double* a, const double* b, size_t n, double alpha, double* p_value, int* significant) {
  return guarded([&] {
    need(a, "a");
    need(b, "b");
    need(p_value, "p_value");
    const auto r = tedm::eval::wilcoxon_paired({a, a + n}, {b, b + n}, alpha);
    *p_value = r.p_value;
    if (significant) *significant = r.significant ? 1 : 0;
  });
}

int tedm_bonferroni(const double* p_values, size_t n, size_t m, double* adjusted) {
  return guarded([&] {
    need(p_values, "p_values");
    need(adjusted, "adjusted");
    const auto out = tedm::eval::bonferroni({p_values, p_values + n}, m);
    std::copy(out.begin(), out.end(), adjusted);
  });
}

}  // extern "C"
