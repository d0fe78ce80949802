// Command-line front end. Talks to the library only through tedm.h.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tedm/tedm.h"

namespace {

struct ConfigDeleter {
  void operator()(tedm_config* c) const { tedm_config_free(c); }
};
using ConfigPtr = std::unique_ptr<tedm_config, ConfigDeleter>;

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
};

class Failure : public std::runtime_error {
 public:
  Failure(int exit_code, const std::string& what) : std::runtime_error(what), exit_code(exit_code) {}
  int exit_code;
};

void check(int status, const std::string& context) {
  if (status != TEDM_OK)
    throw Failure(1, context + ": " + tedm_status_name(status) + ": " + tedm_last_error());
}

ConfigPtr load(const CommonArgs& args) {
  tedm_config* raw = nullptr;
  if (args.config.empty()) check(tedm_config_default(&raw), "config");
  else check(tedm_config_load(args.config.c_str(), &raw), "config");
  ConfigPtr cfg(raw);
  for (const auto& kv : args.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Failure(1, "config: --set expects key=value, got '" + kv + "'");
    check(tedm_config_set(cfg.get(), kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str()), "config");
  }
  if (args.seed) check(tedm_config_set_seed(cfg.get(), *args.seed), "config");
  check(tedm_config_validate(cfg.get()), "config");
  return cfg;
}

std::string get(const tedm_config* cfg, const char* key) {
  std::size_t needed = 0;
  check(tedm_config_get(cfg, key, nullptr, 0, &needed), "config");
  std::string out(needed, '\0');
  check(tedm_config_get(cfg, key, out.data(), out.size(), &needed), "config");
  out.resize(needed - 1);
  return out;
}

void log_line(const char* line, void*) { std::fprintf(stderr, "[tedm] %s\n", line); }

int run_stage(const CommonArgs& args, int last) {
  auto cfg = load(args);
  int failed = -1;
  const int status = tedm_run(cfg.get(), args.out.c_str(), last, log_line, nullptr, &failed);
  if (status == TEDM_STAGE_ERROR)
    throw Failure(2, std::string("stage ") + tedm_stage_name(failed) + " failed: " + tedm_last_error());
  check(status, tedm_stage_name(last));
  std::fprintf(stderr, "[tedm] %s complete in %s\n", tedm_stage_name(last), args.out.c_str());
  return 0;
}

int run_cost(const CommonArgs& args, std::vector<std::string> heads) {
  auto cfg = load(args);
  if (heads.empty()) {
    std::istringstream in(get(cfg.get(), "heads.kinds"));
    for (std::string h; std::getline(in, h, ',');) heads.push_back(h);
  }
  std::string csv = "head,denoiser_forwards,denoiser_macs,mlp_input,mlp_evaluations,mlp_macs_per_pixel,n_pixels,total_macs\n";
  std::printf("%-12s %6s %12s %10s %14s %12s\n", "head", "|S|", "N (GMAC)", "MLP in", "N_MLP (MMAC)", "total (GMAC)");
  for (const auto& h : heads) {
    tedm_cost c{};
    check(tedm_estimate_cost(cfg.get(), h.c_str(), &c), "cost");
    std::printf("%-12s %6zu %12.3f %10zu %14.4f %12.3f\n", h.c_str(), c.denoiser_forwards, c.denoiser_macs / 1e9,
                c.mlp_input, c.mlp_macs_per_pixel / 1e6, c.total_macs / 1e9);
    char line[256];
    std::snprintf(line, sizeof line, "%s,%zu,%.0f,%zu,%zu,%.0f,%zu,%.0f\n", h.c_str(), c.denoiser_forwards,
                  c.denoiser_macs, c.mlp_input, c.mlp_evaluations, c.mlp_macs_per_pixel, c.n_pixels, c.total_macs);
    csv += line;
  }
  if (!args.out.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(args.out, ec);
    std::ofstream f(std::filesystem::path(args.out) / "cost.csv", std::ios::binary);
    f << csv;
    if (!f) throw Failure(1, "cost: cannot write " + args.out + "/cost.csv");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion-feature segmentation experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", tedm_version());

  CommonArgs args;
  std::vector<std::string> cost_heads;
  auto add_common = [&](CLI::App* sub, bool out_required) {
    sub->add_option("--config", args.config, "Experiment config file (defaults when omitted)")->check(CLI::ExistingFile);
    sub->add_option("--seed", args.seed, "Override the config seed");
    auto* out = sub->add_option("--out", args.out, "Run directory");
    if (out_required) out->required();
    sub->add_option("--set", args.overrides, "Override a config key (key=value), repeatable");
  };

  struct StageCommand {
    const char* name;
    const char* help;
    int last;
  };
  const StageCommand stages[] = {
      {"pretrain", "Generate the corpus and pretrain the denoiser", TEDM_STAGE_PRETRAIN},
      {"extract", "Extract and cache latents", TEDM_STAGE_EXTRACT},
      {"train-head", "Train segmentation heads and probes", TEDM_STAGE_TRAIN_HEAD},
      {"evaluate", "Evaluate every head on the test domains", TEDM_STAGE_EVALUATE},
      {"report", "Run the whole pipeline and write tables and figures", TEDM_STAGE_REPORT},
  };
  std::vector<std::pair<CLI::App*, int>> stage_apps;
  for (const auto& s : stages) {
    auto* sub = app.add_subcommand(s.name, s.help);
    add_common(sub, true);
    stage_apps.emplace_back(sub, s.last);
  }
  auto* cost = app.add_subcommand("cost", "Print the compute cost of each head");
  add_common(cost, false);
  cost->add_option("--head", cost_heads, "Head kind (repeatable; default: heads.kinds)");

  CLI11_PARSE(app, argc, argv);
  try {
    for (const auto& [sub, last] : stage_apps)
      if (sub->parsed()) return run_stage(args, last);
    return run_cost(args, cost_heads);
  } catch (const Failure& f) {
    std::fprintf(stderr, "tedm: %s\n", f.what());
    return f.exit_code;
  }
}
