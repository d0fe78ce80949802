// Acceptance checks. Prints one PASS/FAIL line per criterion.
//
//   tedm_acceptance --config acceptance.cfg --runs DIR --prepare
//   tedm_acceptance --config acceptance.cfg --runs DIR --criterion 3
//   tedm_acceptance --criterion 1 --suite ./test_eval --suite ./test_heads

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tedm/error.hpp"
#include "tedm/runner/config.hpp"
#include "tedm/runner/cost.hpp"
#include "tedm/runner/pipeline.hpp"

namespace fs = std::filesystem;
using namespace tedm;
using namespace tedm::runner;

namespace {

constexpr std::uint64_t kSeeds[] = {0, 1, 2};
constexpr const char* kShiftBoth = "shift_both";

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

fs::path seed_dir(const fs::path& runs, std::uint64_t seed) { return runs / ("seed" + std::to_string(seed)); }

ExperimentConfig seeded(const ExperimentConfig& base, std::uint64_t seed) {
  auto c = base;
  c.seed = seed;
  return c;
}

// mean dice keyed by model -> n_train, restricted to one domain
using Means = std::map<std::string, std::map<std::size_t, double>>;

Means mean_dice(const fs::path& csv, const std::string& domain) {
  std::map<std::pair<std::string, std::size_t>, std::pair<double, std::size_t>> acc;
  for (const auto& r : read_metric_records(csv)) {
    if (r.domain != domain || r.metric != "dice") continue;
    auto& a = acc[{r.model, r.n_train}];
    a.first += r.value;
    a.second += 1;
  }
  Means out;
  for (const auto& [key, a] : acc) out[key.first][key.second] = a.first / double(a.second);
  return out;
}

double lookup(const Means& m, const std::string& model, std::size_t n) {
  auto it = m.find(model);
  if (it == m.end() || !it->second.count(n))
    fail(ErrorCode::kManifestError, "no results for " + model + " n=" + std::to_string(n));
  return it->second.at(n);
}

Outcome majority(const std::vector<bool>& per_seed, std::string detail) {
  std::size_t wins = 0;
  for (bool b : per_seed) wins += b;
  detail += " -> " + std::to_string(wins) + "/" + std::to_string(per_seed.size()) + " seeds";
  return {wins >= 2, detail};
}

Outcome property_suite(const std::vector<std::string>& suites) {
  if (suites.empty()) return {false, "no suites given"};
  const auto t0 = std::chrono::steady_clock::now();
  std::string failed;
  for (const auto& s : suites) {
    const std::string cmd = "\"" + s + "\" > /dev/null 2>&1";
    if (std::system(cmd.c_str()) != 0) failed += " " + fs::path(s).filename().string();
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::string detail = std::to_string(suites.size()) + " suites in " + fmt("%.1f", secs) + " s";
  if (!failed.empty()) return {false, detail + ", failed:" + failed};
  return {secs < 60.0, detail};
}

Outcome cost_table() {
  ExperimentConfig c;
  c.set("data.height", "256");
  c.set("data.width", "256");
  c.set("cost.denoiser_macs", "29.2e9");
  c.set("cost.n_latent", "960");
  c.set("cost.n_pixels", "65536");
  c.set("heads.ledm_steps", "50, 150, 250");
  c.set("heads.tedm_steps", "1, 10, 25, 50, 200, 400, 600, 800");
  const double ledm = estimate_cost(c, "ledm").total_macs / 1e9;
  const double tedm = estimate_cost(c, "tedm").total_macs / 1e9;
  const bool ok = std::abs(ledm - 88.0) <= 0.5 && std::abs(tedm - 234.6) <= 0.5;
  return {ok, "ledm " + fmt("%.3f", ledm) + " GMAC (want 88.0), tedm " + fmt("%.3f", tedm) + " GMAC (want 234.6)"};
}

Outcome probe_trend(const fs::path& runs) {
  std::vector<bool> wins;
  std::string detail;
  for (auto s : kSeeds) {
    const auto m = mean_dice(seed_dir(runs, s) / "eval" / "probe_metrics.csv", kShiftBoth);
    const double early = lookup(m, "probe@1", 3), late = lookup(m, "probe@800", 3);
    wins.push_back(early > late);
    detail += " seed" + std::to_string(s) + " " + fmt("%.4f", early) + "/" + fmt("%.4f", late);
  }
  return majority(wins, "probe@1 vs probe@800, n=3:" + detail);
}

Outcome tedm_vs_ledm(const fs::path& runs) {
  std::vector<bool> wins;
  std::string detail;
  for (auto s : kSeeds) {
    const auto m = mean_dice(seed_dir(runs, s) / "eval" / "metrics.csv", kShiftBoth);
    bool ok = true;
    detail += " seed" + std::to_string(s);
    for (std::size_t n : {1u, 3u}) {
      const double t = lookup(m, "tedm", n), l = lookup(m, "ledm", n);
      ok = ok && t > l;
      detail += " n" + std::to_string(n) + " " + fmt("%.4f", t) + "/" + fmt("%.4f", l);
    }
    wins.push_back(ok);
  }
  return majority(wins, "tedm/ledm:" + detail);
}

Outcome vote_vs_single(const fs::path& runs, const ExperimentConfig& cfg) {
  std::vector<bool> wins;
  std::string detail;
  for (auto s : kSeeds) {
    const auto m = mean_dice(seed_dir(runs, s) / "eval" / "metrics.csv", kShiftBoth);
    bool ok = true;
    double worst = INFINITY;
    for (auto n : cfg.resolved_sizes()) {
      const double vote = lookup(m, "tedm", n);
      for (const char* single : {"tedm@1", "tedm@10", "tedm@25"}) {
        const double margin = vote - lookup(m, single, n);
        ok = ok && margin >= -0.01;
        worst = std::min(worst, margin);
      }
    }
    wins.push_back(ok);
    detail += " seed" + std::to_string(s) + " " + fmt("%+.4f", worst);
  }
  return majority(wins, "worst vote margin:" + detail);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Every file of the run tree except the manifest, which records timings.
std::map<std::string, std::string> result_files(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), root).generic_string();
    if (rel != kManifestFile) out[rel] = slurp(e.path());
  }
  return out;
}

Outcome determinism(const fs::path& runs, const ExperimentConfig& cfg) {
  const fs::path fresh = runs / "rerun-seed0";
  fs::remove_all(fresh);
  run_pipeline(seeded(cfg, 0), fresh);
  const auto a = result_files(seed_dir(runs, 0)), b = result_files(fresh);
  std::string diff;
  for (const auto& [name, bytes] : a) {
    auto it = b.find(name);
    if (it == b.end() || it->second != bytes) diff += " " + name;
  }
  for (const auto& [name, bytes] : b)
    if (!a.count(name)) diff += " " + name;
  const std::string detail = std::to_string(a.size()) + " files compared";
  if (!diff.empty()) return {false, detail + ", differ:" + diff};
  fs::remove_all(fresh);
  return {true, detail + ", byte-identical"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string config_path;
  std::string runs = "acceptance_runs";
  std::vector<int> criteria;
  std::vector<std::string> suites;
  bool prepare = false;
  app.add_option("--config", config_path, "experiment config for the desk-scale runs");
  app.add_option("--runs", runs, "directory holding one run per seed");
  app.add_option("--criterion", criteria, "criterion to check (repeatable; default all)")->check(CLI::Range(1, 6));
  app.add_option("--suite", suites, "unit-test executable for criterion 1 (repeatable)");
  app.add_flag("--prepare", prepare, "run the pipeline for every seed and exit");
  CLI11_PARSE(app, argc, argv);
  if (criteria.empty()) criteria = {1, 2, 3, 4, 5, 6};

  std::optional<ExperimentConfig> cfg;
  auto config = [&]() -> const ExperimentConfig& {
    if (!cfg) {
      if (config_path.empty()) fail(ErrorCode::kConfigError, "--config is required");
      cfg = load_config(config_path);
    }
    return *cfg;
  };

  if (prepare) {
    try {
      for (auto s : kSeeds) {
        PipelineOptions opt;
        opt.log = [s](const std::string& line) { std::fprintf(stderr, "[seed %llu] %s\n", (unsigned long long)s, line.c_str()); };
        run_pipeline(seeded(config(), s), seed_dir(runs, s), opt);
      }
    } catch (const std::exception& e) {
      std::fprintf(stderr, "prepare failed: %s\n", e.what());
      return 1;
    }
    return 0;
  }

  bool all = true;
  for (int k : criteria) {
    Outcome o;
    try {
      switch (k) {
        case 1: o = property_suite(suites); break;
        case 2: o = cost_table(); break;
        case 3: o = probe_trend(runs); break;
        case 4: o = tedm_vs_ledm(runs); break;
        case 5: o = vote_vs_single(runs, config()); break;
        case 6: o = determinism(runs, config()); break;
      }
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    std::printf("criterion %d: %s  %s\n", k, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    all = all && o.pass;
  }
  return all ? 0 : 1;
}
