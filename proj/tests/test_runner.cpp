#include <doctest.h>

#include <fstream>
#include <functional>
#include <regex>
#include <set>

#include "tedm/checkpoint.hpp"
#include "tedm/hash.hpp"
#include "tedm/runner/config.hpp"
#include "tedm/runner/cost.hpp"
#include "tedm/runner/pipeline.hpp"
#include "test_support.hpp"

using namespace tedm;
using namespace tedm::runner;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::kOk;
}

const char* kTinyConfig = R"(
# small enough for a unit test
seed = 3
[data]
height = 16
width = 16
unlabeled = 8
labeled_pool = 5
test = 3

[denoiser]
widths = 4, 8
mid_width = 8
time_dim = 8

[pretrain]
steps = 6
batch_size = 2
learning_rate = 1e-3

[heads]
sizes = 1, 2, 3, 4, full
[head]
steps = 20
batch_pixels = 32
hidden = 8, 4
ledm_members = 2
[supervised]
steps = 4
batch_size = 1
[probe]
max_iterations = 10
max_pixels = 256
)";

std::string slurp(const std::filesystem::path& p) { return read_file(p.string()); }

std::map<std::string, std::string> hash_tree(const std::filesystem::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().filename() != kManifestFile)
      out[std::filesystem::relative(e.path(), root).string()] = hash_file(e.path().string());
  return out;
}

}  // namespace

TEST_CASE("config parsing") {
  const auto cfg = parse_config(kTinyConfig);
  CHECK(cfg.seed == 3);
  CHECK(cfg.data.height == 16);
  CHECK(cfg.widths == std::vector<int>{4, 8});
  CHECK(cfg.resolved_sizes() == std::vector<std::size_t>{1, 2, 3, 4, 5});
  CHECK(cfg.heads.size() == 6);
  CHECK(cfg.tedm_steps == std::vector<std::size_t>{1, 10, 25, 50, 200, 400, 600, 800});
  CHECK(cfg.ledm_steps == std::vector<std::size_t>{50, 150, 250});
  CHECK_NOTHROW(cfg.validate());

  const auto again = parse_config(cfg.canonical());
  CHECK(again.canonical() == cfg.canonical());
  CHECK(again.hash() == cfg.hash());
  auto changed = cfg;
  changed.set("domain.b.noise", "0.3");
  CHECK(changed.hash() != cfg.hash());
  CHECK(changed.domains[1].noise == 0.3);

  CHECK(code_of([] { parse_config("heads.tedm_step = 1,2"); }) == ErrorCode::kConfigError);
  CHECK(code_of([] { parse_config("seed = 1\nseed = 2"); }) == ErrorCode::kConfigError);
  CHECK(code_of([] { parse_config("seed 1"); }) == ErrorCode::kConfigError);
  CHECK(code_of([] { parse_config("[data\nheight = 2"); }) == ErrorCode::kConfigError);
  CHECK(code_of([] { parse_config("pretrain.steps = many"); }) == ErrorCode::kConfigError);
  CHECK(code_of([] { parse_config("heads.kinds = tedm, unet"); }) == ErrorCode::kConfigError);
  CHECK(code_of([] { parse_config("heads.kinds = tedm, tedm@7").validate(); }) == ErrorCode::kConfigError);
  CHECK(code_of([] { parse_config("heads.tedm_steps = 0, 5").validate(); }) == ErrorCode::kConfigError);
  CHECK(code_of([] { parse_config("heads.ledm_steps = 5, 5000").validate(); }) == ErrorCode::kConfigError);
  CHECK(code_of([] { parse_config("heads.sizes = 1, 65").validate(); }) == ErrorCode::kConfigError);
  CHECK(code_of([] { parse_config("heads.sizes =").validate(); }) == ErrorCode::kConfigError);
  CHECK(code_of([] { parse_config("data.height = 30").validate(); }) == ErrorCode::kConfigError);
  CHECK(code_of([] { load_config("/nonexistent/run.cfg"); }) == ErrorCode::kConfigError);
  const auto keys = ExperimentConfig::keys();
  CHECK(std::set<std::string>(keys.begin(), keys.end()).size() == keys.size());
}

TEST_CASE("empty head list is rejected before any work") {
  tedm::testing::TempDir dir("runner_empty");
  auto cfg = parse_config(kTinyConfig);
  cfg.set("heads.kinds", "");
  CHECK(code_of([&] { run_pipeline(cfg, dir.path() / "run"); }) == ErrorCode::kConfigError);
  CHECK_FALSE(std::filesystem::exists(dir.path() / "run"));
}

TEST_CASE("denoiser MAC count") {
  diffusion::DenoiserConfig c;
  c.height = c.width = 8;
  c.widths = {2};
  c.mid_width = 3;
  c.time_dim = 4;
  // time 4*4; enc0 1->2 @8x8; mid.in 2->3 @4x4; mid 3->3 @4x4; dec0 5->2 @8x8; out 2->1 @8x8
  const double expected = 16 + (2 * 1 * 9 * 64 + 2 * 4) + (3 * 2 * 9 * 16 + 3 * 4) + (3 * 3 * 9 * 16 + 3 * 4) +
                          (2 * 5 * 9 * 64 + 2 * 4) + 1 * 2 * 9 * 64;
  CHECK(denoiser_macs(c) == expected);
  CHECK(mlp_macs(960, 2, {128, 32}) == 960 * 128 + 128 * 32 + 32 * 2);
}

TEST_CASE("cost formulas") {
  auto cfg = parse_config(kTinyConfig);
  const auto sup = estimate_cost(cfg, "supervised");
  CHECK(sup.total_macs == denoiser_macs(cfg.denoiser()));
  CHECK(code_of([&] { estimate_cost(cfg, "resnet"); }) == ErrorCode::kConfigError);

  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const double n_macs = 1e6 * rng.uniform(1, 100);
    const std::size_t n_latent = rng.uniform_int(1, 2000), pixels = rng.uniform_int(1, 100000);
    const int h1 = static_cast<int>(rng.uniform_int(1, 256)), h2 = static_cast<int>(rng.uniform_int(1, 64));
    cfg.cost_denoiser_macs = n_macs;
    cfg.cost_n_latent = n_latent;
    cfg.cost_n_pixels = pixels;
    cfg.head_hidden = {h1, h2};
    const double s_ledm = static_cast<double>(cfg.ledm_steps.size()), s_tedm = static_cast<double>(cfg.tedm_steps.size());
    auto n_mlp = [&](double in) { return in * h1 + double(h1) * h2 + double(h2) * 2; };
    CHECK(estimate_cost(cfg, "ledm").total_macs ==
          doctest::Approx(s_ledm * n_macs + pixels * n_mlp(s_ledm * n_latent)).epsilon(1e-12));
    CHECK(estimate_cost(cfg, "ledme").total_macs ==
          doctest::Approx(s_tedm * n_macs + pixels * n_mlp(s_tedm * n_latent)).epsilon(1e-12));
    CHECK(estimate_cost(cfg, "tedm").total_macs ==
          doctest::Approx(s_tedm * n_macs + s_tedm * pixels * n_mlp(n_latent)).epsilon(1e-12));
    CHECK(estimate_cost(cfg, "tedm@25").total_macs == doctest::Approx(n_macs + pixels * n_mlp(n_latent)).epsilon(1e-12));
    CHECK(estimate_cost(cfg, "supervised").total_macs == n_macs);
  }
}

TEST_CASE("manifest serialization") {
  RunManifest m;
  m.config_text = "seed = 1\nheads.kinds = tedm\n";
  m.config_hash = "abc";
  m.seed = 1;
  m.stages.push_back({"data", "i1", "o1", 1.5, false, {{"corpus/a b.txt", "h1"}, {"corpus/c", "h2"}}});
  m.stages.push_back({"pretrain", "i2", "o2", 0.25, true, {}});
  m.results = {"report/summary.csv"};
  const auto back = RunManifest::parse(m.serialize());
  CHECK(back.serialize() == m.serialize());
  CHECK(back.stages[0].artifacts[0].path == "corpus/a b.txt");
  CHECK(back.stages[1].skipped);
  CHECK(code_of([] { RunManifest::parse("garbage"); }) == ErrorCode::kManifestError);
  CHECK_FALSE(m.complete_through(Stage::kEvaluate));
  CHECK(m.complete_through(Stage::kPretrain));
  CHECK(code_of([&] { emit_report(m, "/tmp", "/tmp", ReportFormat::kCsv); }) == ErrorCode::kManifestError);
}

TEST_CASE("pipeline end to end") {
  tedm::testing::TempDir dir("runner");
  const auto run = dir.path() / "run";
  const auto cfg = parse_config(kTinyConfig);
  const auto manifest = run_pipeline(cfg, run);

  for (Stage s : kAllStages) {
    const auto* rec = manifest.find(stage_name(s));
    REQUIRE(rec != nullptr);
    CHECK_FALSE(rec->skipped);
    CHECK_FALSE(rec->artifacts.empty());
  }
  CHECK_FALSE(std::filesystem::exists(run / ".tmp-report"));

  SUBCASE("one summary row per (head, size, domain)") {
    const auto csv = slurp(run / "report/summary.csv");
    const auto lines = std::count(csv.begin(), csv.end(), '\n');
    CHECK(lines - 1 == 6 * 5 * 3);
    CHECK(csv.rfind("model,n_train,domain,metric,mean,std,p_vs_best,bold\n", 0) == 0);
  }
  SUBCASE("text table bold flags follow aggregate_results") {
    const auto records = read_metric_records(run / "eval/metrics.csv");
    std::vector<eval::MetricRecord> dice;
    for (const auto& r : records)
      if (r.metric == "dice") dice.push_back(r);
    const auto rows = eval::aggregate_results(dice, {cfg.alpha, 1});
    std::istringstream text(slurp(run / "report/summary.txt"));
    std::string line;
    std::getline(text, line);
    std::getline(text, line);
    for (const auto& r : rows) {
      REQUIRE(std::getline(text, line));
      std::istringstream ls(line);
      std::string model, n, domain;
      ls >> model >> n >> domain;
      CHECK(model == r.model);
      CHECK(domain == r.domain);
      CHECK((line.back() == '*') == r.bold);
    }
  }
  SUBCASE("figure x-axis is the probe grid") {
    const auto svg = slurp(run / "report/probe_curves.svg");
    const std::regex tick(R"(class="xtick"[^>]*>(\d+)<)");
    std::vector<std::size_t> ticks;
    for (auto it = std::sregex_iterator(svg.begin(), svg.end(), tick); it != std::sregex_iterator(); ++it)
      ticks.push_back(std::stoul((*it)[1]));
    const std::vector<std::size_t> grid{1, 10, 25, 50, 200, 400, 600, 800};
    REQUIRE(ticks.size() == 3 * grid.size());
    for (std::size_t p = 0; p < 3; ++p)
      CHECK(std::vector<std::size_t>(ticks.begin() + p * 8, ticks.begin() + (p + 1) * 8) == grid);
  }
  SUBCASE("rerun is a no-op") {
    const auto before = hash_tree(run);
    const auto again = run_pipeline(cfg, run);
    for (const auto& s : again.stages) CHECK(s.skipped);
    CHECK(hash_tree(run) == before);
    for (const auto& r : again.results) CHECK(std::filesystem::exists(run / r));
  }
  SUBCASE("a changed head setting reruns only downstream stages") {
    auto cfg2 = cfg;
    cfg2.set("head.steps", "25");
    const auto again = run_pipeline(cfg2, run);
    CHECK(again.find("data")->skipped);
    CHECK(again.find("pretrain")->skipped);
    CHECK(again.find("extract")->skipped);
    CHECK_FALSE(again.find("train-head")->skipped);
  }
  SUBCASE("partial runs resume") {
    tedm::testing::TempDir other("runner_partial");
    const auto part = run_pipeline(cfg, other.path(), {Stage::kExtract, {}});
    CHECK(part.find("evaluate") == nullptr);
    CHECK_FALSE(std::filesystem::exists(other.path() / "heads"));
    const auto rest = run_pipeline(cfg, other.path());
    CHECK(rest.find("extract")->skipped);
    CHECK_FALSE(rest.find("report")->skipped);
    // same seed and config in a different directory: identical results
    CHECK(slurp(other.path() / "report/summary.csv") == slurp(run / "report/summary.csv"));
    CHECK(slurp(other.path() / "eval/metrics.csv") == slurp(run / "eval/metrics.csv"));
  }
  SUBCASE("a tampered artifact forces that stage to rerun") {
    { std::ofstream(run / "eval/metrics.csv", std::ios::app) << "x"; }
    const auto again = run_pipeline(cfg, run);
    CHECK(again.find("train-head")->skipped);
    CHECK_FALSE(again.find("evaluate")->skipped);
    CHECK(again.find("report")->skipped);  // evaluate reproduced its previous output
  }
  SUBCASE("stage failures name the stage and clean up") {
    const auto old_model = hash_file((run / "pretrain/denoiser.ckpt").string());
    auto cfg2 = cfg;
    cfg2.set("pretrain.learning_rate", "1e30");
    try {
      run_pipeline(cfg2, run);
      FAIL("expected a stage failure");
    } catch (const StageFailure& e) {
      CHECK(e.stage() == Stage::kPretrain);
      CHECK(e.code() == ErrorCode::kStageError);
      CHECK(e.cause() == ErrorCode::kDivergedTraining);
      CHECK(std::string(e.what()).rfind("pretrain: ", 0) == 0);
    }
    CHECK_FALSE(std::filesystem::exists(run / ".tmp-pretrain"));
    CHECK(hash_file((run / "pretrain/denoiser.ckpt").string()) == old_model);
    // the previous manifest still describes a complete run
    const auto again = run_pipeline(cfg, run);
    for (const auto& s : again.stages) CHECK(s.skipped);
  }
}
