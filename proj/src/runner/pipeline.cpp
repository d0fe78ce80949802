#include "tedm/runner/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <map>
#include <optional>
#include <tuple>
#include <set>
#include <sstream>

#include "tedm/checkpoint.hpp"
#include "tedm/data/synth.hpp"
#include "tedm/diffusion/diffusion.hpp"
#include "tedm/features/features.hpp"
#include "tedm/hash.hpp"
#include "tedm/heads/heads.hpp"
#include "tedm/rng.hpp"
#include "tedm/runner/cost.hpp"

namespace fs = std::filesystem;

namespace tedm::runner {

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::kData: return "data";
    case Stage::kPretrain: return "pretrain";
    case Stage::kExtract: return "extract";
    case Stage::kTrainHeads: return "train-head";
    case Stage::kEvaluate: return "evaluate";
    case Stage::kReport: return "report";
  }
  return "?";
}

const char* stage_dir(Stage s) {
  switch (s) {
    case Stage::kData: return "corpus";
    case Stage::kPretrain: return "pretrain";
    case Stage::kExtract: return "extract";
    case Stage::kTrainHeads: return "heads";
    case Stage::kEvaluate: return "eval";
    case Stage::kReport: return "report";
  }
  return "?";
}

StageFailure::StageFailure(Stage stage, ErrorCode cause, const std::string& message)
    : Error(ErrorCode::kStageError, std::string(stage_name(stage)) + ": " + message), stage_(stage), cause_(cause) {}

// ---------------------------------------------------------------- manifest

const StageRecord* RunManifest::find(const std::string& stage) const {
  for (const auto& s : stages)
    if (s.name == stage) return &s;
  return nullptr;
}

bool RunManifest::complete_through(Stage last) const {
  for (Stage s : kAllStages) {
    if (!find(stage_name(s))) return false;
    if (s == last) return true;
  }
  return true;
}

namespace {
constexpr const char* kManifestHeader = "tedm-manifest 1";
}

std::string RunManifest::serialize() const {
  std::ostringstream out;
  out << kManifestHeader << "\n";
  out << "config_hash " << config_hash << "\n";
  out << "seed " << seed << "\n";
  for (const auto& s : stages) {
    char secs[32];
    std::snprintf(secs, sizeof secs, "%.3f", s.seconds);
    out << "stage " << s.name << " input " << s.input_hash << " output " << s.output_hash << " seconds " << secs
        << " status " << (s.skipped ? "skipped" : "ran") << "\n";
    for (const auto& a : s.artifacts) out << "artifact " << s.name << " " << a.hash << " " << a.path << "\n";
  }
  for (const auto& r : results) out << "result " << r << "\n";
  std::istringstream cfg(config_text);
  for (std::string line; std::getline(cfg, line);) out << "config " << line << "\n";
  return out.str();
}

RunManifest RunManifest::parse(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  require(std::getline(in, line) && line == kManifestHeader, ErrorCode::kManifestError, "not a run manifest");
  RunManifest m;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "config_hash") ls >> m.config_hash;
    else if (key == "seed") ls >> m.seed;
    else if (key == "stage") {
      StageRecord r;
      std::string tag, status;
      ls >> r.name >> tag >> r.input_hash >> tag >> r.output_hash >> tag >> r.seconds >> tag >> status;
      require(!ls.fail(), ErrorCode::kManifestError, "malformed stage line: " + line);
      r.skipped = status == "skipped";
      m.stages.push_back(r);
    } else if (key == "artifact") {
      std::string stage;
      Artifact a;
      ls >> stage >> a.hash;
      std::getline(ls >> std::ws, a.path);
      require(!m.stages.empty() && m.stages.back().name == stage, ErrorCode::kManifestError,
              "artifact outside its stage: " + line);
      m.stages.back().artifacts.push_back(a);
    } else if (key == "result") {
      std::string r;
      std::getline(ls >> std::ws, r);
      m.results.push_back(r);
    } else if (key == "config") {
      std::string rest;
      std::getline(ls, rest);
      if (!rest.empty() && rest[0] == ' ') rest.erase(0, 1);
      m.config_text += rest + "\n";
    } else if (!key.empty()) {
      fail(ErrorCode::kManifestError, "unknown manifest line: " + line);
    }
  }
  return m;
}

RunManifest RunManifest::load(const fs::path& run_dir) {
  const auto path = run_dir / kManifestFile;
  require(fs::exists(path), ErrorCode::kManifestError, "no manifest in " + run_dir.string());
  return parse(read_file(path.string()));
}

// ---------------------------------------------------------------- helpers

namespace {

enum SeedTag : std::uint64_t {
  kTagInit = 1,
  kTagDdpm,
  kTagExtract,
  kTagLabels,
  kTagHead,
  kTagSupervised,
  kTagProbe,
};

const char* domain_label(std::size_t split) {
  switch (split) {
    case 2: return "in";
    case 3: return "shift_classifier";
    case 4: return "shift_both";
  }
  return "?";
}

std::vector<std::string> list_files(const fs::path& root) {
  std::vector<std::string> out;
  if (!fs::exists(root)) return out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root).generic_string());
  std::sort(out.begin(), out.end());
  return out;
}

std::string output_hash(const std::vector<Artifact>& artifacts) {
  Hasher h;
  for (const auto& a : artifacts) h.text(a.path).text(a.hash);
  return h.hex();
}

bool artifacts_intact(const fs::path& run_dir, const StageRecord& rec) {
  if (rec.artifacts.empty() || output_hash(rec.artifacts) != rec.output_hash) return false;
  for (const auto& a : rec.artifacts) {
    const auto p = run_dir / a.path;
    if (!fs::exists(p) || hash_file(p.string()) != a.hash) return false;
  }
  return true;
}

// Config keys each stage depends on, beyond the previous stage's outputs.
std::string stage_inputs(const ExperimentConfig& cfg, Stage s) {
  std::vector<std::string> prefixes;
  switch (s) {
    case Stage::kData: prefixes = {"seed", "data.", "domain."}; break;
    case Stage::kPretrain: prefixes = {"schedule.", "denoiser.", "pretrain."}; break;
    case Stage::kExtract: break;
    case Stage::kTrainHeads: prefixes = {"heads.", "head.", "supervised.", "probe."}; break;
    case Stage::kEvaluate: prefixes = {"heads.", "probe.steps"}; break;
    case Stage::kReport: prefixes = {"eval.", "cost.", "head.hidden"}; break;
  }
  std::string out = std::string("stage ") + stage_name(s) + "\n";
  for (const auto& key : ExperimentConfig::keys())
    for (const auto& p : prefixes)
      if (key.rfind(p, 0) == 0) {
        out += key + " = " + cfg.get(key) + "\n";
        break;
      }
  if (s == Stage::kExtract) {
    std::string steps;
    for (auto t : cfg.extraction_steps()) steps += std::to_string(t) + ",";
    out += "extract.steps = " + steps + "\nheads.sizes = " + cfg.get("heads.sizes") + "\n";
  }
  return out;
}

Tensor prepare(const data::SyntheticImage& img, Normalization norm) {
  if (norm == Normalization::kNone) return img.image;
  const std::vector<std::uint8_t> all(img.image.plane(), 1);
  return data::quantile_normalize(img.image, all);
}

std::string fmt(const char* spec, double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::vector<std::string> metric_names(int n_classes) {
  std::vector<std::string> out;
  for (const char* m : {"dice", "precision", "recall"}) {
    if (n_classes == 2) out.emplace_back(m);
    else
      for (int k = 1; k < n_classes; ++k) out.push_back(std::string(m) + "_c" + std::to_string(k));
  }
  return out;
}

// Everything later stages need from earlier ones.
class Run {
 public:
  Run(const ExperimentConfig& cfg, fs::path dir) : cfg_(cfg), dir_(std::move(dir)) {}

  const ExperimentConfig& cfg() const { return cfg_; }
  const fs::path& dir() const { return dir_; }
  std::uint64_t seed(SeedTag tag) const { return derive_seed({cfg_.seed, tag}); }

  const data::DomainSuite& suite() {
    if (!suite_) suite_ = std::make_unique<data::DomainSuite>(data::read_corpus(dir_ / stage_dir(Stage::kData)));
    return *suite_;
  }
  diffusion::NoiseSchedule schedule() const {
    return diffusion::build_schedule(cfg_.schedule_steps, cfg_.beta_start, cfg_.beta_end);
  }
  const diffusion::Denoiser& model() {
    if (!model_) {
      model_ = std::make_unique<diffusion::Denoiser>(
          diffusion::load_denoiser((dir_ / stage_dir(Stage::kPretrain) / "denoiser.ckpt").string()));
      model_hash_ = diffusion::content_hash(*model_);
    }
    return *model_;
  }
  const std::string& model_hash() {
    model();
    return model_hash_;
  }

  std::vector<std::size_t> label_subset(std::size_t n) {
    return data::subsample_labels(suite().labeled_pool.size(), {n, seed(kTagLabels)});
  }

  // Latents of one image from a cache directory; computes missing entries.
  features::LatentStack latents(features::LatentCache& cache, const data::SyntheticImage& img,
                                const std::vector<std::size_t>& steps) {
    return cache.get(model(), model_hash(), prepare(img, cfg_.normalize), img.id,
                     features::TimestepSet(steps, cfg_.schedule_steps), schedule(), seed(kTagExtract));
  }

 private:
  const ExperimentConfig& cfg_;
  fs::path dir_;
  std::unique_ptr<data::DomainSuite> suite_;
  std::unique_ptr<diffusion::Denoiser> model_;
  std::string model_hash_;
};

features::LatentStack select_steps(const features::LatentStack& stack, const std::vector<std::size_t>& steps) {
  features::LatentStack out;
  out.image_id = stack.image_id;
  out.seed = stack.seed;
  std::vector<std::size_t> sorted = steps;
  std::sort(sorted.begin(), sorted.end());
  for (auto s : sorted) {
    out.steps.push_back(s);
    out.latents.push_back(stack.at_step(s));
  }
  return out;
}

std::string size_dir(std::size_t n) { return "n" + std::to_string(n); }

// ---------------------------------------------------------------- stages

void stage_data(Run& run, const fs::path& out) {
  const auto& c = run.cfg();
  const auto suite = data::generate_suite(c.domains, c.data, run.seed(kTagInit));
  data::write_corpus(out, suite);
}

void stage_pretrain(Run& run, const fs::path& out) {
  const auto& c = run.cfg();
  std::vector<Tensor> images;
  for (const auto& img : run.suite().unlabeled_train) images.push_back(prepare(img, c.normalize));
  diffusion::Denoiser model(c.denoiser());
  model.init(derive_seed({c.seed, kTagInit, 1}));
  const auto result = diffusion::train_ddpm(images, model, run.schedule(),
                                            {c.pretrain_steps, c.pretrain_batch, c.pretrain_lr, run.seed(kTagDdpm)});
  diffusion::save_denoiser((out / "denoiser.ckpt").string(), model);
  std::string losses = "step,loss\n";
  for (std::size_t i = 0; i < result.losses.size(); ++i)
    losses += std::to_string(i + 1) + "," + fmt("%.9g", result.losses[i]) + "\n";
  write_file_atomic((out / "losses.csv").string(), losses);
}

void stage_extract(Run& run, const fs::path& out) {
  const auto& c = run.cfg();
  const auto steps = c.extraction_steps();
  const auto sizes = c.resolved_sizes();
  features::LatentCache cache((out / "cache").string());
  const auto& suite = run.suite();
  std::string index = "image_id,split\n";
  for (auto i : run.label_subset(*std::max_element(sizes.begin(), sizes.end()))) {
    run.latents(cache, suite.labeled_pool[i], steps);
    index += std::to_string(suite.labeled_pool[i].id) + ",labeled_pool\n";
  }
  for (std::size_t s = 2; s < 5; ++s)
    for (const auto& img : suite.split(s)) {
      run.latents(cache, img, steps);
      index += std::to_string(img.id) + "," + data::DomainSuite::kSplitNames[s] + "\n";
    }
  write_file_atomic((out / "index.csv").string(), index);
}

bool wants(const ExperimentConfig& c, HeadKind::Type t) {
  return std::any_of(c.heads.begin(), c.heads.end(), [&](const HeadKind& h) { return h.type == t; });
}

bool wants_tedm(const ExperimentConfig& c) {
  return wants(c, HeadKind::Type::kTedm) || wants(c, HeadKind::Type::kTedmSingle);
}

void stage_train_heads(Run& run, const fs::path& out, const std::function<void(const std::string&)>& log) {
  const auto& c = run.cfg();
  const int k = c.n_classes();
  features::LatentCache cache((run.dir() / stage_dir(Stage::kExtract) / "cache").string());
  const auto& pool = run.suite().labeled_pool;
  const features::TimestepSet tedm_steps(c.tedm_steps, c.schedule_steps);
  const features::TimestepSet ledm_steps(c.ledm_steps, c.schedule_steps);
  const heads::HeadTrainConfig head_cfg{c.head_steps, c.head_batch_pixels, c.head_lr, 0, c.head_hidden};

  for (std::size_t n : c.resolved_sizes()) {
    const auto subset = run.label_subset(n);
    const fs::path dir = out / size_dir(n);
    fs::create_directories(dir);
    if (log) log("train-head: n=" + std::to_string(n));

    if (wants(c, HeadKind::Type::kSupervised)) {
      std::vector<heads::LabeledImage> data;
      for (auto i : subset) data.push_back({prepare(pool[i], c.normalize), pool[i].mask});
      const auto model = heads::train_supervised_baseline(
          data, c.denoiser(), k,
          {c.supervised_steps, c.supervised_batch, c.supervised_lr, derive_seed({c.seed, kTagSupervised, n})});
      heads::save_head((dir / "supervised.ckpt").string(), model);
    }

    std::vector<heads::LabeledStack> stacks;
    for (auto i : subset) stacks.push_back({run.latents(cache, pool[i], c.extraction_steps()), pool[i].mask});

    if (wants_tedm(c)) {
      std::vector<heads::LabeledStack> data;
      for (const auto& s : stacks) data.push_back({select_steps(s.stack, c.tedm_steps), s.labels});
      auto cfg = head_cfg;
      cfg.seed = derive_seed({c.seed, kTagHead, n, 1});
      heads::save_head((dir / "tedm.ckpt").string(), heads::train_tedm(data, tedm_steps, k, cfg));
    }
    for (auto [type, name, steps] : {std::tuple{HeadKind::Type::kLedm, "ledm", &c.ledm_steps},
                                     std::tuple{HeadKind::Type::kLedme, "ledme", &c.tedm_steps}}) {
      if (!wants(c, type)) continue;
      std::vector<heads::LabeledFeatureMap> data;
      for (const auto& s : stacks) data.push_back({features::concat_features(select_steps(s.stack, *steps)), s.labels});
      heads::LedmTrainConfig cfg;
      cfg.head = head_cfg;
      cfg.head.seed = derive_seed({c.seed, kTagHead, n, type == HeadKind::Type::kLedm ? 2u : 3u});
      cfg.n_members = c.ledm_members;
      cfg.rule = c.ledm_rule == "majority" ? heads::EnsembleRule::kMajority : heads::EnsembleRule::kMeanSoftmax;
      auto head = heads::train_ledm(data, k, cfg);
      head.steps = features::TimestepSet(*steps, c.schedule_steps);
      heads::save_head((dir / (std::string(name) + ".ckpt")).string(), head);
    }
    for (auto t : c.probe_steps) {
      std::vector<heads::ProbeSample> data;
      for (const auto& s : stacks) data.push_back({s.stack.at_step(t), s.labels, t});
      const heads::ProbeTrainConfig cfg{c.probe_max_iterations, c.probe_max_pixels, 1e-7,
                                        derive_seed({c.seed, kTagProbe, n, t})};
      heads::save_head((dir / ("probe_t" + std::to_string(t) + ".ckpt")).string(),
                       heads::train_probe(data, t, c.probe_lambda, k, cfg));
    }
  }
  require(cache.computed() == 0, ErrorCode::kStorageError, "latent cache is incomplete; rerun extract");
}

struct LoadedHeads {
  std::optional<heads::SupervisedModel> supervised;
  std::optional<heads::TedmHead> tedm;
  std::optional<heads::LedmHead> ledm, ledme;
  std::map<std::size_t, heads::RidgeProbe> probes;
};

void stage_evaluate(Run& run, const fs::path& out, const std::function<void(const std::string&)>& log) {
  const auto& c = run.cfg();
  const auto sizes = c.resolved_sizes();
  const fs::path head_dir = run.dir() / stage_dir(Stage::kTrainHeads);
  std::map<std::size_t, LoadedHeads> loaded;
  for (auto n : sizes) {
    auto& h = loaded[n];
    const auto dir = head_dir / size_dir(n);
    if (wants(c, HeadKind::Type::kSupervised)) h.supervised = heads::load_supervised((dir / "supervised.ckpt").string());
    if (wants_tedm(c)) h.tedm = heads::load_tedm_head((dir / "tedm.ckpt").string());
    if (wants(c, HeadKind::Type::kLedm)) h.ledm = heads::load_ledm_head((dir / "ledm.ckpt").string());
    if (wants(c, HeadKind::Type::kLedme)) h.ledme = heads::load_ledm_head((dir / "ledme.ckpt").string());
    for (auto t : c.probe_steps) h.probes[t] = heads::load_probe((dir / ("probe_t" + std::to_string(t) + ".ckpt")).string());
  }

  features::LatentCache cache((run.dir() / stage_dir(Stage::kExtract) / "cache").string());
  const auto names = metric_names(c.n_classes());
  const std::size_t per = names.size() / 3;
  std::string heads_csv = "model,n_train,domain,metric,image_id,value\n";
  std::string probes_csv = heads_csv;
  auto emit = [&](std::string& csv, const std::string& model, std::size_t n, const char* domain, std::size_t id,
                  const heads::Prediction& pred, const heads::LabelMask& gt) {
    const auto m = eval::evaluate_mask(pred.mask, gt);
    for (std::size_t k = 0; k < m.size(); ++k) {
      const double values[3]{m[k].dice, m[k].precision, m[k].recall};
      for (std::size_t j = 0; j < 3; ++j)
        csv += model + "," + std::to_string(n) + "," + domain + "," + names[j * per + k] + "," + std::to_string(id) +
               "," + fmt("%.17g", values[j]) + "\n";
    }
  };

  const auto& suite = run.suite();
  std::string provenance = "seed " + std::to_string(c.seed) + "\nconfig_hash " + c.hash() + "\n";
  for (auto n : sizes) {
    provenance += "labels n=" + std::to_string(n);
    for (auto i : run.label_subset(n)) provenance += " " + std::to_string(suite.labeled_pool[i].id);
    provenance += "\n";
  }
  for (std::size_t s = 2; s < 5; ++s) {
    const char* domain = domain_label(s);
    if (log) log(std::string("evaluate: ") + domain);
    provenance += std::string("test ") + domain;
    for (const auto& img : suite.split(s)) {
      provenance += " " + std::to_string(img.id);
      const auto stack = run.latents(cache, img, c.extraction_steps());
      const Tensor x = prepare(img, c.normalize);
      for (auto n : sizes) {
        const auto& h = loaded.at(n);
        for (const auto& kind : c.heads) {
          heads::Prediction p;
          switch (kind.type) {
            case HeadKind::Type::kSupervised: p = heads::predict_supervised(x, *h.supervised); break;
            case HeadKind::Type::kLedm:
              p = heads::predict_ledm(features::concat_features(select_steps(stack, c.ledm_steps)), *h.ledm);
              break;
            case HeadKind::Type::kLedme:
              p = heads::predict_ledm(features::concat_features(select_steps(stack, c.tedm_steps)), *h.ledme);
              break;
            case HeadKind::Type::kTedm: p = heads::predict_vote(select_steps(stack, c.tedm_steps), *h.tedm); break;
            case HeadKind::Type::kTedmSingle:
              p = heads::predict_vote(select_steps(stack, c.tedm_steps), *h.tedm,
                                      features::TimestepSet({kind.step}, c.schedule_steps));
              break;
          }
          emit(heads_csv, kind.name(), n, domain, img.id, p, img.mask);
        }
        for (const auto& [t, probe] : h.probes)
          emit(probes_csv, "probe@" + std::to_string(t), n, domain, img.id,
               heads::predict_probe(stack.at_step(t), probe), img.mask);
      }
    }
    provenance += "\n";
  }
  require(cache.computed() == 0, ErrorCode::kStorageError, "latent cache is incomplete; rerun extract");
  write_file_atomic((out / "metrics.csv").string(), heads_csv);
  write_file_atomic((out / "probe_metrics.csv").string(), probes_csv);
  write_file_atomic((out / "provenance.txt").string(), provenance);
}

void stage_report(Run& run, const fs::path& out, RunManifest& manifest) {
  manifest.results.clear();
  for (auto f : {ReportFormat::kCsv, ReportFormat::kText, ReportFormat::kSvg})
    for (const auto& name : emit_report(manifest, run.dir(), out, f))
      manifest.results.push_back(std::string(stage_dir(Stage::kReport)) + "/" + name);

  std::string cost = "head,denoiser_forwards,denoiser_macs,mlp_input,mlp_evaluations,mlp_macs_per_pixel,n_pixels,total_macs\n";
  std::vector<std::string> kinds;
  for (const auto& h : run.cfg().heads) kinds.push_back(h.name());
  for (const auto& kind : kinds) {
    const auto r = estimate_cost(run.cfg(), kind);
    cost += r.head + "," + std::to_string(r.denoiser_forwards) + "," + fmt("%.0f", r.denoiser_macs) + "," +
            std::to_string(r.mlp_input) + "," + std::to_string(r.mlp_evaluations) + "," +
            fmt("%.0f", r.mlp_macs_per_pixel) + "," + std::to_string(r.n_pixels) + "," + fmt("%.0f", r.total_macs) +
            "\n";
  }
  write_file_atomic((out / "cost.csv").string(), cost);
  manifest.results.push_back(std::string(stage_dir(Stage::kReport)) + "/cost.csv");
}

}  // namespace

// ---------------------------------------------------------------- driver

RunManifest run_pipeline(const ExperimentConfig& config, const fs::path& run_dir, const PipelineOptions& options) {
  config.validate();
  auto log = [&](const std::string& s) {
    if (options.log) options.log(s);
  };
  std::error_code ec;
  fs::create_directories(run_dir, ec);
  require(!ec, ErrorCode::kStorageError, "cannot create " + run_dir.string());

  RunManifest prior;
  try {
    if (fs::exists(run_dir / kManifestFile)) prior = RunManifest::load(run_dir);
  } catch (const Error&) {
    log("ignoring unreadable manifest");
  }
  RunManifest manifest;
  manifest.config_text = config.canonical();
  manifest.config_hash = config.hash();
  manifest.seed = config.seed;
  manifest.results = prior.results;

  Run run(config, run_dir);
  std::string upstream;
  // Records of stages past `last` survive only while every stage run here
  // reproduced its previous output.
  bool chain_intact = true;
  auto with_tail = [&](RunManifest m) {
    if (chain_intact)
      for (const auto& s : prior.stages)
        if (!m.find(s.name)) m.stages.push_back(s);
    return m;
  };
  for (Stage stage : kAllStages) {
    const std::string name = stage_name(stage);
    const std::string input = Hasher().text(upstream).text(stage_inputs(config, stage)).hex();
    const StageRecord* old = prior.find(name);
    if (old && old->input_hash == input && artifacts_intact(run_dir, *old)) {
      StageRecord rec = *old;
      rec.skipped = true;
      manifest.stages.push_back(rec);
      upstream = rec.output_hash;
      log(name + ": up to date");
      if (stage == options.last) break;
      continue;
    }

    const fs::path final_dir = run_dir / stage_dir(stage);
    const fs::path tmp = run_dir / (std::string(".tmp-") + stage_dir(stage));
    const auto start = std::chrono::steady_clock::now();
    log(name + ": running");
    try {
      fs::remove_all(tmp);
      fs::create_directories(tmp);
      switch (stage) {
        case Stage::kData: stage_data(run, tmp); break;
        case Stage::kPretrain: stage_pretrain(run, tmp); break;
        case Stage::kExtract: stage_extract(run, tmp); break;
        case Stage::kTrainHeads: stage_train_heads(run, tmp, options.log); break;
        case Stage::kEvaluate: stage_evaluate(run, tmp, options.log); break;
        case Stage::kReport: stage_report(run, tmp, manifest); break;
      }
      fs::remove_all(final_dir);
      fs::rename(tmp, final_dir);
    } catch (const Error& e) {
      fs::remove_all(tmp, ec);
      throw StageFailure(stage, e.code(), e.what());
    } catch (const std::exception& e) {
      fs::remove_all(tmp, ec);
      throw StageFailure(stage, ErrorCode::kInternal, e.what());
    }

    StageRecord rec;
    rec.name = name;
    rec.input_hash = input;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    for (const auto& f : list_files(final_dir)) {
      const std::string rel = std::string(stage_dir(stage)) + "/" + f;
      rec.artifacts.push_back({rel, hash_file((run_dir / rel).string())});
    }
    rec.output_hash = output_hash(rec.artifacts);
    chain_intact = chain_intact && old && old->output_hash == rec.output_hash;
    upstream = rec.output_hash;
    manifest.stages.push_back(rec);
    write_file_atomic((run_dir / kManifestFile).string(), with_tail(manifest).serialize());
    log(name + ": done in " + fmt("%.1f", rec.seconds) + " s");
    if (stage == options.last) break;
  }

  // Everything this invocation touched must still be on disk as recorded.
  for (const auto& s : manifest.stages)
    for (const auto& a : s.artifacts)
      require(fs::exists(run_dir / a.path) && hash_file((run_dir / a.path).string()) == a.hash,
              ErrorCode::kManifestError, "artifact " + a.path + " does not match the manifest");
  if (!chain_intact && !manifest.find(stage_name(Stage::kReport))) manifest.results.clear();
  manifest = with_tail(manifest);
  write_file_atomic((run_dir / kManifestFile).string(), manifest.serialize());
  return manifest;
}

}  // namespace tedm::runner
