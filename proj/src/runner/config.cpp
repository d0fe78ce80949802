#include "tedm/runner/config.hpp"

#include <algorithm>
#include <charconv>
#include <functional>
#include <set>
#include <sstream>

#include "tedm/checkpoint.hpp"
#include "tedm/error.hpp"
#include "tedm/hash.hpp"

namespace tedm::runner {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
T number(const std::string& key, const std::string& text) {
  T v{};
  const std::string t = trim(text);
  const auto* end = t.data() + t.size();
  const auto res = std::from_chars(t.data(), end, v);
  require(!t.empty() && res.ec == std::errc{} && res.ptr == end, ErrorCode::kConfigError,
          "bad value for " + key + ": '" + text + "'");
  return v;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (const auto& x : v) {
    if (!out.empty()) out += ',';
    if constexpr (std::is_same_v<T, std::string>) out += x;
    else out += std::to_string(x);
  }
  return out;
}

template <typename T>
std::vector<T> numbers(const std::string& key, const std::string& text) {
  std::vector<T> out;
  for (const auto& item : split_list(text)) out.push_back(number<T>(key, item));
  return out;
}

using Cfg = ExperimentConfig;

struct Key {
  std::string name;
  std::function<std::string(const Cfg&)> get;
  std::function<void(Cfg&, const std::string&, const std::string&)> set;
};

template <typename T>
Key scalar(std::string name, T Cfg::*member) {
  return {std::move(name),
          [member](const Cfg& c) {
            if constexpr (std::is_floating_point_v<T>) return fmt(c.*member);
            else return std::to_string(c.*member);
          },
          [member](Cfg& c, const std::string& k, const std::string& v) { c.*member = number<T>(k, v); }};
}

template <typename T>
Key sizes_field(std::string name, T data::SuiteSizes::*member) {
  return {std::move(name),
          [member](const Cfg& c) {
            if constexpr (std::is_floating_point_v<T>) return fmt(c.data.*member);
            else return std::to_string(c.data.*member);
          },
          [member](Cfg& c, const std::string& k, const std::string& v) { c.data.*member = number<T>(k, v); }};
}

template <typename T>
Key list(std::string name, std::vector<T> Cfg::*member) {
  return {std::move(name), [member](const Cfg& c) { return join(c.*member); },
          [member](Cfg& c, const std::string& k, const std::string& v) {
            if constexpr (std::is_same_v<T, std::string>) c.*member = split_list(v);
            else c.*member = numbers<T>(k, v);
          }};
}

const std::vector<Key>& registry() {
  static const std::vector<Key> keys = [] {
    std::vector<Key> k;
    k.push_back(scalar("seed", &Cfg::seed));
    k.push_back(sizes_field("data.height", &data::SuiteSizes::height));
    k.push_back(sizes_field("data.width", &data::SuiteSizes::width));
    k.push_back(sizes_field("data.unlabeled", &data::SuiteSizes::unlabeled));
    k.push_back(sizes_field("data.labeled_pool", &data::SuiteSizes::labeled_pool));
    k.push_back(sizes_field("data.test", &data::SuiteSizes::test));
    k.push_back(sizes_field("data.unlabeled_b_fraction", &data::SuiteSizes::unlabeled_b_fraction));
    k.push_back({"data.normalize",
                 [](const Cfg& c) { return std::string(c.normalize == Normalization::kQuantile ? "quantile" : "none"); },
                 [](Cfg& c, const std::string& key, const std::string& v) {
                   const auto t = trim(v);
                   require(t == "quantile" || t == "none", ErrorCode::kConfigError,
                           key + " must be quantile or none");
                   c.normalize = t == "quantile" ? Normalization::kQuantile : Normalization::kNone;
                 }});
    for (int d = 0; d < 3; ++d) {
      const std::string prefix = std::string("domain.") + static_cast<char>('a' + d) + ".";
      for (const auto& field : data::DomainSpec::field_names())
        k.push_back({prefix + field, [d, field](const Cfg& c) { return c.domains[d].get(field); },
                     [d, field](Cfg& c, const std::string&, const std::string& v) { c.domains[d].set(field, trim(v)); }});
    }
    k.push_back(scalar("schedule.steps", &Cfg::schedule_steps));
    k.push_back(scalar("schedule.beta_start", &Cfg::beta_start));
    k.push_back(scalar("schedule.beta_end", &Cfg::beta_end));
    k.push_back(list("denoiser.widths", &Cfg::widths));
    k.push_back(scalar("denoiser.mid_width", &Cfg::mid_width));
    k.push_back(scalar("denoiser.time_dim", &Cfg::time_dim));
    k.push_back(list("denoiser.taps", &Cfg::taps));
    k.push_back(scalar("pretrain.steps", &Cfg::pretrain_steps));
    k.push_back(scalar("pretrain.batch_size", &Cfg::pretrain_batch));
    k.push_back(scalar("pretrain.learning_rate", &Cfg::pretrain_lr));
    k.push_back({"heads.kinds",
                 [](const Cfg& c) {
                   std::vector<std::string> names;
                   for (const auto& h : c.heads) names.push_back(h.name());
                   return join(names);
                 },
                 [](Cfg& c, const std::string&, const std::string& v) {
                   c.heads.clear();
                   for (const auto& name : split_list(v)) c.heads.push_back(HeadKind::parse(name));
                 }});
    k.push_back(list("heads.tedm_steps", &Cfg::tedm_steps));
    k.push_back(list("heads.ledm_steps", &Cfg::ledm_steps));
    k.push_back(list("heads.sizes", &Cfg::sizes));
    k.push_back(scalar("head.steps", &Cfg::head_steps));
    k.push_back(scalar("head.batch_pixels", &Cfg::head_batch_pixels));
    k.push_back(scalar("head.learning_rate", &Cfg::head_lr));
    k.push_back(list("head.hidden", &Cfg::head_hidden));
    k.push_back(scalar("head.ledm_members", &Cfg::ledm_members));
    k.push_back({"head.ledm_rule", [](const Cfg& c) { return c.ledm_rule; },
                 [](Cfg& c, const std::string& key, const std::string& v) {
                   const auto t = trim(v);
                   require(t == "mean" || t == "majority", ErrorCode::kConfigError, key + " must be mean or majority");
                   c.ledm_rule = t;
                 }});
    k.push_back(scalar("supervised.steps", &Cfg::supervised_steps));
    k.push_back(scalar("supervised.batch_size", &Cfg::supervised_batch));
    k.push_back(scalar("supervised.learning_rate", &Cfg::supervised_lr));
    k.push_back(list("probe.steps", &Cfg::probe_steps));
    k.push_back(scalar("probe.lambda", &Cfg::probe_lambda));
    k.push_back(scalar("probe.max_iterations", &Cfg::probe_max_iterations));
    k.push_back(scalar("probe.max_pixels", &Cfg::probe_max_pixels));
    k.push_back(scalar("eval.alpha", &Cfg::alpha));
    k.push_back(scalar("cost.denoiser_macs", &Cfg::cost_denoiser_macs));
    k.push_back(scalar("cost.n_pixels", &Cfg::cost_n_pixels));
    k.push_back(scalar("cost.n_latent", &Cfg::cost_n_latent));
    return k;
  }();
  return keys;
}

const Key& find_key(const std::string& name) {
  for (const auto& k : registry())
    if (k.name == name) return k;
  fail(ErrorCode::kConfigError, "unknown config key '" + name + "'");
}

void check_steps(const std::vector<std::size_t>& steps, std::size_t total, const std::string& what) {
  require(!steps.empty(), ErrorCode::kConfigError, what + " is empty");
  for (auto s : steps)
    require(s >= 1 && s <= total, ErrorCode::kConfigError,
            what + " contains " + std::to_string(s) + ", outside [1, " + std::to_string(total) + "]");
  require(std::set<std::size_t>(steps.begin(), steps.end()).size() == steps.size(), ErrorCode::kConfigError,
          what + " has repeated steps");
}

}  // namespace

HeadKind HeadKind::parse(const std::string& name) {
  if (name == "supervised") return {Type::kSupervised, 0};
  if (name == "ledm") return {Type::kLedm, 0};
  if (name == "ledme") return {Type::kLedme, 0};
  if (name == "tedm") return {Type::kTedm, 0};
  if (name.rfind("tedm@", 0) == 0) return {Type::kTedmSingle, number<std::size_t>("heads.kinds", name.substr(5))};
  fail(ErrorCode::kConfigError, "unknown head kind '" + name + "'");
}

std::string HeadKind::name() const {
  switch (type) {
    case Type::kSupervised: return "supervised";
    case Type::kLedm: return "ledm";
    case Type::kLedme: return "ledme";
    case Type::kTedm: return "tedm";
    case Type::kTedmSingle: return "tedm@" + std::to_string(step);
  }
  return "?";
}

ExperimentConfig::ExperimentConfig() {
  for (const char* h : {"supervised", "ledm", "ledme", "tedm", "tedm@1", "tedm@25"}) heads.push_back(HeadKind::parse(h));
}

void ExperimentConfig::set(const std::string& key, const std::string& value) { find_key(key).set(*this, key, value); }

std::string ExperimentConfig::get(const std::string& key) const { return find_key(key).get(*this); }

std::vector<std::string> ExperimentConfig::keys() {
  std::vector<std::string> out;
  for (const auto& k : registry()) out.push_back(k.name);
  return out;
}

void ExperimentConfig::validate() const {
  auto cfg_error = [](bool ok, const std::string& what) { require(ok, ErrorCode::kConfigError, what); };
  cfg_error(!heads.empty(), "heads.kinds is empty");
  cfg_error(!sizes.empty(), "heads.sizes is empty");
  cfg_error(schedule_steps >= 1, "schedule.steps must be positive");
  check_steps(tedm_steps, schedule_steps, "heads.tedm_steps");
  check_steps(ledm_steps, schedule_steps, "heads.ledm_steps");
  check_steps(probe_steps, schedule_steps, "probe.steps");
  for (const auto& h : heads)
    if (h.type == HeadKind::Type::kTedmSingle)
      cfg_error(std::find(tedm_steps.begin(), tedm_steps.end(), h.step) != tedm_steps.end(),
                h.name() + " names a step outside heads.tedm_steps");
  std::set<std::string> names;
  for (const auto& h : heads) cfg_error(names.insert(h.name()).second, "heads.kinds repeats " + h.name());
  resolved_sizes();
  cfg_error(pretrain_steps >= 1 && pretrain_batch >= 1 && pretrain_lr > 0, "pretrain settings must be positive");
  cfg_error(head_steps >= 1 && head_batch_pixels >= 1 && head_lr > 0, "head settings must be positive");
  cfg_error(ledm_members >= 1, "head.ledm_members must be positive");
  cfg_error(supervised_steps >= 1 && supervised_batch >= 1 && supervised_lr > 0,
            "supervised settings must be positive");
  cfg_error(probe_lambda >= 0 && probe_max_iterations >= 1 && probe_max_pixels >= 1, "probe settings out of range");
  cfg_error(alpha > 0 && alpha < 1, "eval.alpha must be in (0, 1)");
  cfg_error(cost_denoiser_macs >= 0, "cost.denoiser_macs must be >= 0");
  try {
    for (const auto& d : domains) d.validate();
    denoiser().validate();
    diffusion::build_schedule(schedule_steps, beta_start, beta_end);
  } catch (const Error& e) {
    fail(ErrorCode::kConfigError, e.what());
  }
  cfg_error(data.unlabeled >= 1 && data.labeled_pool >= 1 && data.test >= 1, "data split sizes must be positive");
}

std::string ExperimentConfig::canonical() const {
  std::string out;
  for (const auto& k : registry()) out += k.name + " = " + k.get(*this) + "\n";
  return out;
}

std::string ExperimentConfig::hash() const { return Hasher().text(canonical()).hex(); }

diffusion::DenoiserConfig ExperimentConfig::denoiser() const {
  diffusion::DenoiserConfig d;
  d.height = static_cast<int>(data.height);
  d.width = static_cast<int>(data.width);
  d.widths = widths;
  d.mid_width = mid_width;
  d.time_dim = time_dim;
  d.taps = taps;
  return d;
}

std::vector<std::size_t> ExperimentConfig::resolved_sizes() const {
  std::vector<std::size_t> out;
  for (const auto& s : sizes) {
    const std::size_t n = s == "full" ? data.labeled_pool : number<std::size_t>("heads.sizes", s);
    require(n >= 1 && n <= data.labeled_pool, ErrorCode::kConfigError,
            "training size " + s + " outside [1, data.labeled_pool]");
    require(std::find(out.begin(), out.end(), n) == out.end(), ErrorCode::kConfigError,
            "training size " + s + " repeated");
    out.push_back(n);
  }
  return out;
}

std::vector<std::size_t> ExperimentConfig::extraction_steps() const {
  std::set<std::size_t> steps(probe_steps.begin(), probe_steps.end());
  for (const auto& h : heads) {
    if (h.type == HeadKind::Type::kLedm) steps.insert(ledm_steps.begin(), ledm_steps.end());
    if (h.type == HeadKind::Type::kLedme || h.type == HeadKind::Type::kTedm ||
        h.type == HeadKind::Type::kTedmSingle)
      steps.insert(tedm_steps.begin(), tedm_steps.end());
  }
  return {steps.begin(), steps.end()};
}

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  std::set<std::string> seen;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto where = " (line " + std::to_string(lineno) + ")";
    if (line.front() == '[') {
      require(line.back() == ']', ErrorCode::kConfigError, "unterminated section header" + where);
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorCode::kConfigError, "expected key = value" + where);
    std::string key = trim(line.substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    require(seen.insert(key).second, ErrorCode::kConfigError, "repeated key '" + key + "'" + where);
    try {
      cfg.set(key, trim(line.substr(eq + 1)));
    } catch (const Error& e) {
      fail(ErrorCode::kConfigError, std::string(e.what()) + where);
    }
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  try {
    return parse_config(read_file(path));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kStorageError) fail(ErrorCode::kConfigError, "cannot read config " + path);
    throw;
  }
}

}  // namespace tedm::runner
