#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "tedm/data/synth.hpp"
#include "tedm/diffusion/unet.hpp"

namespace tedm::runner {

// Model names accepted in heads.kinds.
//   supervised   image-space baseline
//   ledm         concatenated features over heads.ledm_steps, MLP ensemble
//   ledme        the same over heads.tedm_steps
//   tedm         shared MLP over heads.tedm_steps, vote over all of them
//   tedm@<t>     the tedm head's prediction from step t alone
struct HeadKind {
  enum class Type { kSupervised, kLedm, kLedme, kTedm, kTedmSingle };
  Type type = Type::kTedm;
  std::size_t step = 0;  // kTedmSingle only

  static HeadKind parse(const std::string& name);
  std::string name() const;
  friend bool operator==(const HeadKind&, const HeadKind&) = default;
};

enum class Normalization { kNone, kQuantile };

struct ExperimentConfig {
  std::uint64_t seed = 0;

  data::SuiteSizes data;
  std::array<data::DomainSpec, 3> domains{data::default_domain_a(), data::default_domain_b(),
                                          data::default_domain_c()};
  Normalization normalize = Normalization::kQuantile;

  std::size_t schedule_steps = 1000;
  double beta_start = 1e-4, beta_end = 0.02;

  std::vector<int> widths{16, 32};
  int mid_width = 72;
  int time_dim = 32;
  std::vector<std::string> taps{"mid", "dec1", "dec0"};

  std::size_t pretrain_steps = 2000;
  std::size_t pretrain_batch = 4;
  double pretrain_lr = 1e-4;

  std::vector<HeadKind> heads;
  std::vector<std::size_t> tedm_steps{1, 10, 25, 50, 200, 400, 600, 800};
  std::vector<std::size_t> ledm_steps{50, 150, 250};
  std::vector<std::string> sizes{"1", "3", "6", "12", "full"};

  std::size_t head_steps = 2000;
  std::size_t head_batch_pixels = 256;
  double head_lr = 1e-3;
  std::vector<int> head_hidden{128, 32};
  std::size_t ledm_members = 10;
  std::string ledm_rule = "mean";

  std::size_t supervised_steps = 2000;
  std::size_t supervised_batch = 4;
  double supervised_lr = 1e-4;

  std::vector<std::size_t> probe_steps{1, 10, 25, 50, 200, 400, 600, 800};
  double probe_lambda = 1e-3;
  std::size_t probe_max_iterations = 200;
  std::size_t probe_max_pixels = 32768;

  double alpha = 0.05;

  // Cost overrides; 0 means derive from the config.
  double cost_denoiser_macs = 0;
  std::size_t cost_n_pixels = 0;
  std::size_t cost_n_latent = 0;

  ExperimentConfig();

  // Dotted keys; see keys() for the full list.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static std::vector<std::string> keys();

  void validate() const;
  // One "key = value" line per key, in keys() order.
  std::string canonical() const;
  std::string hash() const;

  diffusion::DenoiserConfig denoiser() const;
  std::vector<std::size_t> resolved_sizes() const;
  // Steps whose latents any stage needs, ascending.
  std::vector<std::size_t> extraction_steps() const;
  int n_classes() const { return domains[0].n_classes; }
};

// "key = value" lines; '#' starts a comment; "[section]" prefixes later keys
// with "section.". Unknown and repeated keys are errors.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);

}  // namespace tedm::runner
