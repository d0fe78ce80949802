#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tedm/heads/heads.hpp"
#include "tedm/tensor.hpp"

namespace tedm::data {

// Appearance and shape statistics of one acquisition domain. Lengths are
// fractions of the image side.
struct DomainSpec {
  int n_classes = 2;  // background plus n_classes-1 shape classes
  int min_shapes = 1, max_shapes = 3;
  double min_radius = 0.12, max_radius = 0.28;
  double eccentricity = 0.6;  // upper bound, drawn uniformly per ellipse
  double background_mean = -0.5;
  double foreground_mean = 0.5;
  double class_spacing = 0.3;  // mean offset between successive shape classes
  double contrast = 1.0;       // global gain
  double noise = 0.1;
  double texture_frequency = 3.0;  // cycles per image side
  double texture_amplitude = 0.15;
  double bias_field = 0.1;

  void validate() const;
  double class_mean(int cls) const;

  // Field access by name, for configs and manifests. set() returns false on
  // an unknown key and throws ConfigError on a malformed value.
  static const std::vector<std::string>& field_names();
  bool set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  // Space-separated key=value pairs, round-trippable through parse().
  std::string describe() const;
  static DomainSpec parse(const std::string& text);
  friend bool operator==(const DomainSpec&, const DomainSpec&) = default;
};

// Default tiers: B shifts appearance only, C also shifts shapes.
DomainSpec default_domain_a();
DomainSpec default_domain_b();
DomainSpec default_domain_c();

struct Ellipse {
  double cy = 0, cx = 0, ry = 0, rx = 0, angle = 0;
  int cls = 1;
  bool contains(double y, double x) const;
};

enum class Domain : std::uint8_t { kA = 0, kB = 1, kC = 2 };
char domain_letter(Domain d);

struct SyntheticImage {
  std::size_t id = 0;
  Domain domain = Domain::kA;
  Tensor image;  // 1 x H x W
  heads::LabelMask mask;
  std::vector<Ellipse> shapes;  // painted in order; later shapes cover earlier ones
};

SyntheticImage generate_image(const DomainSpec& spec, std::size_t height, std::size_t width, std::size_t id,
                              std::uint64_t seed);

struct SuiteSizes {
  std::size_t unlabeled = 2000, labeled_pool = 64, test = 64;
  std::size_t height = 64, width = 64;
  // Share of the unlabeled set drawn from domain B.
  double unlabeled_b_fraction = 0.5;
};

struct DomainSuite {
  std::array<DomainSpec, 3> specs;
  SuiteSizes sizes;
  std::uint64_t seed = 0;
  std::vector<SyntheticImage> unlabeled_train, labeled_pool, test_in, test_shift_classifier, test_shift_both;

  static constexpr std::array<const char*, 5> kSplitNames{"unlabeled_train", "labeled_pool", "test_in",
                                                          "test_shift_classifier", "test_shift_both"};
  const std::vector<SyntheticImage>& split(std::size_t i) const;
  std::vector<SyntheticImage>& split(std::size_t i);
};

DomainSuite generate_suite(const std::array<DomainSpec, 3>& specs, const SuiteSizes& sizes, std::uint64_t seed);

// Corpus layout: <dir>/manifest.txt and <dir>/<split>/images.ckpt.
void write_corpus(const std::filesystem::path& dir, const DomainSuite& suite);
DomainSuite read_corpus(const std::filesystem::path& dir);

struct AffineMap {
  double a = 1.0, b = 0.0;
};

// Linear-interpolated quantile of the masked values (numpy's default rule).
double masked_quantile(std::span<const float> values, std::span<const std::uint8_t> mask, double q);

// Per channel, maps the masked q_low/q_high quantiles to -1/+1. Unmasked
// pixels are left as they are.
Tensor quantile_normalize(const Tensor& image, std::span<const std::uint8_t> mask, double q_low = 0.01,
                          double q_high = 0.99, std::vector<AffineMap>* maps = nullptr);

// (x - mean) / sqrt(variance) per channel; single values broadcast.
Tensor standardize(const Tensor& image, std::span<const double> mean, std::span<const double> variance);

struct LabelBudget {
  std::size_t n = 1;
  std::uint64_t seed = 0;
};

// Indices into the pool. A fixed seed gives nested subsets as n shrinks.
std::vector<std::size_t> subsample_labels(std::size_t pool_size, const LabelBudget& budget);

}  // namespace tedm::data
