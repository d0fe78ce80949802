#include "tedm/data/synth.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>

#include "tedm/checkpoint.hpp"
#include "tedm/error.hpp"
#include "tedm/hash.hpp"
#include "tedm/rng.hpp"

namespace tedm::data {

namespace {

constexpr double kPi = std::numbers::pi;

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  const auto res = std::from_chars(text.data(), end, v);
  require(res.ec == std::errc{} && res.ptr == end, ErrorCode::kConfigError,
          "bad value for " + key + ": '" + text + "'");
  return v;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Field {
  const char* name;
  std::function<std::string(const DomainSpec&)> get;
  std::function<void(DomainSpec&, const std::string&)> set;
};

template <typename M>
Field make_field(const char* name, M DomainSpec::*member) {
  return {name,
          [member](const DomainSpec& s) {
            if constexpr (std::is_same_v<M, int>) return std::to_string(s.*member);
            else return format_double(s.*member);
          },
          [member, name](DomainSpec& s, const std::string& v) { s.*member = parse_number<M>(name, v); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      make_field("n_classes", &DomainSpec::n_classes),
      make_field("min_shapes", &DomainSpec::min_shapes),
      make_field("max_shapes", &DomainSpec::max_shapes),
      make_field("min_radius", &DomainSpec::min_radius),
      make_field("max_radius", &DomainSpec::max_radius),
      make_field("eccentricity", &DomainSpec::eccentricity),
      make_field("background_mean", &DomainSpec::background_mean),
      make_field("foreground_mean", &DomainSpec::foreground_mean),
      make_field("class_spacing", &DomainSpec::class_spacing),
      make_field("contrast", &DomainSpec::contrast),
      make_field("noise", &DomainSpec::noise),
      make_field("texture_frequency", &DomainSpec::texture_frequency),
      make_field("texture_amplitude", &DomainSpec::texture_amplitude),
      make_field("bias_field", &DomainSpec::bias_field),
  };
  return table;
}

}  // namespace

void DomainSpec::validate() const {
  auto check = [](bool ok, const std::string& what) { require(ok, ErrorCode::kInvalidSpec, "domain spec: " + what); };
  check(n_classes >= 2 && n_classes <= 255, "n_classes must be in [2, 255]");
  check(min_shapes >= 1 && min_shapes <= max_shapes, "shape count range is empty");
  check(std::isfinite(min_radius) && std::isfinite(max_radius) && min_radius > 0 && min_radius <= max_radius &&
            max_radius <= 0.5,
        "radius range must satisfy 0 < min <= max <= 0.5");
  check(eccentricity >= 0 && eccentricity < 1, "eccentricity must be in [0, 1)");
  for (double v : {background_mean, foreground_mean, class_spacing, contrast, texture_frequency, texture_amplitude,
                   bias_field})
    check(std::isfinite(v), "intensity parameters must be finite");
  check(std::isfinite(noise) && noise >= 0, "noise must be >= 0");
  check(texture_frequency >= 0 && texture_amplitude >= 0 && bias_field >= 0,
        "texture and bias magnitudes must be >= 0");
}

double DomainSpec::class_mean(int cls) const {
  return cls == 0 ? background_mean : foreground_mean + (cls - 1) * class_spacing;
}

const std::vector<std::string>& DomainSpec::field_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.emplace_back(f.name);
    return out;
  }();
  return names;
}

bool DomainSpec::set(const std::string& key, const std::string& value) {
  for (const auto& f : fields())
    if (key == f.name) {
      f.set(*this, value);
      return true;
    }
  return false;
}

std::string DomainSpec::get(const std::string& key) const {
  for (const auto& f : fields())
    if (key == f.name) return f.get(*this);
  fail(ErrorCode::kConfigError, "unknown domain field " + key);
}

std::string DomainSpec::describe() const {
  std::string out;
  for (const auto& f : fields()) {
    if (!out.empty()) out += ' ';
    out += std::string(f.name) + "=" + f.get(*this);
  }
  return out;
}

DomainSpec DomainSpec::parse(const std::string& text) {
  DomainSpec spec;
  std::istringstream in(text);
  std::string token;
  while (in >> token) {
    const auto eq = token.find('=');
    require(eq != std::string::npos, ErrorCode::kConfigError, "expected key=value, got '" + token + "'");
    require(spec.set(token.substr(0, eq), token.substr(eq + 1)), ErrorCode::kConfigError,
            "unknown domain field " + token.substr(0, eq));
  }
  return spec;
}

DomainSpec default_domain_a() { return {}; }

DomainSpec default_domain_b() {
  DomainSpec s;
  s.background_mean = -0.3;
  s.foreground_mean = 0.2;
  s.contrast = 1.4;
  s.noise = 0.2;
  s.texture_frequency = 5.0;
  s.texture_amplitude = 0.25;
  s.bias_field = 0.25;
  return s;
}

DomainSpec default_domain_c() {
  DomainSpec s = default_domain_b();
  s.min_shapes = 2;
  s.max_shapes = 5;
  s.min_radius = 0.08;
  s.max_radius = 0.2;
  s.eccentricity = 0.85;
  return s;
}

char domain_letter(Domain d) { return static_cast<char>('A' + static_cast<int>(d)); }

bool Ellipse::contains(double y, double x) const {
  const double dy = y - cy, dx = x - cx;
  const double c = std::cos(angle), s = std::sin(angle);
  const double u = (c * dx + s * dy) / rx, v = (-s * dx + c * dy) / ry;
  return u * u + v * v <= 1.0;
}

SyntheticImage generate_image(const DomainSpec& spec, std::size_t height, std::size_t width, std::size_t id,
                              std::uint64_t seed) {
  spec.validate();
  require(height > 0 && width > 0, ErrorCode::kInvalidSpec, "image size must be positive");
  const double side = static_cast<double>(std::min(height, width));
  require(spec.min_radius * side >= 1.0, ErrorCode::kInvalidSpec, "min_radius is below one pixel");

  Rng rng(derive_seed({seed, id}));
  SyntheticImage out{id, Domain::kA, Tensor({1, height, width}), heads::LabelMask(height, width, spec.n_classes), {}};

  const auto n_shapes = rng.uniform_int(spec.min_shapes, spec.max_shapes);
  for (std::int64_t i = 0; i < n_shapes; ++i) {
    Ellipse e;
    const double major = rng.uniform(spec.min_radius, spec.max_radius) * side;
    const double ecc = rng.uniform(0.0, spec.eccentricity);
    e.rx = major;
    e.ry = major * std::sqrt(1.0 - ecc * ecc);
    e.angle = rng.uniform(0.0, kPi);
    e.cy = rng.uniform(0.2, 0.8) * static_cast<double>(height);
    e.cx = rng.uniform(0.2, 0.8) * static_cast<double>(width);
    e.cls = static_cast<int>(rng.uniform_int(1, spec.n_classes - 1));
    out.shapes.push_back(e);
  }

  const double tex_theta = rng.uniform(0.0, kPi), tex_phase = rng.uniform(0.0, 2 * kPi);
  const double bias_theta = rng.uniform(0.0, 2 * kPi), bias_phase = rng.uniform(0.0, 2 * kPi);
  const double tex_k = 2 * kPi * spec.texture_frequency / side, bias_k = kPi / side;
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(x) + 0.5;
      int cls = 0;
      for (const auto& e : out.shapes)
        if (e.contains(py, px)) cls = e.cls;
      out.mask.labels[y * width + x] = static_cast<std::uint8_t>(cls);
      const double texture =
          spec.texture_amplitude * std::sin(tex_k * (px * std::cos(tex_theta) + py * std::sin(tex_theta)) + tex_phase);
      const double bias =
          spec.bias_field * std::cos(bias_k * (px * std::cos(bias_theta) + py * std::sin(bias_theta)) + bias_phase);
      const double v = spec.contrast * (spec.class_mean(cls) + texture + bias) + spec.noise * rng.normal();
      out.image.at(0, y, x) = static_cast<float>(v);
    }
  }
  return out;
}

const std::vector<SyntheticImage>& DomainSuite::split(std::size_t i) const {
  switch (i) {
    case 0: return unlabeled_train;
    case 1: return labeled_pool;
    case 2: return test_in;
    case 3: return test_shift_classifier;
    case 4: return test_shift_both;
  }
  fail(ErrorCode::kRangeError, "split index out of range");
}

std::vector<SyntheticImage>& DomainSuite::split(std::size_t i) {
  return const_cast<std::vector<SyntheticImage>&>(std::as_const(*this).split(i));
}

DomainSuite generate_suite(const std::array<DomainSpec, 3>& specs, const SuiteSizes& sizes, std::uint64_t seed) {
  for (const auto& s : specs) s.validate();
  require(specs[1].n_classes == specs[0].n_classes && specs[2].n_classes == specs[0].n_classes,
          ErrorCode::kInvalidSpec, "domains must share a class count");
  require(sizes.unlabeled > 0 && sizes.labeled_pool > 0 && sizes.test > 0, ErrorCode::kInvalidSpec,
          "split sizes must be positive");
  require(sizes.unlabeled_b_fraction >= 0 && sizes.unlabeled_b_fraction <= 1, ErrorCode::kInvalidSpec,
          "unlabeled_b_fraction must be in [0, 1]");

  DomainSuite suite{specs, sizes, seed, {}, {}, {}, {}, {}};
  std::size_t next_id = 0;
  auto make = [&](Domain d) {
    auto img = generate_image(specs[static_cast<int>(d)], sizes.height, sizes.width, next_id++, seed);
    img.domain = d;
    return img;
  };
  const double f = sizes.unlabeled_b_fraction;
  for (std::size_t i = 0; i < sizes.unlabeled; ++i) {
    // exactly floor(n * f) domain-B images, spread evenly
    const bool b = std::floor(static_cast<double>(i + 1) * f) > std::floor(static_cast<double>(i) * f);
    suite.unlabeled_train.push_back(make(b ? Domain::kB : Domain::kA));
  }
  for (std::size_t i = 0; i < sizes.labeled_pool; ++i) suite.labeled_pool.push_back(make(Domain::kA));
  for (std::size_t i = 0; i < sizes.test; ++i) suite.test_in.push_back(make(Domain::kA));
  for (std::size_t i = 0; i < sizes.test; ++i) suite.test_shift_classifier.push_back(make(Domain::kB));
  for (std::size_t i = 0; i < sizes.test; ++i) suite.test_shift_both.push_back(make(Domain::kC));
  return suite;
}

namespace {

constexpr const char* kManifestHeader = "tedm-corpus 1";

Tensor shapes_tensor(const std::vector<Ellipse>& shapes) {
  Tensor t({shapes.size(), 6});
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto& e = shapes[i];
    const double v[6]{e.cy, e.cx, e.ry, e.rx, e.angle, static_cast<double>(e.cls)};
    for (int k = 0; k < 6; ++k) t[i * 6 + k] = static_cast<float>(v[k]);
  }
  return t;
}

std::vector<Ellipse> shapes_from(const Tensor& t) {
  std::vector<Ellipse> out;
  for (std::size_t i = 0; i < t.dim(0); ++i)
    out.push_back({t[i * 6], t[i * 6 + 1], t[i * 6 + 2], t[i * 6 + 3], t[i * 6 + 4], static_cast<int>(t[i * 6 + 5])});
  return out;
}

}  // namespace

void write_corpus(const std::filesystem::path& dir, const DomainSuite& suite) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, ErrorCode::kStorageError, "cannot create " + dir.string());

  std::ostringstream manifest;
  manifest << kManifestHeader << "\n"
           << "seed " << suite.seed << "\n"
           << "height " << suite.sizes.height << "\n"
           << "width " << suite.sizes.width << "\n"
           << "unlabeled_b_fraction " << format_double(suite.sizes.unlabeled_b_fraction) << "\n";
  for (int d = 0; d < 3; ++d)
    manifest << "spec " << domain_letter(static_cast<Domain>(d)) << " " << suite.specs[d].describe() << "\n";

  for (std::size_t s = 0; s < DomainSuite::kSplitNames.size(); ++s) {
    const auto& images = suite.split(s);
    const std::string name = DomainSuite::kSplitNames[s];
    Checkpoint ck;
    ck.kind = "corpus_split";
    ck.set_meta("split", name);
    std::string domains;
    manifest << "split " << name << " " << images.size();
    for (const auto& img : images) {
      manifest << " " << img.id;
      domains += domain_letter(img.domain);
      Tensor mask({img.mask.height, img.mask.width});
      for (std::size_t i = 0; i < img.mask.pixels(); ++i) mask[i] = img.mask.labels[i];
      ck.tensors.emplace_back("image/" + std::to_string(img.id), img.image);
      ck.tensors.emplace_back("mask/" + std::to_string(img.id), std::move(mask));
      ck.tensors.emplace_back("shapes/" + std::to_string(img.id), shapes_tensor(img.shapes));
    }
    manifest << "\n";
    ck.set_meta("domains", domains.empty() ? "-" : domains);
    std::filesystem::create_directories(dir / name, ec);
    require(!ec, ErrorCode::kStorageError, "cannot create " + (dir / name).string());
    write_checkpoint((dir / name / "images.ckpt").string(), ck);
  }
  write_file_atomic((dir / "manifest.txt").string(), manifest.str());
}

DomainSuite read_corpus(const std::filesystem::path& dir) {
  std::istringstream in(read_file((dir / "manifest.txt").string()));
  std::string line;
  require(std::getline(in, line) && line == kManifestHeader, ErrorCode::kManifestError,
          "not a corpus manifest: " + dir.string());
  DomainSuite suite;
  std::vector<std::vector<std::size_t>> ids(DomainSuite::kSplitNames.size());
  std::vector<bool> seen(ids.size(), false);
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    std::string rest;
    std::getline(ls >> std::ws, rest);
    if (key == "seed") suite.seed = parse_number<std::uint64_t>(key, rest);
    else if (key == "height") suite.sizes.height = parse_number<std::size_t>(key, rest);
    else if (key == "width") suite.sizes.width = parse_number<std::size_t>(key, rest);
    else if (key == "unlabeled_b_fraction") suite.sizes.unlabeled_b_fraction = parse_number<double>(key, rest);
    else if (key == "spec") {
      require(rest.size() > 2 && rest[0] >= 'A' && rest[0] <= 'C', ErrorCode::kManifestError, "bad spec line");
      suite.specs[rest[0] - 'A'] = DomainSpec::parse(rest.substr(2));
    } else if (key == "split") {
      std::istringstream ss(rest);
      std::string name;
      std::size_t count = 0;
      ss >> name >> count;
      const auto it = std::find(DomainSuite::kSplitNames.begin(), DomainSuite::kSplitNames.end(), name);
      require(it != DomainSuite::kSplitNames.end(), ErrorCode::kManifestError, "unknown split " + name);
      const auto s = static_cast<std::size_t>(it - DomainSuite::kSplitNames.begin());
      seen[s] = true;
      for (std::size_t i = 0, id; i < count && ss >> id; ++i) ids[s].push_back(id);
      require(ids[s].size() == count, ErrorCode::kManifestError, "split " + name + " lists too few ids");
    } else if (!key.empty()) {
      fail(ErrorCode::kManifestError, "unknown manifest key " + key);
    }
  }
  for (std::size_t s = 0; s < ids.size(); ++s)
    require(seen[s], ErrorCode::kManifestError, std::string("manifest lacks split ") + DomainSuite::kSplitNames[s]);
  suite.sizes.unlabeled = ids[0].size();
  suite.sizes.labeled_pool = ids[1].size();
  suite.sizes.test = ids[2].size();

  for (std::size_t s = 0; s < ids.size(); ++s) {
    const auto ck = read_checkpoint((dir / DomainSuite::kSplitNames[s] / "images.ckpt").string());
    require(ck.kind == "corpus_split", ErrorCode::kManifestError, "unexpected archive kind " + ck.kind);
    const auto& domains = ck.meta_value("domains");
    require(domains.size() == ids[s].size() || (ids[s].empty() && domains == "-"), ErrorCode::kManifestError,
            "domain tags do not match the manifest");
    auto& images = suite.split(s);
    for (std::size_t i = 0; i < ids[s].size(); ++i) {
      const auto id = std::to_string(ids[s][i]);
      SyntheticImage img;
      img.id = ids[s][i];
      img.domain = static_cast<Domain>(domains[i] - 'A');
      img.image = ck.tensor("image/" + id);
      const auto& mask = ck.tensor("mask/" + id);
      img.mask = heads::LabelMask(mask.dim(0), mask.dim(1), suite.specs[0].n_classes);
      for (std::size_t p = 0; p < mask.size(); ++p) img.mask.labels[p] = static_cast<std::uint8_t>(mask[p]);
      img.shapes = shapes_from(ck.tensor("shapes/" + id));
      images.push_back(std::move(img));
    }
  }
  return suite;
}

double masked_quantile(std::span<const float> values, std::span<const std::uint8_t> mask, double q) {
  require(values.size() == mask.size(), ErrorCode::kShapeError, "mask does not match image plane");
  require(q >= 0 && q <= 1, ErrorCode::kRangeError, "quantile outside [0, 1]");
  std::vector<double> v;
  for (std::size_t i = 0; i < values.size(); ++i)
    if (mask[i]) v.push_back(values[i]);
  require(!v.empty(), ErrorCode::kShapeError, "quantile mask is empty");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

Tensor quantile_normalize(const Tensor& image, std::span<const std::uint8_t> mask, double q_low, double q_high,
                          std::vector<AffineMap>* maps) {
  require(image.rank() == 3, ErrorCode::kShapeError, "expected a C x H x W image");
  require(mask.size() == image.plane(), ErrorCode::kShapeError, "mask does not match image plane");
  require(q_low < q_high, ErrorCode::kRangeError, "q_low must be below q_high");
  Tensor out = image;
  if (maps) maps->clear();
  const std::size_t plane = image.plane();
  for (std::size_t c = 0; c < image.channels(); ++c) {
    const auto values = image.values().subspan(c * plane, plane);
    const double lo = masked_quantile(values, mask, q_low), hi = masked_quantile(values, mask, q_high);
    require(hi > lo, ErrorCode::kDegenerateIntensity, "masked quantiles coincide");
    AffineMap m{2.0 / (hi - lo), 0.0};
    m.b = -1.0 - m.a * lo;
    for (std::size_t i = 0; i < plane; ++i)
      if (mask[i]) out[c * plane + i] = static_cast<float>(m.a * values[i] + m.b);
    if (maps) maps->push_back(m);
  }
  return out;
}

Tensor standardize(const Tensor& image, std::span<const double> mean, std::span<const double> variance) {
  require(image.rank() == 3, ErrorCode::kShapeError, "expected a C x H x W image");
  const std::size_t c_count = image.channels();
  auto pick = [&](std::span<const double> v, std::size_t c, const char* what) {
    require(v.size() == 1 || v.size() == c_count, ErrorCode::kShapeError,
            std::string(what) + " must have one value or one per channel");
    return v.size() == 1 ? v[0] : v[c];
  };
  Tensor out = image;
  for (std::size_t c = 0; c < c_count; ++c) {
    const double mu = pick(mean, c, "mean"), var = pick(variance, c, "variance");
    require(var > 0 && std::isfinite(var), ErrorCode::kDegenerateVariance, "variance must be positive");
    const double inv = 1.0 / std::sqrt(var);
    for (std::size_t i = 0; i < image.plane(); ++i) {
      auto& v = out[c * image.plane() + i];
      v = static_cast<float>((v - mu) * inv);
    }
  }
  return out;
}

std::vector<std::size_t> subsample_labels(std::size_t pool_size, const LabelBudget& budget) {
  require(budget.n >= 1, ErrorCode::kBudgetError, "label budget must be positive");
  require(budget.n <= pool_size, ErrorCode::kBudgetError,
          "label budget " + std::to_string(budget.n) + " exceeds pool of " + std::to_string(pool_size));
  // Fisher-Yates on the whole pool; prefixes of one permutation are nested.
  std::vector<std::size_t> order(pool_size);
  for (std::size_t i = 0; i < pool_size; ++i) order[i] = i;
  Rng rng(derive_seed({budget.seed, 0x6c6162656cULL}));
  for (std::size_t i = pool_size; i > 1; --i)
    std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)))]);
  order.resize(budget.n);
  return order;
}

}  // namespace tedm::data
