#include "tedm/features/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <sstream>

#include "tedm/checkpoint.hpp"
#include "tedm/hash.hpp"
#include "tedm/rng.hpp"

namespace fs = std::filesystem;

namespace tedm::features {

TimestepSet::TimestepSet(std::vector<std::size_t> steps, std::size_t total_steps) : steps_(std::move(steps)) {
  require(!steps_.empty(), ErrorCode::kInvalidTimestep, "timestep set must not be empty");
  std::sort(steps_.begin(), steps_.end());
  require(std::adjacent_find(steps_.begin(), steps_.end()) == steps_.end(), ErrorCode::kInvalidTimestep,
          "timestep set has duplicates");
  require(steps_.front() >= 1 && steps_.back() <= total_steps, ErrorCode::kInvalidTimestep,
          "timestep outside [1, " + std::to_string(total_steps) + "]");
}

bool TimestepSet::contains(std::size_t step) const {
  return std::binary_search(steps_.begin(), steps_.end(), step);
}

std::string TimestepSet::to_string() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < steps_.size(); ++i) os << (i ? "," : "") << steps_[i];
  return os.str();
}

const Tensor& LatentStack::at_step(std::size_t step) const {
  for (std::size_t i = 0; i < steps.size(); ++i)
    if (steps[i] == step) return latents[i];
  fail(ErrorCode::kInvalidTimestep, "latent stack has no step " + std::to_string(step));
}

void LatentStack::validate() const {
  require(!latents.empty() && latents.size() == steps.size(), ErrorCode::kShapeError, "latent stack is empty or ragged");
  require(std::is_sorted(steps.begin(), steps.end()), ErrorCode::kShapeError, "latent stack steps not ascending");
  for (const auto& z : latents) {
    require(z.rank() == 3 && z.dims() == latents.front().dims(), ErrorCode::kShapeError,
            "latent stack mixes tensor shapes");
  }
}

Tensor upsample_bilinear(const Tensor& z, std::size_t height, std::size_t width) {
  require(z.rank() == 3, ErrorCode::kShapeError, "upsample_bilinear expects C x h x w");
  const std::size_t c = z.channels(), h = z.height(), w = z.width();
  require(h >= 1 && w >= 1, ErrorCode::kShapeError, "upsample_bilinear on an empty map");
  if (height < h || width < w) {
    fail(ErrorCode::kUnsupportedResize, "cannot downscale " + dims_to_string(z.dims()) + " to " +
                                            std::to_string(height) + "x" + std::to_string(width));
  }
  if (height == h && width == w) return z;

  struct Tap {
    std::size_t i0, i1;
    double f;
  };
  auto axis = [](std::size_t src, std::size_t dst) {
    std::vector<Tap> taps(dst);
    for (std::size_t i = 0; i < dst; ++i) {
      const double pos = dst == 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(src - 1) / static_cast<double>(dst - 1);
      std::size_t i0 = static_cast<std::size_t>(std::floor(pos));
      if (i0 > src - 1) i0 = src - 1;
      const std::size_t i1 = std::min(i0 + 1, src - 1);
      taps[i] = {i0, i1, pos - static_cast<double>(i0)};
    }
    return taps;
  };
  const auto ys = axis(h, height), xs = axis(w, width);
  Tensor out = Tensor::image(c, height, width);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < height; ++y) {
      const auto& ty = ys[y];
      for (std::size_t x = 0; x < width; ++x) {
        const auto& tx = xs[x];
        const double a = z.at(ch, ty.i0, tx.i0), b = z.at(ch, ty.i0, tx.i1);
        const double cc = z.at(ch, ty.i1, tx.i0), d = z.at(ch, ty.i1, tx.i1);
        const double top = (1.0 - tx.f) * a + tx.f * b;
        const double bottom = (1.0 - tx.f) * cc + tx.f * d;
        out.at(ch, y, x) = static_cast<float>((1.0 - ty.f) * top + ty.f * bottom);
      }
    }
  }
  return out;
}

std::uint64_t noise_seed(std::uint64_t seed, std::uint64_t image_id, std::size_t step) {
  return derive_seed({seed, image_id, static_cast<std::uint64_t>(step), 0x1A7E47ULL});
}

namespace {

void check_model(const diffusion::Denoiser& model, const Tensor& x0) {
  const auto& cfg = model.config();
  const bool shape_ok = x0.rank() == 3 && x0.channels() == static_cast<std::size_t>(cfg.in_channels) &&
                        x0.height() == static_cast<std::size_t>(cfg.height) &&
                        x0.width() == static_cast<std::size_t>(cfg.width);
  require(shape_ok, ErrorCode::kModelError,
          "image " + dims_to_string(x0.dims()) + " does not match the denoiser input (" + cfg.describe() + ")");
  const auto p = model.params();
  require(std::any_of(p.begin(), p.end(), [](float v) { return v != 0.0f; }), ErrorCode::kModelError,
          "denoiser has no trained parameters");
}

}  // namespace

Tensor extract_step(const diffusion::Denoiser& model, const Tensor& x0, std::uint64_t image_id, std::size_t step,
                    const diffusion::NoiseSchedule& schedule, std::uint64_t seed) {
  check_model(model, x0);
  const Tensor eps = diffusion::standard_normal_like(x0, noise_seed(seed, image_id, step));
  const auto xt = diffusion::forward_noise(x0, step, eps, schedule);
  std::vector<nn::FeatureMap<float>> taps;
  model.forward(nn::to_feature_map<float>(xt.pixels), static_cast<double>(step), nullptr, &taps);
  const std::size_t H = x0.height(), W = x0.width();
  Tensor out = Tensor::image(static_cast<std::size_t>(model.tap_channels()), H, W);
  std::size_t offset = 0;
  for (const auto& tap : taps) {
    const Tensor up = upsample_bilinear(nn::to_tensor(tap), H, W);
    std::copy(up.values().begin(), up.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(offset));
    offset += up.size();
  }
  return out;
}

LatentStack extract_latents(const diffusion::Denoiser& model, const Tensor& x0, std::uint64_t image_id,
                            const TimestepSet& steps, const diffusion::NoiseSchedule& schedule, std::uint64_t seed) {
  require(steps.size() > 0, ErrorCode::kInvalidTimestep, "empty timestep set");
  LatentStack stack;
  stack.image_id = image_id;
  stack.seed = seed;
  for (std::size_t s : steps.steps()) {
    schedule.check_timestep(s);
    stack.steps.push_back(s);
    stack.latents.push_back(extract_step(model, x0, image_id, s, schedule, seed));
  }
  return stack;
}

FeatureMap concat_features(const LatentStack& stack) {
  stack.validate();
  const std::size_t c = stack.channels(), h = stack.height(), w = stack.width();
  FeatureMap map;
  map.z = Tensor::image(c * stack.latents.size(), h, w);
  map.block_channels = c;
  // validate() guarantees ascending order
  map.step_order = stack.steps;
  for (std::size_t k = 0; k < stack.latents.size(); ++k) {
    const auto& src = stack.latents[k].values();
    std::copy(src.begin(), src.end(), map.z.values().begin() + static_cast<std::ptrdiff_t>(k * src.size()));
  }
  return map;
}

LatentStack split_features(const FeatureMap& map) {
  const std::size_t blocks = map.step_order.size();
  require(blocks > 0 && map.block_channels * blocks == map.z.channels(), ErrorCode::kShapeError,
          "feature map channels are not |S| * c_total");
  LatentStack stack;
  stack.steps = map.step_order;
  const std::size_t block = map.block_channels * map.z.plane();
  for (std::size_t k = 0; k < blocks; ++k) {
    std::vector<float> v(map.z.values().begin() + static_cast<std::ptrdiff_t>(k * block),
                         map.z.values().begin() + static_cast<std::ptrdiff_t>((k + 1) * block));
    stack.latents.emplace_back(Dims{map.block_channels, map.z.height(), map.z.width()}, std::move(v));
  }
  return stack;
}

namespace {

constexpr char kLatentMagic[8] = {'T', 'E', 'D', 'M', 'L', 'A', 'T', 'Z'};

template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

std::string encode_records(const std::vector<std::size_t>& steps, const std::vector<const Tensor*>& tensors) {
  std::string out(kLatentMagic, sizeof kLatentMagic);
  put<std::uint16_t>(out, kLatentFormatVersion);
  for (std::size_t i = 0; i < steps.size(); ++i) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(steps[i]));
    const Tensor& t = *tensors[i];
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.dims()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float));
  }
  return out;
}

struct Record {
  std::size_t step;
  Tensor tensor;
};

std::vector<Record> decode_records(const std::string& bytes, const std::string& path) {
  std::size_t pos = 0;
  auto take = [&](void* dst, std::size_t n) {
    require(pos + n <= bytes.size(), ErrorCode::kFormatError, "truncated latent file " + path);
    std::memcpy(dst, bytes.data() + pos, n);
    pos += n;
  };
  char magic[8];
  take(magic, 8);
  require(std::memcmp(magic, kLatentMagic, 8) == 0, ErrorCode::kFormatError, path + " is not a latent file");
  std::uint16_t version = 0;
  take(&version, sizeof version);
  require(version == kLatentFormatVersion, ErrorCode::kFormatError, "unsupported latent format version in " + path);
  std::vector<Record> records;
  while (pos < bytes.size()) {
    std::uint32_t step = 0, rank = 0;
    take(&step, 4);
    take(&rank, 4);
    require(rank >= 1 && rank <= 8, ErrorCode::kFormatError, "implausible tensor rank in " + path);
    Dims dims(rank);
    for (auto& d : dims) {
      std::uint32_t v = 0;
      take(&v, 4);
      d = v;
    }
    const std::size_t n = Tensor::count(dims);
    require(n <= (bytes.size() - pos) / sizeof(float), ErrorCode::kFormatError, "truncated latent payload in " + path);
    std::vector<float> values(n);
    take(values.data(), n * sizeof(float));
    records.push_back({step, Tensor(std::move(dims), std::move(values))});
  }
  require(!records.empty(), ErrorCode::kFormatError, "latent file without records: " + path);
  return records;
}

std::string read_for_load(const std::string& path) {
  try {
    return read_file(path);
  } catch (const Error& e) {
    fail(ErrorCode::kStorageError, e.what());
  }
}

}  // namespace

void persist_latents(const LatentStack& stack, const std::string& path) {
  stack.validate();
  std::vector<const Tensor*> ptrs;
  for (const auto& t : stack.latents) ptrs.push_back(&t);
  write_file_atomic(path, encode_records(stack.steps, ptrs));
}

LatentStack load_latents(const std::string& path) {
  auto records = decode_records(read_for_load(path), path);
  LatentStack stack;
  for (auto& r : records) {
    stack.steps.push_back(r.step);
    stack.latents.push_back(std::move(r.tensor));
  }
  try {
    stack.validate();
  } catch (const Error& e) {
    fail(ErrorCode::kFormatError, std::string("inconsistent latent file: ") + e.what());
  }
  return stack;
}

void persist_latents(const FeatureMap& map, const std::string& path) { persist_latents(split_features(map), path); }

FeatureMap load_feature_map(const std::string& path) { return concat_features(load_latents(path)); }

LatentCache::LatentCache(std::string directory) : dir_(std::move(directory)) {
  std::error_code ec;
  fs::create_directories(dir_, ec);
  require(!ec, ErrorCode::kStorageError, "cannot create cache directory " + dir_);
}

std::string LatentCache::path_for(const std::string& model_hash, std::uint64_t image_id, std::size_t step,
                                  std::uint64_t seed) const {
  std::ostringstream os;
  os << dir_ << "/" << model_hash << "/img" << image_id << "_seed" << Hasher::to_hex(seed) << "_t" << step << ".lat";
  return os.str();
}

void LatentCache::store(const std::string& path, std::size_t step, const Tensor& latent) {
  const std::string bytes = encode_records({step}, {&latent});
  if (fs::exists(path)) {
    require(read_for_load(path) == bytes, ErrorCode::kStorageError,
            "cache key already holds different contents: " + path);
    return;
  }
  fs::create_directories(fs::path(path).parent_path());
  const std::string tmp = path + ".partial";
  write_file_atomic(tmp, bytes);
  std::error_code ec;
  fs::create_hard_link(tmp, path, ec);
  fs::remove(tmp);
  if (ec) {
    // another writer won the race; its bytes must match ours
    require(fs::exists(path) && read_for_load(path) == bytes, ErrorCode::kStorageError,
            "cache key written concurrently with different contents: " + path);
  }
}

void LatentCache::put(const std::string& model_hash, std::uint64_t image_id, std::size_t step, std::uint64_t seed,
                      const Tensor& latent) {
  std::lock_guard lock(mutex_);
  store(path_for(model_hash, image_id, step, seed), step, latent);
}

LatentStack LatentCache::get(const diffusion::Denoiser& model, const std::string& model_hash, const Tensor& x0,
                             std::uint64_t image_id, const TimestepSet& steps,
                             const diffusion::NoiseSchedule& schedule, std::uint64_t seed) {
  LatentStack stack;
  stack.image_id = image_id;
  stack.seed = seed;
  for (std::size_t s : steps.steps()) {
    const std::string path = path_for(model_hash, image_id, s, seed);
    std::unique_lock lock(mutex_);
    if (fs::exists(path)) {
      lock.unlock();
      auto records = decode_records(read_for_load(path), path);
      require(records.size() == 1 && records[0].step == s, ErrorCode::kFormatError, "unexpected cache entry " + path);
      stack.steps.push_back(s);
      stack.latents.push_back(std::move(records[0].tensor));
      lock.lock();
      ++hits_;
      continue;
    }
    lock.unlock();
    Tensor z = extract_step(model, x0, image_id, s, schedule, seed);
    lock.lock();
    store(path, s, z);
    ++computed_;
    lock.unlock();
    stack.steps.push_back(s);
    stack.latents.push_back(std::move(z));
  }
  return stack;
}

}  // namespace tedm::features
