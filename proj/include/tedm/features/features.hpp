#pragma once

#include <cstddef>
#include <cstdint>
#include <mutex>
#include <string>
#include <vector>

#include "tedm/diffusion/diffusion.hpp"
#include "tedm/tensor.hpp"

namespace tedm::features {

// Sorted set of distinct diffusion steps, all within [1, T].
class TimestepSet {
 public:
  TimestepSet() = default;
  TimestepSet(std::vector<std::size_t> steps, std::size_t total_steps);

  const std::vector<std::size_t>& steps() const noexcept { return steps_; }
  std::size_t size() const noexcept { return steps_.size(); }
  std::size_t operator[](std::size_t i) const { return steps_.at(i); }
  bool contains(std::size_t step) const;
  std::string to_string() const;

  friend bool operator==(const TimestepSet&, const TimestepSet&) = default;

 private:
  std::vector<std::size_t> steps_;
};

// Upsampled tap activations, one c_total x H x W tensor per step, ascending.
struct LatentStack {
  std::vector<std::size_t> steps;
  std::vector<Tensor> latents;
  std::uint64_t image_id = 0;
  std::uint64_t seed = 0;

  std::size_t channels() const { return latents.at(0).channels(); }
  std::size_t height() const { return latents.at(0).height(); }
  std::size_t width() const { return latents.at(0).width(); }
  const Tensor& at_step(std::size_t step) const;
  void validate() const;
};

// Per-step blocks concatenated along channels in ascending step order.
struct FeatureMap {
  Tensor z;
  std::vector<std::size_t> step_order;
  std::size_t block_channels = 0;
};

// Corner-aligned bilinear resize: output pixel (y, x) samples the source at
// (y * (h - 1) / (H - 1), x * (w - 1) / (W - 1)), coordinate 0 when the
// target extent is 1, and blends the four neighbours with weights
// (1 - fy)(1 - fx), (1 - fy) fx, fy (1 - fx), fy fx.
Tensor upsample_bilinear(const Tensor& z, std::size_t height, std::size_t width);

// Noise seed for one (image, step) draw.
std::uint64_t noise_seed(std::uint64_t seed, std::uint64_t image_id, std::size_t step);

// Latent for a single step: noise the image, run the denoiser, upsample and
// concatenate the configured taps.
Tensor extract_step(const diffusion::Denoiser& model, const Tensor& x0, std::uint64_t image_id, std::size_t step,
                    const diffusion::NoiseSchedule& schedule, std::uint64_t seed);

LatentStack extract_latents(const diffusion::Denoiser& model, const Tensor& x0, std::uint64_t image_id,
                            const TimestepSet& steps, const diffusion::NoiseSchedule& schedule, std::uint64_t seed);

FeatureMap concat_features(const LatentStack& stack);
LatentStack split_features(const FeatureMap& map);

// Latent file layout: "TEDMLATZ", u16 version, then records of
// (u32 step, u32 rank, u32 dims[rank], f32 payload), little-endian.
inline constexpr std::uint16_t kLatentFormatVersion = 1;

void persist_latents(const LatentStack& stack, const std::string& path);
LatentStack load_latents(const std::string& path);
void persist_latents(const FeatureMap& map, const std::string& path);
FeatureMap load_feature_map(const std::string& path);

// On-disk cache keyed by (model hash, image id, step, seed); one file per key.
// A key is written once; a later writer must produce identical bytes.
class LatentCache {
 public:
  explicit LatentCache(std::string directory);

  LatentStack get(const diffusion::Denoiser& model, const std::string& model_hash, const Tensor& x0,
                  std::uint64_t image_id, const TimestepSet& steps, const diffusion::NoiseSchedule& schedule,
                  std::uint64_t seed);

  std::string path_for(const std::string& model_hash, std::uint64_t image_id, std::size_t step,
                       std::uint64_t seed) const;

  // Writes one entry. Fails with StorageError if the key exists with
  // different contents.
  void put(const std::string& model_hash, std::uint64_t image_id, std::size_t step, std::uint64_t seed,
           const Tensor& latent);

  std::size_t computed() const noexcept { return computed_; }
  std::size_t hits() const noexcept { return hits_; }

 private:
  void store(const std::string& path, std::size_t step, const Tensor& latent);

  std::string dir_;
  std::mutex mutex_;
  std::size_t computed_ = 0;
  std::size_t hits_ = 0;
};

}  // namespace tedm::features
