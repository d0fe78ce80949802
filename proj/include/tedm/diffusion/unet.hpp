#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tedm/nn/ops.hpp"

namespace tedm::diffusion {

// Encoder-decoder with skip connections. Level l runs at resolution
// H / 2^l; the bottleneck ("mid") runs at H / 2^levels. Every block is
// conv3x3 + per-channel time bias + SiLU.
struct DenoiserConfig {
  int in_channels = 1;
  int out_channels = 1;
  int height = 64;
  int width = 64;
  std::vector<int> widths{16, 32};
  int mid_width = 72;
  int time_dim = 32;
  bool time_conditioned = true;
  // Blocks whose outputs form the latent representation, in concatenation
  // order. Valid names: enc<l>, mid.in, mid, dec<l>.
  std::vector<std::string> taps{"mid", "dec1", "dec0"};
  bool zero_init_output = false;

  std::string describe() const;
  void validate() const;
};

template <typename T>
class UNet {
 public:
  using FMap = nn::FeatureMap<T>;

  struct BlockCache {
    nn::Matrix<T> cols;
    nn::Matrix<T> pre;  // pre-activation
    int height = 0, width = 0, in_channels = 0;
  };
  struct Cache {
    std::vector<BlockCache> blocks;  // in block order
    BlockCache out;
    nn::Vector<T> sinusoid;
    nn::Vector<T> time_pre;
    nn::Vector<T> time_hidden;
    std::vector<int> enc_heights, enc_widths;
  };

  explicit UNet(DenoiserConfig config);

  const DenoiserConfig& config() const noexcept { return config_; }
  const nn::ParamLayout& layout() const noexcept { return layout_; }
  std::span<T> params() noexcept { return params_; }
  std::span<const T> params() const noexcept { return params_; }
  std::size_t param_count() const noexcept { return params_.size(); }

  // Summed channel count of the configured taps.
  int tap_channels() const;
  const std::vector<std::string>& block_names() const noexcept { return block_names_; }

  void init(std::uint64_t seed);

  // Runs the network on one image. When `cache` is given, the activations
  // needed by backward() are stored. When `taps` is given, the configured tap
  // outputs are appended in config order, at their native resolution.
  FMap forward(const FMap& x, double t, Cache* cache = nullptr,
               std::vector<FMap>* taps = nullptr) const;

  // Accumulates dLoss/dParams into `grad` (same length as params()).
  void backward(const Cache& cache, const FMap& dout, std::span<T> grad) const;

 private:
  struct Block {
    int cin = 0, cout = 0, k = 3;
    std::size_t weight = 0, bias = 0, time_weight = 0, time_bias = 0;
    bool activation = true;
    bool time_bias_enabled = true;
  };

  FMap block_forward(const Block& b, const FMap& x, const nn::Vector<T>& temb, BlockCache* bc) const;
  FMap block_backward(const Block& b, const BlockCache& bc, const FMap& dy,
                      const nn::Vector<T>& temb, nn::Vector<T>& dtemb, std::span<T> grad) const;
  nn::Vector<T> sinusoid(double t) const;

  DenoiserConfig config_;
  nn::ParamLayout layout_;
  std::vector<T> params_;
  std::vector<Block> blocks_;  // enc0..encL-1, mid.in, mid, decL-1..dec0
  std::vector<std::string> block_names_;
  Block out_;
  std::size_t time_w_ = 0, time_b_ = 0;
};

extern template class UNet<float>;
extern template class UNet<double>;

}  // namespace tedm::diffusion
