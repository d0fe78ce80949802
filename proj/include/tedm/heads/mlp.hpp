#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tedm/nn/ops.hpp"

namespace tedm::heads {

// Per-pixel classifier: in -> hidden[0] -> hidden[1] -> classes, ReLU
// between layers, logits out. Pixels are columns.
template <typename T>
class PixelMLP {
 public:
  struct Cache {
    nn::Matrix<T> input;  // copy of X
    nn::Matrix<T> h1, h2; // post-ReLU
  };

  PixelMLP() = default;
  PixelMLP(int in_channels, int n_classes, std::vector<int> hidden = {128, 32});

  static std::size_t parameter_count(std::size_t in, std::size_t classes, std::size_t h1 = 128, std::size_t h2 = 32) {
    return in * h1 + h1 + h1 * h2 + h2 + h2 * classes + classes;
  }

  int in_channels() const noexcept { return in_; }
  int n_classes() const noexcept { return classes_; }
  const std::vector<int>& hidden() const noexcept { return hidden_; }
  const nn::ParamLayout& layout() const noexcept { return layout_; }
  std::span<T> params() noexcept { return params_; }
  std::span<const T> params() const noexcept { return params_; }
  std::size_t param_count() const noexcept { return params_.size(); }

  void init(std::uint64_t seed);

  // X: in_channels x N. Returns classes x N logits.
  nn::Matrix<T> forward(const nn::Matrix<T>& x, Cache* cache = nullptr) const;
  void backward(const Cache& cache, const nn::Matrix<T>& dlogits, std::span<T> grad) const;

 private:
  int in_ = 0, classes_ = 0;
  std::vector<int> hidden_;
  nn::ParamLayout layout_;
  std::vector<T> params_;
  std::size_t w1_ = 0, b1_ = 0, w2_ = 0, b2_ = 0, w3_ = 0, b3_ = 0;
};

extern template class PixelMLP<float>;
extern template class PixelMLP<double>;

// Column-wise softmax.
template <typename T>
nn::Matrix<T> softmax_columns(const nn::Matrix<T>& logits);

// Mean cross-entropy of logits (classes x N) against labels; writes
// scale * dLoss/dlogits into dlogits when non-null.
template <typename T>
double cross_entropy(const nn::Matrix<T>& logits, std::span<const std::uint8_t> labels, nn::Matrix<T>* dlogits,
                     double scale = 1.0);

}  // namespace tedm::heads
