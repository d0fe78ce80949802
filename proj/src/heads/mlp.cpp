#include "tedm/heads/mlp.hpp"

#include <cmath>

#include "tedm/rng.hpp"

namespace tedm::heads {

template <typename T>
PixelMLP<T>::PixelMLP(int in_channels, int n_classes, std::vector<int> hidden)
    : in_(in_channels), classes_(n_classes), hidden_(std::move(hidden)) {
  require(in_ > 0 && classes_ >= 2, ErrorCode::kShapeError, "PixelMLP needs positive width and >= 2 classes");
  require(hidden_.size() == 2 && hidden_[0] > 0 && hidden_[1] > 0, ErrorCode::kConfigError,
          "PixelMLP takes exactly two positive hidden widths");
  auto sz = [](int v) { return static_cast<std::size_t>(v); };
  w1_ = layout_.add("l1.weight", {sz(hidden_[0]), sz(in_)});
  b1_ = layout_.add("l1.bias", {sz(hidden_[0])});
  w2_ = layout_.add("l2.weight", {sz(hidden_[1]), sz(hidden_[0])});
  b2_ = layout_.add("l2.bias", {sz(hidden_[1])});
  w3_ = layout_.add("l3.weight", {sz(classes_), sz(hidden_[1])});
  b3_ = layout_.add("l3.bias", {sz(classes_)});
  params_.assign(layout_.total(), T(0));
}

template <typename T>
void PixelMLP<T>::init(std::uint64_t seed) {
  Rng rng(seed);
  std::fill(params_.begin(), params_.end(), T(0));
  auto fill = [&](std::size_t off, std::size_t n, double fan_in) {
    const double bound = 1.0 / std::sqrt(fan_in);
    for (std::size_t i = 0; i < n; ++i) params_[off + i] = static_cast<T>(rng.uniform(-bound, bound));
  };
  fill(w1_, static_cast<std::size_t>(hidden_[0]) * in_, in_);
  fill(w2_, static_cast<std::size_t>(hidden_[1]) * hidden_[0], hidden_[0]);
  fill(w3_, static_cast<std::size_t>(classes_) * hidden_[1], hidden_[1]);
}

template <typename T>
nn::Matrix<T> PixelMLP<T>::forward(const nn::Matrix<T>& x, Cache* cache) const {
  require(x.rows() == in_, ErrorCode::kShapeError,
          "PixelMLP expects " + std::to_string(in_) + " input channels, got " + std::to_string(x.rows()));
  const T* p = params_.data();
  nn::ConstMatrixMap<T> w1(p + w1_, hidden_[0], in_), w2(p + w2_, hidden_[1], hidden_[0]),
      w3(p + w3_, classes_, hidden_[1]);
  nn::ConstVectorMap<T> b1(p + b1_, hidden_[0]), b2(p + b2_, hidden_[1]), b3(p + b3_, classes_);
  nn::Matrix<T> h1 = w1 * x;
  h1.colwise() += b1;
  h1 = h1.cwiseMax(T(0));
  nn::Matrix<T> h2 = w2 * h1;
  h2.colwise() += b2;
  h2 = h2.cwiseMax(T(0));
  nn::Matrix<T> out = w3 * h2;
  out.colwise() += b3;
  if (cache) {
    cache->input = x;
    cache->h1 = std::move(h1);
    cache->h2 = std::move(h2);
  }
  return out;
}

template <typename T>
void PixelMLP<T>::backward(const Cache& cache, const nn::Matrix<T>& dlogits, std::span<T> grad) const {
  require(grad.size() == params_.size(), ErrorCode::kShapeError, "gradient buffer size mismatch");
  const T* p = params_.data();
  T* g = grad.data();
  nn::ConstMatrixMap<T> w2(p + w2_, hidden_[1], hidden_[0]), w3(p + w3_, classes_, hidden_[1]);
  nn::MatrixMap<T>(g + w3_, classes_, hidden_[1]).noalias() += dlogits * cache.h2.transpose();
  nn::VectorMap<T>(g + b3_, classes_) += dlogits.rowwise().sum();
  nn::Matrix<T> d2 = w3.transpose() * dlogits;
  d2 = d2.cwiseProduct((cache.h2.array() > T(0)).template cast<T>().matrix());
  nn::MatrixMap<T>(g + w2_, hidden_[1], hidden_[0]).noalias() += d2 * cache.h1.transpose();
  nn::VectorMap<T>(g + b2_, hidden_[1]) += d2.rowwise().sum();
  nn::Matrix<T> d1 = w2.transpose() * d2;
  d1 = d1.cwiseProduct((cache.h1.array() > T(0)).template cast<T>().matrix());
  nn::MatrixMap<T>(g + w1_, hidden_[0], in_).noalias() += d1 * cache.input.transpose();
  nn::VectorMap<T>(g + b1_, hidden_[0]) += d1.rowwise().sum();
}

template class PixelMLP<float>;
template class PixelMLP<double>;

template <typename T>
nn::Matrix<T> softmax_columns(const nn::Matrix<T>& logits) {
  nn::Matrix<T> p(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const T m = logits.col(j).maxCoeff();
    T sum = 0;
    for (Eigen::Index k = 0; k < logits.rows(); ++k) {
      p(k, j) = std::exp(logits(k, j) - m);
      sum += p(k, j);
    }
    p.col(j) /= sum;
  }
  return p;
}

template <typename T>
double cross_entropy(const nn::Matrix<T>& logits, std::span<const std::uint8_t> labels, nn::Matrix<T>* dlogits,
                     double scale) {
  require(static_cast<std::size_t>(logits.cols()) == labels.size(), ErrorCode::kShapeError,
          "label count does not match pixel count");
  const Eigen::Index n = logits.cols(), k = logits.rows();
  double loss = 0.0;
  if (dlogits) dlogits->resize(k, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const std::uint8_t y = labels[static_cast<std::size_t>(j)];
    require(y < k, ErrorCode::kShapeError, "label index outside class range");
    double m = static_cast<double>(logits(0, j));
    for (Eigen::Index c = 1; c < k; ++c) m = std::max(m, static_cast<double>(logits(c, j)));
    double sum = 0.0;
    for (Eigen::Index c = 0; c < k; ++c) sum += std::exp(static_cast<double>(logits(c, j)) - m);
    const double lse = m + std::log(sum);
    loss += lse - static_cast<double>(logits(y, j));
    if (dlogits) {
      for (Eigen::Index c = 0; c < k; ++c) {
        const double pc = std::exp(static_cast<double>(logits(c, j)) - lse);
        (*dlogits)(c, j) = static_cast<T>(scale * (pc - (c == y ? 1.0 : 0.0)) / static_cast<double>(n));
      }
    }
  }
  return loss / static_cast<double>(n);
}

template nn::Matrix<float> softmax_columns<float>(const nn::Matrix<float>&);
template nn::Matrix<double> softmax_columns<double>(const nn::Matrix<double>&);
template double cross_entropy<float>(const nn::Matrix<float>&, std::span<const std::uint8_t>, nn::Matrix<float>*, double);
template double cross_entropy<double>(const nn::Matrix<double>&, std::span<const std::uint8_t>, nn::Matrix<double>*,
                                      double);

}  // namespace tedm::heads
