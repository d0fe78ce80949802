#pragma once

// Building blocks shared by the denoiser, the supervised baseline and the
// pixel heads. Everything is templated on the scalar type so the same code
// runs in float for training and in double for gradient checks.

#include <Eigen/Core>

#include <cmath>
#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "tedm/error.hpp"
#include "tedm/tensor.hpp"

namespace tedm::nn {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using MatrixMap = Eigen::Map<Matrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const Matrix<T>>;
template <typename T>
using VectorMap = Eigen::Map<Vector<T>>;
template <typename T>
using ConstVectorMap = Eigen::Map<const Vector<T>>;

// Channels x (H*W) activation map.
template <typename T>
struct FeatureMap {
  Matrix<T> values;
  int height = 0;
  int width = 0;

  FeatureMap() = default;
  FeatureMap(int channels, int h, int w) : values(Matrix<T>::Zero(channels, h * w)), height(h), width(w) {}

  int channels() const { return static_cast<int>(values.rows()); }
  int pixels() const { return height * width; }
};

template <typename T>
FeatureMap<T> to_feature_map(const Tensor& t) {
  require(t.rank() == 3, ErrorCode::kShapeError, "expected a C x H x W tensor");
  FeatureMap<T> fm(static_cast<int>(t.channels()), static_cast<int>(t.height()),
                   static_cast<int>(t.width()));
  for (std::size_t i = 0; i < t.size(); ++i) fm.values.data()[i] = static_cast<T>(t[i]);
  return fm;
}

template <typename T>
Tensor to_tensor(const FeatureMap<T>& fm) {
  Tensor t = Tensor::image(fm.channels(), fm.height, fm.width);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(fm.values.data()[i]);
  return t;
}

// Named slice of a flat parameter vector.
struct ParamEntry {
  std::string name;
  Dims shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

class ParamLayout {
 public:
  std::size_t add(const std::string& name, Dims shape) {
    const std::size_t n = Tensor::count(shape);
    entries_.push_back({name, std::move(shape), total_, n});
    total_ += n;
    return entries_.back().offset;
  }
  std::size_t total() const noexcept { return total_; }
  const std::vector<ParamEntry>& entries() const noexcept { return entries_; }
  const ParamEntry& find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return e;
    fail(ErrorCode::kModelError, "no parameter named " + name);
  }

 private:
  std::vector<ParamEntry> entries_;
  std::size_t total_ = 0;
};

template <typename T>
inline T silu(T z) {
  return z / (T(1) + std::exp(-z));
}

template <typename T>
inline T silu_grad(T z) {
  const T s = T(1) / (T(1) + std::exp(-z));
  return s * (T(1) + z * (T(1) - s));
}

// im2col for a k x k kernel with "same" zero padding. Rows are ordered
// (in_channel, ky, kx), columns are output pixels.
template <typename T>
void im2col(const FeatureMap<T>& x, int k, Matrix<T>& cols) {
  const int h = x.height, w = x.width, cin = x.channels(), pad = k / 2;
  cols.resize(static_cast<Eigen::Index>(cin) * k * k, static_cast<Eigen::Index>(h) * w);
  for (int c = 0; c < cin; ++c) {
    const T* src = x.values.row(c).data();
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* dst = cols.row((c * k + ky) * k + kx).data();
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - pad;
          T* drow = dst + y * w;
          if (sy < 0 || sy >= h) {
            std::fill(drow, drow + w, T(0));
            continue;
          }
          const T* srow = src + sy * w;
          for (int xx = 0; xx < w; ++xx) {
            const int sx = xx + kx - pad;
            drow[xx] = (sx < 0 || sx >= w) ? T(0) : srow[sx];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const Matrix<T>& cols, int k, FeatureMap<T>& dx) {
  const int h = dx.height, w = dx.width, cin = dx.channels(), pad = k / 2;
  for (int c = 0; c < cin; ++c) {
    T* dst = dx.values.row(c).data();
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* src = cols.row((c * k + ky) * k + kx).data();
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= h) continue;
          T* drow = dst + sy * w;
          const T* srow = src + y * w;
          for (int xx = 0; xx < w; ++xx) {
            const int sx = xx + kx - pad;
            if (sx >= 0 && sx < w) drow[sx] += srow[xx];
          }
        }
      }
    }
  }
}

template <typename T>
FeatureMap<T> avg_pool2(const FeatureMap<T>& x) {
  FeatureMap<T> y(x.channels(), x.height / 2, x.width / 2);
  for (int c = 0; c < x.channels(); ++c) {
    const T* s = x.values.row(c).data();
    T* d = y.values.row(c).data();
    for (int yy = 0; yy < y.height; ++yy)
      for (int xx = 0; xx < y.width; ++xx) {
        const T* p = s + 2 * yy * x.width + 2 * xx;
        d[yy * y.width + xx] = T(0.25) * (p[0] + p[1] + p[x.width] + p[x.width + 1]);
      }
  }
  return y;
}

template <typename T>
FeatureMap<T> avg_pool2_backward(const FeatureMap<T>& dy, int h, int w) {
  FeatureMap<T> dx(dy.channels(), h, w);
  for (int c = 0; c < dy.channels(); ++c) {
    const T* s = dy.values.row(c).data();
    T* d = dx.values.row(c).data();
    for (int yy = 0; yy < dy.height; ++yy)
      for (int xx = 0; xx < dy.width; ++xx) {
        const T g = T(0.25) * s[yy * dy.width + xx];
        T* p = d + 2 * yy * w + 2 * xx;
        p[0] += g;
        p[1] += g;
        p[w] += g;
        p[w + 1] += g;
      }
  }
  return dx;
}

template <typename T>
FeatureMap<T> upsample_nearest2(const FeatureMap<T>& x) {
  FeatureMap<T> y(x.channels(), x.height * 2, x.width * 2);
  for (int c = 0; c < x.channels(); ++c) {
    const T* s = x.values.row(c).data();
    T* d = y.values.row(c).data();
    for (int yy = 0; yy < y.height; ++yy)
      for (int xx = 0; xx < y.width; ++xx) d[yy * y.width + xx] = s[(yy / 2) * x.width + xx / 2];
  }
  return y;
}

template <typename T>
FeatureMap<T> upsample_nearest2_backward(const FeatureMap<T>& dy) {
  FeatureMap<T> dx(dy.channels(), dy.height / 2, dy.width / 2);
  for (int c = 0; c < dy.channels(); ++c) {
    const T* s = dy.values.row(c).data();
    T* d = dx.values.row(c).data();
    for (int yy = 0; yy < dy.height; ++yy)
      for (int xx = 0; xx < dy.width; ++xx) d[(yy / 2) * dx.width + xx / 2] += s[yy * dy.width + xx];
  }
  return dx;
}

// Adam over a flat parameter vector.
template <typename T>
class Adam {
 public:
  struct Options {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
  };

  Adam(std::size_t n, Options opts) : opts_(opts), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::span<T> params, std::span<const T> grad) {
    ++t_;
    const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    const double lr = opts_.learning_rate * std::sqrt(c2) / c1;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = static_cast<double>(grad[i]);
      m_[i] = opts_.beta1 * m_[i] + (1.0 - opts_.beta1) * g;
      v_[i] = opts_.beta2 * v_[i] + (1.0 - opts_.beta2) * g * g;
      params[i] = static_cast<T>(static_cast<double>(params[i]) -
                                 lr * m_[i] / (std::sqrt(v_[i]) + opts_.epsilon));
    }
  }

 private:
  Options opts_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

}  // namespace tedm::nn
