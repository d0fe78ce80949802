#pragma once

#include <cstddef>
#include <cstring>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tedm/error.hpp"

namespace tedm {

using Dims = std::vector<std::size_t>;

std::string dims_to_string(const Dims& dims);

// Dense row-major float tensor. Images and latent maps are rank 3 (C x H x W).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Dims dims, float fill = 0.0f)
      : dims_(std::move(dims)), data_(count(dims_), fill) {}
  Tensor(Dims dims, std::vector<float> values) : dims_(std::move(dims)), data_(std::move(values)) {
    require(data_.size() == count(dims_), ErrorCode::kShapeError,
            "tensor payload does not match dims " + dims_to_string(dims_));
  }

  static Tensor image(std::size_t c, std::size_t h, std::size_t w, float fill = 0.0f) {
    return Tensor({c, h, w}, fill);
  }

  const Dims& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Rank-3 accessors.
  std::size_t channels() const { return dims_.at(0); }
  std::size_t height() const { return dims_.at(1); }
  std::size_t width() const { return dims_.at(2); }
  std::size_t plane() const { return dims_.at(1) * dims_.at(2); }

  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }
  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }
  std::vector<float>& storage() noexcept { return data_; }
  const std::vector<float>& storage() const noexcept { return data_; }

  float& operator[](std::size_t i) noexcept { return data_[i]; }
  float operator[](std::size_t i) const noexcept { return data_[i]; }

  float& at(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * dims_[1] + y) * dims_[2] + x];
  }
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * dims_[1] + y) * dims_[2] + x];
  }

  std::span<float> channel(std::size_t c) { return {data_.data() + c * plane(), plane()}; }
  std::span<const float> channel(std::size_t c) const {
    return {data_.data() + c * plane(), plane()};
  }

  bool same_shape(const Tensor& other) const noexcept { return dims_ == other.dims_; }

  // Bitwise equality, so NaN payloads compare equal to themselves.
  friend bool operator==(const Tensor& a, const Tensor& b) noexcept {
    return a.dims_ == b.dims_ &&
           (a.data_.empty() ||
            std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(float)) == 0);
  }

  static std::size_t count(const Dims& dims) {
    if (dims.empty()) return 0;
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
  }

 private:
  Dims dims_;
  std::vector<float> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) {
    fail(ErrorCode::kShapeError, std::string(what) + ": shape " + dims_to_string(a.dims()) +
                                     " vs " + dims_to_string(b.dims()));
  }
}

}  // namespace tedm
