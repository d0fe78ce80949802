#pragma once

// Test-only helpers: finite-difference gradient checks and small generators.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <unistd.h>

#include "tedm/rng.hpp"
#include "tedm/tensor.hpp"

namespace tedm::testing {

inline Tensor random_tensor(Dims dims, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(dims));
  for (auto& v : t.values()) v = static_cast<float>(rng.normal(0.0, sd));
  return t;
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// Compares analytic gradient entries against central differences of `loss`
// evaluated on `params`. Relative error uses max(|a|, |n|, floor) as scale.
inline GradCheck check_gradient(std::span<double> params, std::span<const double> analytic,
                                const std::function<double()>& loss, double h = 1e-6,
                                double floor = 1e-6, std::size_t stride = 1) {
  GradCheck r;
  for (std::size_t i = 0; i < params.size(); i += stride) {
    const double saved = params[i];
    params[i] = saved + h;
    const double up = loss();
    params[i] = saved - h;
    const double down = loss();
    params[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double scale = std::max({std::abs(numeric), std::abs(analytic[i]), floor});
    r.max_rel_error = std::max(r.max_rel_error, std::abs(numeric - analytic[i]) / scale);
    ++r.checked;
  }
  return r;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("tedm_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(splitmix64(reinterpret_cast<std::uintptr_t>(this)) % 1000000000));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string str() const { return path_.string(); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace tedm::testing
