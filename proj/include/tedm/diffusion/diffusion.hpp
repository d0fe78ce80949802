#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tedm/checkpoint.hpp"
#include "tedm/diffusion/unet.hpp"
#include "tedm/tensor.hpp"

namespace tedm::diffusion {

enum class ScheduleKind {
  kLinear,
  kExplicit,  // betas supplied directly
};

// Variance schedule indexed by t in [1, T]. There is no slot for t = 0.
class NoiseSchedule {
 public:
  static NoiseSchedule linear(std::size_t total_steps, double beta_start, double beta_end);
  static NoiseSchedule from_betas(std::vector<double> betas);

  std::size_t total_steps() const noexcept { return betas_.size(); }
  ScheduleKind kind() const noexcept { return kind_; }

  double beta(std::size_t t) const { return betas_[index(t)]; }
  double alpha(std::size_t t) const { return alphas_[index(t)]; }
  double alpha_bar(std::size_t t) const { return alpha_bars_[index(t)]; }

  std::span<const double> betas() const noexcept { return betas_; }
  std::span<const double> alphas() const noexcept { return alphas_; }
  std::span<const double> alpha_bars() const noexcept { return alpha_bars_; }

  bool contains(std::size_t t) const noexcept { return t >= 1 && t <= betas_.size(); }
  void check_timestep(std::size_t t) const;

 private:
  NoiseSchedule(std::vector<double> betas, ScheduleKind kind);
  std::size_t index(std::size_t t) const {
    check_timestep(t);
    return t - 1;
  }

  std::vector<double> betas_, alphas_, alpha_bars_;
  ScheduleKind kind_ = ScheduleKind::kLinear;
};

NoiseSchedule build_schedule(std::size_t total_steps, double beta_start, double beta_end,
                             ScheduleKind kind = ScheduleKind::kLinear);

struct NoisyImage {
  Tensor pixels;
  std::size_t timestep = 0;
};

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
NoisyImage forward_noise(const Tensor& x0, std::size_t t, const Tensor& eps, const NoiseSchedule& schedule);

// Mean of the reverse step with fixed variance:
// (x_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t).
Tensor posterior_mean(const NoisyImage& x, const Tensor& eps_hat, const NoiseSchedule& schedule);

// Mean squared error between injected and predicted noise.
double ddpm_loss(const Tensor& eps, const Tensor& eps_hat);

Tensor standard_normal_like(const Tensor& like, std::uint64_t seed);

using Denoiser = UNet<float>;

Tensor predict_noise(const Denoiser& model, const NoisyImage& x);

// Loss for one (x0, t, eps) triple; accumulates scale * dLoss/dParams into
// grad when it is non-empty.
template <typename T>
double ddpm_loss_and_grad(const UNet<T>& model, const Tensor& x0, std::size_t t, const Tensor& eps,
                          const NoiseSchedule& schedule, std::span<T> grad, double scale = 1.0);

struct DdpmTrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 4;
  double learning_rate = 1e-4;
  std::uint64_t seed = 0;
};

struct DdpmTrainResult {
  std::vector<double> losses;  // one entry per optimizer step
};

DdpmTrainResult train_ddpm(std::span<const Tensor> unlabeled, Denoiser& model, const NoiseSchedule& schedule,
                           const DdpmTrainConfig& config);

// Hash of configuration and parameter bytes; keys the latent cache.
std::string content_hash(const Denoiser& model);

// Network fields and parameters as checkpoint meta/tensors; shared with the
// supervised baseline, which reuses the same architecture.
void write_unet_meta(Checkpoint& ckpt, const DenoiserConfig& config);
DenoiserConfig read_unet_meta(const Checkpoint& ckpt);
void write_unet_params(Checkpoint& ckpt, const nn::ParamLayout& layout, std::span<const float> params);
void read_unet_params(const Checkpoint& ckpt, const nn::ParamLayout& layout, std::span<float> params);

void save_denoiser(const std::string& path, const Denoiser& model);
Denoiser load_denoiser(const std::string& path);

}  // namespace tedm::diffusion
