#include "tedm/diffusion/diffusion.hpp"

#include <cmath>
#include <sstream>

#include "tedm/checkpoint.hpp"
#include "tedm/hash.hpp"
#include "tedm/rng.hpp"

namespace tedm::diffusion {

NoiseSchedule::NoiseSchedule(std::vector<double> betas, ScheduleKind kind) : betas_(std::move(betas)), kind_(kind) {
  require(!betas_.empty(), ErrorCode::kInvalidSchedule, "schedule needs at least one step");
  alphas_.resize(betas_.size());
  alpha_bars_.resize(betas_.size());
  double running = 1.0;
  for (std::size_t i = 0; i < betas_.size(); ++i) {
    const double b = betas_[i];
    require(std::isfinite(b) && b > 0.0 && b < 1.0, ErrorCode::kInvalidSchedule,
            "beta_" + std::to_string(i + 1) + " outside (0, 1)");
    alphas_[i] = 1.0 - b;
    running *= alphas_[i];
    alpha_bars_[i] = running;
  }
  require(alpha_bars_.back() > 0.0, ErrorCode::kInvalidSchedule, "cumulative alpha underflows to zero");
}

NoiseSchedule NoiseSchedule::linear(std::size_t total_steps, double beta_start, double beta_end) {
  require(total_steps >= 1, ErrorCode::kInvalidSchedule, "T must be >= 1");
  require(std::isfinite(beta_start) && std::isfinite(beta_end) && beta_start > 0.0 && beta_start <= beta_end &&
              beta_end < 1.0,
          ErrorCode::kInvalidSchedule, "need 0 < beta_start <= beta_end < 1");
  std::vector<double> betas(total_steps);
  if (total_steps == 1) {
    betas[0] = beta_start;
  } else {
    const double step = (beta_end - beta_start) / static_cast<double>(total_steps - 1);
    for (std::size_t i = 0; i < total_steps; ++i) betas[i] = beta_start + step * static_cast<double>(i);
    betas.back() = beta_end;
  }
  return NoiseSchedule(std::move(betas), ScheduleKind::kLinear);
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
  return NoiseSchedule(std::move(betas), ScheduleKind::kExplicit);
}

void NoiseSchedule::check_timestep(std::size_t t) const {
  if (!contains(t)) {
    fail(ErrorCode::kInvalidTimestep,
         "timestep " + std::to_string(t) + " outside [1, " + std::to_string(betas_.size()) + "]");
  }
}

NoiseSchedule build_schedule(std::size_t total_steps, double beta_start, double beta_end, ScheduleKind kind) {
  require(kind == ScheduleKind::kLinear, ErrorCode::kInvalidSchedule, "only linear schedules can be built from endpoints");
  return NoiseSchedule::linear(total_steps, beta_start, beta_end);
}

NoisyImage forward_noise(const Tensor& x0, std::size_t t, const Tensor& eps, const NoiseSchedule& schedule) {
  require_same_shape(x0, eps, "forward_noise");
  const double ab = schedule.alpha_bar(t);
  const double signal = std::sqrt(ab), noise = std::sqrt(1.0 - ab);
  NoisyImage out{Tensor(x0.dims()), t};
  for (std::size_t i = 0; i < x0.size(); ++i) {
    out.pixels[i] = static_cast<float>(signal * static_cast<double>(x0[i]) + noise * static_cast<double>(eps[i]));
  }
  return out;
}

Tensor posterior_mean(const NoisyImage& x, const Tensor& eps_hat, const NoiseSchedule& schedule) {
  require_same_shape(x.pixels, eps_hat, "posterior_mean");
  const double a = schedule.alpha(x.timestep);
  const double ab = schedule.alpha_bar(x.timestep);
  const double inv_sqrt_a = 1.0 / std::sqrt(a);
  const double coef = (1.0 - a) / std::sqrt(1.0 - ab);
  Tensor mu(x.pixels.dims());
  for (std::size_t i = 0; i < mu.size(); ++i) {
    mu[i] = static_cast<float>(inv_sqrt_a * (static_cast<double>(x.pixels[i]) - coef * static_cast<double>(eps_hat[i])));
  }
  return mu;
}

double ddpm_loss(const Tensor& eps, const Tensor& eps_hat) {
  require_same_shape(eps, eps_hat, "ddpm_loss");
  require(!eps.empty(), ErrorCode::kShapeError, "ddpm_loss on empty tensors");
  double acc = 0.0;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const double d = static_cast<double>(eps_hat[i]) - static_cast<double>(eps[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(eps.size());
}

Tensor standard_normal_like(const Tensor& like, std::uint64_t seed) {
  Rng rng(seed);
  Tensor out(like.dims());
  for (auto& v : out.values()) v = static_cast<float>(rng.normal());
  return out;
}

namespace {

void check_image_shape(const DenoiserConfig& cfg, const Tensor& x) {
  const bool ok = x.rank() == 3 && x.channels() == static_cast<std::size_t>(cfg.in_channels) &&
                  x.height() == static_cast<std::size_t>(cfg.height) && x.width() == static_cast<std::size_t>(cfg.width);
  if (!ok) {
    fail(ErrorCode::kShapeError, "image shape " + dims_to_string(x.dims()) + " does not match denoiser input [" +
                                     std::to_string(cfg.in_channels) + "x" + std::to_string(cfg.height) + "x" +
                                     std::to_string(cfg.width) + "]");
  }
}

}  // namespace

Tensor predict_noise(const Denoiser& model, const NoisyImage& x) {
  check_image_shape(model.config(), x.pixels);
  require(model.config().out_channels == model.config().in_channels, ErrorCode::kModelError,
          "noise prediction requires out_channels == in_channels");
  const auto in = nn::to_feature_map<float>(x.pixels);
  return nn::to_tensor(model.forward(in, static_cast<double>(x.timestep)));
}

template <typename T>
double ddpm_loss_and_grad(const UNet<T>& model, const Tensor& x0, std::size_t t, const Tensor& eps,
                          const NoiseSchedule& schedule, std::span<T> grad, double scale) {
  check_image_shape(model.config(), x0);
  const NoisyImage xt = forward_noise(x0, t, eps, schedule);
  const auto in = nn::to_feature_map<T>(xt.pixels);
  const auto target = nn::to_feature_map<T>(eps);
  typename UNet<T>::Cache cache;
  const bool want_grad = !grad.empty();
  const auto out = model.forward(in, static_cast<double>(t), want_grad ? &cache : nullptr);
  const nn::Matrix<T> diff = out.values - target.values;
  const double n = static_cast<double>(diff.size());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < diff.size(); ++i) loss += static_cast<double>(diff.data()[i]) * diff.data()[i];
  loss /= n;
  if (want_grad) {
    nn::FeatureMap<T> dout;
    dout.height = out.height;
    dout.width = out.width;
    dout.values = diff * static_cast<T>(2.0 * scale / n);
    model.backward(cache, dout, grad);
  }
  return loss;
}

template double ddpm_loss_and_grad<float>(const UNet<float>&, const Tensor&, std::size_t, const Tensor&,
                                          const NoiseSchedule&, std::span<float>, double);
template double ddpm_loss_and_grad<double>(const UNet<double>&, const Tensor&, std::size_t, const Tensor&,
                                           const NoiseSchedule&, std::span<double>, double);

DdpmTrainResult train_ddpm(std::span<const Tensor> unlabeled, Denoiser& model, const NoiseSchedule& schedule,
                           const DdpmTrainConfig& config) {
  require(!unlabeled.empty(), ErrorCode::kEmptyDataset, "train_ddpm: no unlabeled images");
  require(config.batch_size >= 1, ErrorCode::kConfigError, "batch size must be >= 1");
  require(config.learning_rate > 0.0, ErrorCode::kConfigError, "learning rate must be positive");
  for (const auto& img : unlabeled) check_image_shape(model.config(), img);

  Rng rng(derive_seed({config.seed, 0xD0D0}));
  nn::Adam<float> adam(model.param_count(), {.learning_rate = config.learning_rate});
  std::vector<float> grad(model.param_count());
  DdpmTrainResult result;
  result.losses.reserve(config.steps);
  const double inv_batch = 1.0 / static_cast<double>(config.batch_size);
  for (std::size_t step = 0; step < config.steps; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0f);
    double loss = 0.0;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const auto idx = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(unlabeled.size()) - 1));
      const auto t = static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(schedule.total_steps())));
      const Tensor eps = standard_normal_like(unlabeled[idx], rng.next_u64());
      loss += ddpm_loss_and_grad<float>(model, unlabeled[idx], t, eps, schedule, grad, inv_batch);
    }
    loss *= inv_batch;
    if (!std::isfinite(loss)) {
      fail(ErrorCode::kDivergedTraining, "non-finite DDPM loss at step " + std::to_string(step));
    }
    result.losses.push_back(loss);
    adam.step(model.params(), grad);
  }
  return result;
}

std::string content_hash(const Denoiser& model) {
  Hasher h;
  h.text(model.config().describe());
  h.span<float>(model.params());
  return h.hex();
}

namespace {

std::string join_ints(const std::vector<int>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

std::string join_strings(const std::vector<std::string>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

void write_unet_meta(Checkpoint& ckpt, const DenoiserConfig& c) {
  ckpt.set_meta("in_channels", std::to_string(c.in_channels));
  ckpt.set_meta("out_channels", std::to_string(c.out_channels));
  ckpt.set_meta("height", std::to_string(c.height));
  ckpt.set_meta("width", std::to_string(c.width));
  ckpt.set_meta("widths", join_ints(c.widths));
  ckpt.set_meta("mid_width", std::to_string(c.mid_width));
  ckpt.set_meta("time_dim", std::to_string(c.time_dim));
  ckpt.set_meta("time_conditioned", c.time_conditioned ? "1" : "0");
  ckpt.set_meta("taps", join_strings(c.taps));
}

DenoiserConfig read_unet_meta(const Checkpoint& ckpt) {
  DenoiserConfig c;
  try {
    c.in_channels = std::stoi(ckpt.meta_value("in_channels"));
    c.out_channels = std::stoi(ckpt.meta_value("out_channels"));
    c.height = std::stoi(ckpt.meta_value("height"));
    c.width = std::stoi(ckpt.meta_value("width"));
    c.widths.clear();
    for (const auto& w : split_commas(ckpt.meta_value("widths"))) c.widths.push_back(std::stoi(w));
    c.mid_width = std::stoi(ckpt.meta_value("mid_width"));
    c.time_dim = std::stoi(ckpt.meta_value("time_dim"));
    c.time_conditioned = ckpt.meta_value("time_conditioned") == "1";
    c.taps = split_commas(ckpt.meta_value("taps"));
  } catch (const std::logic_error&) {
    fail(ErrorCode::kFormatError, "malformed network fields in checkpoint");
  }
  return c;
}

void write_unet_params(Checkpoint& ckpt, const nn::ParamLayout& layout, std::span<const float> params) {
  for (const auto& e : layout.entries()) {
    std::vector<float> v(params.begin() + static_cast<std::ptrdiff_t>(e.offset),
                         params.begin() + static_cast<std::ptrdiff_t>(e.offset + e.size));
    ckpt.tensors.emplace_back(e.name, Tensor(e.shape, std::move(v)));
  }
}

void read_unet_params(const Checkpoint& ckpt, const nn::ParamLayout& layout, std::span<float> params) {
  for (const auto& e : layout.entries()) {
    const Tensor& t = ckpt.tensor(e.name);
    require(t.dims() == e.shape, ErrorCode::kFormatError, "tensor " + e.name + " has unexpected shape");
    std::copy(t.values().begin(), t.values().end(), params.begin() + static_cast<std::ptrdiff_t>(e.offset));
  }
}

void save_denoiser(const std::string& path, const Denoiser& model) {
  Checkpoint ckpt;
  ckpt.kind = "denoiser";
  write_unet_meta(ckpt, model.config());
  write_unet_params(ckpt, model.layout(), model.params());
  write_checkpoint(path, ckpt);
}

Denoiser load_denoiser(const std::string& path) {
  const Checkpoint ckpt = read_checkpoint(path);
  require(ckpt.kind == "denoiser", ErrorCode::kFormatError, path + " holds a '" + ckpt.kind + "' checkpoint, not a denoiser");
  Denoiser model(read_unet_meta(ckpt));
  read_unet_params(ckpt, model.layout(), model.params());
  return model;
}

}  // namespace tedm::diffusion
