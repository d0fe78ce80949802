#include <algorithm>
#include <cmath>
#include <numeric>

#include "lbfgs.hpp"
#include "tedm/heads/heads.hpp"
#include "tedm/rng.hpp"

namespace tedm::heads {

double probe_objective(const nn::Matrix<double>& weights, const nn::Vector<double>& bias,
                       const nn::Matrix<double>& x, std::span<const std::uint8_t> y, double lambda,
                       nn::Matrix<double>* grad_w, nn::Vector<double>* grad_b) {
  nn::Matrix<double> logits = weights * x;
  logits.colwise() += bias;
  nn::Matrix<double> dlogits;
  const double ce = cross_entropy<double>(logits, y, grad_w ? &dlogits : nullptr);
  if (grad_w) {
    *grad_w = dlogits * x.transpose() + 2.0 * lambda * weights;
    *grad_b = dlogits.rowwise().sum();
  }
  return ce + lambda * weights.squaredNorm();
}

RidgeProbe train_probe(std::span<const ProbeSample> data, std::size_t step, double lambda, int n_classes,
                       const ProbeTrainConfig& config) {
  require(!data.empty(), ErrorCode::kEmptyDataset, "train_probe: no samples");
  require(lambda >= 0.0 && std::isfinite(lambda), ErrorCode::kRangeError, "ridge strength must be >= 0");
  const std::size_t c = data[0].latent.channels();
  std::size_t total = 0;
  for (const auto& d : data) {
    if (d.step != step) {
      fail(ErrorCode::kMixedStepError,
           "probe for step " + std::to_string(step) + " given a latent from step " + std::to_string(d.step));
    }
    require(d.latent.rank() == 3 && d.latent.channels() == c, ErrorCode::kShapeError, "probe latents disagree on width");
    d.labels.validate();
    require(d.labels.height == d.latent.height() && d.labels.width == d.latent.width() &&
                d.labels.n_classes == n_classes,
            ErrorCode::kShapeError, "probe label mask does not match its latent");
    total += d.labels.pixels();
  }

  // (sample, pixel) index pairs, optionally subsampled
  std::vector<std::pair<std::size_t, std::size_t>> picks;
  picks.reserve(total);
  for (std::size_t i = 0; i < data.size(); ++i)
    for (std::size_t p = 0; p < data[i].labels.pixels(); ++p) picks.emplace_back(i, p);
  if (config.max_pixels > 0 && picks.size() > config.max_pixels) {
    Rng rng(derive_seed({config.seed, 0x9A0BE}));
    for (std::size_t i = 0; i < config.max_pixels; ++i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(picks.size()) - 1));
      std::swap(picks[i], picks[j]);
    }
    picks.resize(config.max_pixels);
  }
  const auto n = static_cast<Eigen::Index>(picks.size());
  nn::Matrix<double> x(static_cast<Eigen::Index>(c), n);
  std::vector<std::uint8_t> y(picks.size());
  for (Eigen::Index j = 0; j < n; ++j) {
    const auto [i, p] = picks[static_cast<std::size_t>(j)];
    const auto& z = data[i].latent;
    for (std::size_t ch = 0; ch < c; ++ch) x(static_cast<Eigen::Index>(ch), j) = z[ch * z.plane() + p];
    y[static_cast<std::size_t>(j)] = data[i].labels.labels[p];
  }

  const auto k = static_cast<Eigen::Index>(n_classes);
  const Eigen::Index nw = k * static_cast<Eigen::Index>(c);
  auto unpack = [&](const Eigen::VectorXd& theta, nn::Matrix<double>& w, nn::Vector<double>& b) {
    w = Eigen::Map<const nn::Matrix<double>>(theta.data(), k, static_cast<Eigen::Index>(c));
    b = theta.tail(k);
  };
  auto objective = [&](const Eigen::VectorXd& theta, Eigen::VectorXd& g) {
    nn::Matrix<double> w, gw;
    nn::Vector<double> b, gb;
    unpack(theta, w, b);
    const double f = probe_objective(w, b, x, y, lambda, &gw, &gb);
    g.resize(theta.size());
    g.head(nw) = Eigen::Map<const Eigen::VectorXd>(gw.data(), nw);
    g.tail(k) = gb;
    return f;
  };
  const Eigen::VectorXd theta =
      detail::lbfgs_minimize(objective, Eigen::VectorXd::Zero(nw + k), config.max_iterations, config.gradient_tolerance);
  RidgeProbe probe;
  unpack(theta, probe.weights, probe.bias);
  probe.lambda = lambda;
  probe.step = step;
  return probe;
}

Prediction predict_probe(const Tensor& latent, const RidgeProbe& probe) {
  require(latent.rank() == 3 && static_cast<Eigen::Index>(latent.channels()) == probe.weights.cols(),
          ErrorCode::kShapeError, "probe width does not match latent");
  const nn::Matrix<double> x = nn::ConstMatrixMap<float>(latent.data(), static_cast<Eigen::Index>(latent.channels()),
                                                         static_cast<Eigen::Index>(latent.plane()))
                                   .cast<double>();
  nn::Matrix<double> logits = probe.weights * x;
  logits.colwise() += probe.bias;
  const nn::Matrix<double> p = softmax_columns<double>(logits);
  return vote(std::span<const nn::Matrix<double>>(&p, 1), latent.height(), latent.width());
}

}  // namespace tedm::heads
