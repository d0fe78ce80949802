#include <cmath>

#include "tedm/heads/heads.hpp"
#include "tedm/rng.hpp"

namespace tedm::heads {

void LabelMask::validate() const {
  require(n_classes >= 2 && n_classes <= 255, ErrorCode::kShapeError, "label mask needs 2..255 classes");
  require(labels.size() == height * width, ErrorCode::kShapeError, "label mask size does not match its extent");
  for (auto v : labels) require(v < n_classes, ErrorCode::kShapeError, "label index outside class range");
}

Prediction vote(std::span<const nn::Matrix<double>> distributions, std::size_t height, std::size_t width) {
  require(!distributions.empty(), ErrorCode::kShapeError, "vote needs at least one voter");
  const auto k = distributions[0].rows();
  const auto n = distributions[0].cols();
  require(static_cast<std::size_t>(n) == height * width && k >= 2, ErrorCode::kShapeError,
          "vote: distribution shape does not match the mask extent");
  nn::Matrix<double> mean = nn::Matrix<double>::Zero(k, n);
  for (const auto& d : distributions) {
    require(d.rows() == k && d.cols() == n, ErrorCode::kShapeError, "vote: voters disagree on shape");
    mean += d;
  }
  mean /= static_cast<double>(distributions.size());

  Prediction out;
  out.mask = LabelMask(height, width, static_cast<int>(k));
  out.probabilities = Tensor::image(static_cast<std::size_t>(k), height, width);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double best = mean.col(j).maxCoeff();
    Eigen::Index arg = 0;
    while (mean(arg, j) < best - kTieTolerance) ++arg;
    out.mask.labels[static_cast<std::size_t>(j)] = static_cast<std::uint8_t>(arg);
    for (Eigen::Index c = 0; c < k; ++c) {
      out.probabilities[static_cast<std::size_t>(c * n + j)] = static_cast<float>(mean(c, j));
    }
  }
  return out;
}

namespace {

template <typename T>
nn::Matrix<T> latent_matrix(const Tensor& z) {
  return nn::ConstMatrixMap<float>(z.data(), static_cast<Eigen::Index>(z.channels()),
                                   static_cast<Eigen::Index>(z.plane()))
      .template cast<T>();
}

void check_labels_match(const LabelMask& labels, const Tensor& z) {
  labels.validate();
  require(labels.height == z.height() && labels.width == z.width(), ErrorCode::kShapeError,
          "label mask extent does not match latent spatial size");
}

void check_stack_for(const features::LatentStack& stack, const features::TimestepSet& steps, int width) {
  stack.validate();
  for (std::size_t s : steps.steps()) stack.at_step(s);
  require(static_cast<int>(stack.channels()) == width, ErrorCode::kShapeError,
          "head input width " + std::to_string(width) + " != latent width " + std::to_string(stack.channels()));
}

nn::Matrix<double> class_distribution(const PixelMLP<float>& mlp, const Tensor& z) {
  return softmax_columns<float>(mlp.forward(latent_matrix<float>(z))).cast<double>();
}

// Gathers pixel columns from a C x H x W tensor.
void gather_columns(const Tensor& z, std::size_t pixel, nn::Matrix<float>& x, Eigen::Index col) {
  const std::size_t plane = z.plane();
  for (std::size_t c = 0; c < z.channels(); ++c) x(static_cast<Eigen::Index>(c), col) = z[c * plane + pixel];
}

}  // namespace

template <typename T>
double tedm_loss_and_grad(const PixelMLP<T>& mlp, const features::LatentStack& stack,
                          const features::TimestepSet& steps, const LabelMask& labels, std::span<T> grad) {
  check_stack_for(stack, steps, mlp.in_channels());
  check_labels_match(labels, stack.latents.front());
  double total = 0.0;
  const double scale = 1.0 / static_cast<double>(steps.size());
  for (std::size_t s : steps.steps()) {
    typename PixelMLP<T>::Cache cache;
    const bool want = !grad.empty();
    const auto logits = mlp.forward(latent_matrix<T>(stack.at_step(s)), want ? &cache : nullptr);
    nn::Matrix<T> dlogits;
    total += cross_entropy<T>(logits, labels.labels, want ? &dlogits : nullptr, scale);
    if (want) mlp.backward(cache, dlogits, grad);
  }
  return total * scale;
}

template double tedm_loss_and_grad<float>(const PixelMLP<float>&, const features::LatentStack&,
                                          const features::TimestepSet&, const LabelMask&, std::span<float>);
template double tedm_loss_and_grad<double>(const PixelMLP<double>&, const features::LatentStack&,
                                           const features::TimestepSet&, const LabelMask&, std::span<double>);

double tedm_loss(const features::LatentStack& stack, const TedmHead& head, const LabelMask& labels) {
  return tedm_loss_and_grad<float>(head.shared, stack, head.steps, labels, {});
}

TedmHead train_tedm(std::span<const LabeledStack> data, const features::TimestepSet& steps, int n_classes,
                    const HeadTrainConfig& config) {
  require(!data.empty(), ErrorCode::kEmptyDataset, "train_tedm: no labeled latents");
  require(config.batch_pixels > 0 && config.learning_rate > 0, ErrorCode::kConfigError, "invalid head training config");
  const int width = static_cast<int>(data[0].stack.channels());
  for (const auto& d : data) {
    check_stack_for(d.stack, steps, width);
    check_labels_match(d.labels, d.stack.latents.front());
    require(d.labels.n_classes == n_classes, ErrorCode::kShapeError, "label masks disagree on class count");
  }
  TedmHead head{PixelMLP<float>(width, n_classes, config.hidden), steps};
  head.shared.init(derive_seed({config.seed, 1}));

  // Resolve per-image step tensors once.
  std::vector<std::vector<const Tensor*>> per_image(data.size());
  for (std::size_t i = 0; i < data.size(); ++i)
    for (std::size_t s : steps.steps()) per_image[i].push_back(&data[i].stack.at_step(s));

  Rng rng(derive_seed({config.seed, 2}));
  nn::Adam<float> adam(head.shared.param_count(), {.learning_rate = config.learning_rate});
  std::vector<float> grad(head.shared.param_count());
  const std::size_t n_steps = steps.size();
  nn::Matrix<float> x(width, static_cast<Eigen::Index>(config.batch_pixels * n_steps));
  std::vector<std::uint8_t> y(config.batch_pixels * n_steps);
  for (std::size_t it = 0; it < config.steps; ++it) {
    for (std::size_t b = 0; b < config.batch_pixels; ++b) {
      const auto img = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(data.size()) - 1));
      const auto pix = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(data[img].labels.pixels()) - 1));
      for (std::size_t k = 0; k < n_steps; ++k) {
        const auto col = static_cast<Eigen::Index>(b * n_steps + k);
        gather_columns(*per_image[img][k], pix, x, col);
        y[static_cast<std::size_t>(col)] = data[img].labels.labels[pix];
      }
    }
    PixelMLP<float>::Cache cache;
    const auto logits = head.shared.forward(x, &cache);
    nn::Matrix<float> dlogits;
    const double loss = cross_entropy<float>(logits, y, &dlogits);
    if (!std::isfinite(loss)) fail(ErrorCode::kDivergedTraining, "non-finite TEDM loss at step " + std::to_string(it));
    std::fill(grad.begin(), grad.end(), 0.0f);
    head.shared.backward(cache, dlogits, grad);
    adam.step(head.shared.params(), grad);
  }
  return head;
}

Prediction predict_vote(const features::LatentStack& stack, const TedmHead& head) {
  return predict_vote(stack, head, head.steps);
}

Prediction predict_vote(const features::LatentStack& stack, const TedmHead& head,
                        const features::TimestepSet& voters) {
  check_stack_for(stack, voters, head.shared.in_channels());
  std::vector<nn::Matrix<double>> dists;
  for (std::size_t s : voters.steps()) dists.push_back(class_distribution(head.shared, stack.at_step(s)));
  return vote(dists, stack.height(), stack.width());
}

LedmHead train_ledm(std::span<const LabeledFeatureMap> data, int n_classes, const LedmTrainConfig& config) {
  require(!data.empty(), ErrorCode::kEmptyDataset, "train_ledm: no labeled feature maps");
  require(config.n_members >= 1, ErrorCode::kConfigError, "LEDM needs at least one member");
  const auto& hc = config.head;
  require(hc.batch_pixels > 0 && hc.learning_rate > 0, ErrorCode::kConfigError, "invalid head training config");
  const int width = static_cast<int>(data[0].map.z.channels());
  for (const auto& d : data) {
    require(static_cast<int>(d.map.z.channels()) == width && d.map.step_order == data[0].map.step_order,
            ErrorCode::kShapeError, "feature maps disagree on width or step order");
    check_labels_match(d.labels, d.map.z);
    require(d.labels.n_classes == n_classes, ErrorCode::kShapeError, "label masks disagree on class count");
  }
  LedmHead head;
  head.rule = config.rule;
  head.steps = features::TimestepSet(data[0].map.step_order, data[0].map.step_order.back());
  for (std::size_t m = 0; m < config.n_members; ++m) {
    const std::uint64_t seed = config.shared_member_seed ? hc.seed : derive_seed({hc.seed, 0x1ED3, m});
    PixelMLP<float> mlp(width, n_classes, hc.hidden);
    mlp.init(derive_seed({seed, 1}));
    Rng rng(derive_seed({seed, 2}));
    nn::Adam<float> adam(mlp.param_count(), {.learning_rate = hc.learning_rate});
    std::vector<float> grad(mlp.param_count());
    nn::Matrix<float> x(width, static_cast<Eigen::Index>(hc.batch_pixels));
    std::vector<std::uint8_t> y(hc.batch_pixels);
    for (std::size_t it = 0; it < hc.steps; ++it) {
      for (std::size_t b = 0; b < hc.batch_pixels; ++b) {
        const auto img = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(data.size()) - 1));
        const auto pix =
            static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(data[img].labels.pixels()) - 1));
        gather_columns(data[img].map.z, pix, x, static_cast<Eigen::Index>(b));
        y[b] = data[img].labels.labels[pix];
      }
      PixelMLP<float>::Cache cache;
      const auto logits = mlp.forward(x, &cache);
      nn::Matrix<float> dlogits;
      const double loss = cross_entropy<float>(logits, y, &dlogits);
      if (!std::isfinite(loss)) {
        fail(ErrorCode::kDivergedTraining, "non-finite LEDM loss (member " + std::to_string(m) + ")");
      }
      std::fill(grad.begin(), grad.end(), 0.0f);
      mlp.backward(cache, dlogits, grad);
      adam.step(mlp.params(), grad);
    }
    head.members.push_back(std::move(mlp));
  }
  return head;
}

Prediction predict_ledm(const features::FeatureMap& z, const LedmHead& head) {
  require(!head.members.empty(), ErrorCode::kModelError, "LEDM head has no members");
  for (const auto& m : head.members) {
    require(static_cast<std::size_t>(m.in_channels()) == z.z.channels(), ErrorCode::kShapeError,
            "LEDM member width " + std::to_string(m.in_channels()) + " != feature map width " +
                std::to_string(z.z.channels()));
  }
  std::vector<nn::Matrix<double>> dists;
  for (const auto& m : head.members) dists.push_back(class_distribution(m, z.z));
  if (head.rule == EnsembleRule::kMajority) {
    for (auto& d : dists) {
      nn::Matrix<double> onehot = nn::Matrix<double>::Zero(d.rows(), d.cols());
      for (Eigen::Index j = 0; j < d.cols(); ++j) {
        const double best = d.col(j).maxCoeff();
        Eigen::Index arg = 0;
        while (d(arg, j) < best - kTieTolerance) ++arg;
        onehot(arg, j) = 1.0;
      }
      d = std::move(onehot);
    }
  }
  return vote(dists, z.z.height(), z.z.width());
}

}  // namespace tedm::heads
