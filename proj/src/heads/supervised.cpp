#include <cmath>

#include "tedm/heads/heads.hpp"
#include "tedm/rng.hpp"

namespace tedm::heads {

SupervisedModel train_supervised_baseline(std::span<const LabeledImage> data, diffusion::DenoiserConfig backbone,
                                          int n_classes, const SupervisedTrainConfig& config) {
  require(!data.empty(), ErrorCode::kEmptyDataset, "supervised baseline: no labeled images");
  require(config.batch_size >= 1 && config.learning_rate > 0, ErrorCode::kConfigError, "invalid training config");
  backbone.out_channels = n_classes;
  backbone.time_conditioned = false;
  backbone.zero_init_output = false;
  for (const auto& d : data) {
    d.labels.validate();
    const auto& img = d.image;
    require(img.rank() == 3 && img.channels() == static_cast<std::size_t>(backbone.in_channels) &&
                img.height() == static_cast<std::size_t>(backbone.height) &&
                img.width() == static_cast<std::size_t>(backbone.width),
            ErrorCode::kShapeError, "image does not match the backbone input");
    require(d.labels.height == img.height() && d.labels.width == img.width() && d.labels.n_classes == n_classes,
            ErrorCode::kShapeError, "label mask does not match its image");
  }
  SupervisedModel model{diffusion::UNet<float>(backbone)};
  model.net.init(derive_seed({config.seed, 1}));

  Rng rng(derive_seed({config.seed, 2}));
  nn::Adam<float> adam(model.net.param_count(), {.learning_rate = config.learning_rate});
  std::vector<float> grad(model.net.param_count());
  const double inv_batch = 1.0 / static_cast<double>(config.batch_size);
  for (std::size_t it = 0; it < config.steps; ++it) {
    std::fill(grad.begin(), grad.end(), 0.0f);
    double loss = 0.0;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const auto& d = data[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(data.size()) - 1))];
      diffusion::UNet<float>::Cache cache;
      const auto out = model.net.forward(nn::to_feature_map<float>(d.image), 0.0, &cache);
      nn::FeatureMap<float> dout;
      dout.height = out.height;
      dout.width = out.width;
      loss += cross_entropy<float>(out.values, d.labels.labels, &dout.values, inv_batch);
      model.net.backward(cache, dout, grad);
    }
    loss *= inv_batch;
    if (!std::isfinite(loss)) fail(ErrorCode::kDivergedTraining, "non-finite supervised loss at step " + std::to_string(it));
    adam.step(model.net.params(), grad);
  }
  return model;
}

Prediction predict_supervised(const Tensor& image, const SupervisedModel& model) {
  const auto out = model.net.forward(nn::to_feature_map<float>(image), 0.0);
  const nn::Matrix<double> p = softmax_columns<float>(out.values).cast<double>();
  return vote(std::span<const nn::Matrix<double>>(&p, 1), image.height(), image.width());
}

}  // namespace tedm::heads
