#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tedm/diffusion/diffusion.hpp"
#include "tedm/features/features.hpp"
#include "tedm/heads/mlp.hpp"
#include "tedm/tensor.hpp"

namespace tedm::heads {

struct LabelMask {
  std::size_t height = 0, width = 0;
  int n_classes = 2;
  std::vector<std::uint8_t> labels;  // row-major

  LabelMask() = default;
  LabelMask(std::size_t h, std::size_t w, int classes, std::uint8_t fill = 0)
      : height(h), width(w), n_classes(classes), labels(h * w, fill) {}

  std::size_t pixels() const noexcept { return labels.size(); }
  void validate() const;
  friend bool operator==(const LabelMask&, const LabelMask&) = default;
};

// Hard labels plus the per-pixel class distribution they were taken from.
struct Prediction {
  LabelMask mask;
  Tensor probabilities;  // n_classes x H x W
};

// Tolerance under which two averaged probabilities count as tied; ties go to
// the lowest class index.
inline constexpr double kTieTolerance = 1e-9;

// Averages per-voter class distributions (each classes x N, columns sum to
// one) and takes the argmax per column.
Prediction vote(std::span<const nn::Matrix<double>> distributions, std::size_t height, std::size_t width);

struct HeadTrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_pixels = 256;
  double learning_rate = 1e-4;
  std::uint64_t seed = 0;
  std::vector<int> hidden{128, 32};
};

// Shared MLP applied to every step's latents; predictions averaged at test time.
struct TedmHead {
  PixelMLP<float> shared;
  features::TimestepSet steps;
};

struct LabeledStack {
  features::LatentStack stack;
  LabelMask labels;
};

// Mean over steps in the head's set and over pixels of per-pixel cross-entropy.
double tedm_loss(const features::LatentStack& stack, const TedmHead& head, const LabelMask& labels);

template <typename T>
double tedm_loss_and_grad(const PixelMLP<T>& mlp, const features::LatentStack& stack,
                          const features::TimestepSet& steps, const LabelMask& labels, std::span<T> grad);

TedmHead train_tedm(std::span<const LabeledStack> data, const features::TimestepSet& steps, int n_classes,
                    const HeadTrainConfig& config);

Prediction predict_vote(const features::LatentStack& stack, const TedmHead& head);
// Vote restricted to a subset of the head's steps (single-step ablation uses one).
Prediction predict_vote(const features::LatentStack& stack, const TedmHead& head,
                        const features::TimestepSet& voters);

enum class EnsembleRule { kMeanSoftmax, kMajority };

// Ensemble of MLPs over concatenated multi-step features.
struct LedmHead {
  std::vector<PixelMLP<float>> members;
  features::TimestepSet steps;
  EnsembleRule rule = EnsembleRule::kMeanSoftmax;
};

struct LabeledFeatureMap {
  features::FeatureMap map;
  LabelMask labels;
};

struct LedmTrainConfig {
  HeadTrainConfig head;
  std::size_t n_members = 10;
  // Each member trains from derive_seed(seed, member) unless this is set, in
  // which case every member uses head.seed.
  bool shared_member_seed = false;
  EnsembleRule rule = EnsembleRule::kMeanSoftmax;
};

LedmHead train_ledm(std::span<const LabeledFeatureMap> data, int n_classes, const LedmTrainConfig& config);
Prediction predict_ledm(const features::FeatureMap& z, const LedmHead& head);

// Linear softmax classifier on one step's latents with an L2 penalty on the
// weights (bias unpenalised).
struct RidgeProbe {
  nn::Matrix<double> weights;  // classes x c_total
  nn::Vector<double> bias;     // classes
  double lambda = 1.0;
  std::size_t step = 0;
};

struct ProbeSample {
  Tensor latent;  // c_total x H x W
  LabelMask labels;
  std::size_t step = 0;
};

struct ProbeTrainConfig {
  std::size_t max_iterations = 200;
  std::size_t max_pixels = 32768;  // random subsample across the training set
  double gradient_tolerance = 1e-7;
  std::uint64_t seed = 0;
};

// Penalised objective: mean CE + lambda * ||W||^2. Gradient written to
// grad_w / grad_b when non-null.
double probe_objective(const nn::Matrix<double>& weights, const nn::Vector<double>& bias,
                       const nn::Matrix<double>& x, std::span<const std::uint8_t> y, double lambda,
                       nn::Matrix<double>* grad_w, nn::Vector<double>* grad_b);

RidgeProbe train_probe(std::span<const ProbeSample> data, std::size_t step, double lambda, int n_classes,
                       const ProbeTrainConfig& config);
Prediction predict_probe(const Tensor& latent, const RidgeProbe& probe);

// Same encoder-decoder as the denoiser, per-pixel class logits out, no time
// conditioning.
struct SupervisedModel {
  diffusion::UNet<float> net;
};

struct LabeledImage {
  Tensor image;
  LabelMask labels;
};

struct SupervisedTrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 4;
  double learning_rate = 1e-4;
  std::uint64_t seed = 0;
};

SupervisedModel train_supervised_baseline(std::span<const LabeledImage> data, diffusion::DenoiserConfig backbone,
                                          int n_classes, const SupervisedTrainConfig& config);
Prediction predict_supervised(const Tensor& image, const SupervisedModel& model);

// Checkpoint I/O; the checkpoint "kind" field carries the head tag.
void save_head(const std::string& path, const TedmHead& head);
void save_head(const std::string& path, const LedmHead& head);
void save_head(const std::string& path, const RidgeProbe& probe);
void save_head(const std::string& path, const SupervisedModel& model);
TedmHead load_tedm_head(const std::string& path);
LedmHead load_ledm_head(const std::string& path);
RidgeProbe load_probe(const std::string& path);
SupervisedModel load_supervised(const std::string& path);

}  // namespace tedm::heads
