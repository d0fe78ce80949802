#include <sstream>

#include "tedm/checkpoint.hpp"
#include "tedm/heads/heads.hpp"

namespace tedm::heads {

namespace {

std::string join(const std::vector<std::size_t>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

std::vector<std::size_t> parse_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoul(item));
  return out;
}

void write_mlp(Checkpoint& ckpt, const std::string& prefix, const PixelMLP<float>& mlp) {
  for (const auto& e : mlp.layout().entries()) {
    auto p = mlp.params();
    std::vector<float> v(p.begin() + static_cast<std::ptrdiff_t>(e.offset),
                         p.begin() + static_cast<std::ptrdiff_t>(e.offset + e.size));
    ckpt.tensors.emplace_back(prefix + e.name, Tensor(e.shape, std::move(v)));
  }
}

PixelMLP<float> read_mlp(const Checkpoint& ckpt, const std::string& prefix) {
  const Tensor& w1 = ckpt.tensor(prefix + "l1.weight");
  const Tensor& w2 = ckpt.tensor(prefix + "l2.weight");
  const Tensor& w3 = ckpt.tensor(prefix + "l3.weight");
  require(w1.rank() == 2 && w2.rank() == 2 && w3.rank() == 2, ErrorCode::kFormatError, "malformed MLP tensors");
  PixelMLP<float> mlp(static_cast<int>(w1.dim(1)), static_cast<int>(w3.dim(0)),
                      {static_cast<int>(w1.dim(0)), static_cast<int>(w2.dim(0))});
  for (const auto& e : mlp.layout().entries()) {
    const Tensor& t = ckpt.tensor(prefix + e.name);
    require(t.dims() == e.shape, ErrorCode::kFormatError, "tensor " + prefix + e.name + " has unexpected shape");
    std::copy(t.values().begin(), t.values().end(), mlp.params().begin() + static_cast<std::ptrdiff_t>(e.offset));
  }
  return mlp;
}

Checkpoint read_kind(const std::string& path, const std::string& kind) {
  Checkpoint ckpt = read_checkpoint(path);
  require(ckpt.kind == kind, ErrorCode::kFormatError, path + " holds a '" + ckpt.kind + "' checkpoint, expected " + kind);
  return ckpt;
}

features::TimestepSet read_steps(const Checkpoint& ckpt) {
  const auto steps = parse_list(ckpt.meta_value("steps"));
  return features::TimestepSet(steps, steps.empty() ? 0 : *std::max_element(steps.begin(), steps.end()));
}

}  // namespace

void save_head(const std::string& path, const TedmHead& head) {
  Checkpoint ckpt;
  ckpt.kind = "tedm";
  ckpt.set_meta("steps", join(head.steps.steps()));
  write_mlp(ckpt, "shared.", head.shared);
  write_checkpoint(path, ckpt);
}

void save_head(const std::string& path, const LedmHead& head) {
  Checkpoint ckpt;
  ckpt.kind = "ledm";
  ckpt.set_meta("steps", join(head.steps.steps()));
  ckpt.set_meta("members", std::to_string(head.members.size()));
  ckpt.set_meta("rule", head.rule == EnsembleRule::kMajority ? "majority" : "mean_softmax");
  for (std::size_t m = 0; m < head.members.size(); ++m) write_mlp(ckpt, "member" + std::to_string(m) + ".", head.members[m]);
  write_checkpoint(path, ckpt);
}

void save_head(const std::string& path, const RidgeProbe& probe) {
  Checkpoint ckpt;
  ckpt.kind = "probe";
  ckpt.set_meta("step", std::to_string(probe.step));
  std::ostringstream lam;
  lam.precision(17);
  lam << probe.lambda;
  ckpt.set_meta("lambda", lam.str());
  const auto k = static_cast<std::size_t>(probe.weights.rows()), c = static_cast<std::size_t>(probe.weights.cols());
  std::vector<float> w(k * c), b(k);
  for (std::size_t i = 0; i < k; ++i) {
    b[i] = static_cast<float>(probe.bias[static_cast<Eigen::Index>(i)]);
    for (std::size_t j = 0; j < c; ++j)
      w[i * c + j] = static_cast<float>(probe.weights(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
  }
  ckpt.tensors.emplace_back("weight", Tensor({k, c}, std::move(w)));
  ckpt.tensors.emplace_back("bias", Tensor({k}, std::move(b)));
  write_checkpoint(path, ckpt);
}

void save_head(const std::string& path, const SupervisedModel& model) {
  Checkpoint ckpt;
  ckpt.kind = "supervised";
  diffusion::write_unet_meta(ckpt, model.net.config());
  diffusion::write_unet_params(ckpt, model.net.layout(), model.net.params());
  write_checkpoint(path, ckpt);
}

TedmHead load_tedm_head(const std::string& path) {
  const Checkpoint ckpt = read_kind(path, "tedm");
  return TedmHead{read_mlp(ckpt, "shared."), read_steps(ckpt)};
}

LedmHead load_ledm_head(const std::string& path) {
  const Checkpoint ckpt = read_kind(path, "ledm");
  LedmHead head;
  head.steps = read_steps(ckpt);
  head.rule = ckpt.meta_value("rule") == "majority" ? EnsembleRule::kMajority : EnsembleRule::kMeanSoftmax;
  const auto n = std::stoul(ckpt.meta_value("members"));
  for (std::size_t m = 0; m < n; ++m) head.members.push_back(read_mlp(ckpt, "member" + std::to_string(m) + "."));
  return head;
}

RidgeProbe load_probe(const std::string& path) {
  const Checkpoint ckpt = read_kind(path, "probe");
  RidgeProbe probe;
  probe.step = std::stoul(ckpt.meta_value("step"));
  probe.lambda = std::stod(ckpt.meta_value("lambda"));
  const Tensor& w = ckpt.tensor("weight");
  const Tensor& b = ckpt.tensor("bias");
  require(w.rank() == 2 && b.rank() == 1 && b.dim(0) == w.dim(0), ErrorCode::kFormatError, "malformed probe tensors");
  probe.weights = nn::ConstMatrixMap<float>(w.data(), static_cast<Eigen::Index>(w.dim(0)),
                                            static_cast<Eigen::Index>(w.dim(1)))
                      .cast<double>();
  probe.bias = nn::ConstVectorMap<float>(b.data(), static_cast<Eigen::Index>(b.dim(0))).cast<double>();
  return probe;
}

SupervisedModel load_supervised(const std::string& path) {
  const Checkpoint ckpt = read_kind(path, "supervised");
  SupervisedModel model{diffusion::UNet<float>(diffusion::read_unet_meta(ckpt))};
  diffusion::read_unet_params(ckpt, model.net.layout(), model.net.params());
  return model;
}

}  // namespace tedm::heads
