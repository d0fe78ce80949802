#include "tedm/runner/cost.hpp"

#include <cmath>

#include "tedm/error.hpp"

namespace tedm::runner {

double denoiser_macs(const diffusion::DenoiserConfig& c) {
  c.validate();
  const double td = c.time_dim;
  double macs = c.time_conditioned ? td * td : 0.0;  // time embedding linear
  auto conv = [&](double cin, double cout, double h, double w) {
    macs += cout * cin * 9.0 * h * w;
    if (c.time_conditioned) macs += cout * td;  // per-block time projection
  };
  const std::size_t levels = c.widths.size();
  std::vector<double> hs, ws;
  double h = c.height, w = c.width, cin = c.in_channels;
  for (std::size_t l = 0; l < levels; ++l) {
    if (l > 0) h = std::floor(h / 2), w = std::floor(w / 2);
    conv(cin, c.widths[l], h, w);
    hs.push_back(h);
    ws.push_back(w);
    cin = c.widths[l];
  }
  h = std::floor(h / 2), w = std::floor(w / 2);
  conv(cin, c.mid_width, h, w);
  conv(c.mid_width, c.mid_width, h, w);
  double prev = c.mid_width;
  for (std::size_t l = levels; l-- > 0;) {
    conv(prev + c.widths[l], c.widths[l], hs[l], ws[l]);
    prev = c.widths[l];
  }
  macs += c.out_channels * prev * 9.0 * c.height * c.width;
  return macs;
}

double mlp_macs(std::size_t in, std::size_t out, const std::vector<int>& hidden) {
  double macs = 0, prev = static_cast<double>(in);
  for (int hw : hidden) {
    macs += prev * hw;
    prev = hw;
  }
  return macs + prev * static_cast<double>(out);
}

CostReport estimate_cost(const ExperimentConfig& config, const std::string& head_kind) {
  config.validate();
  const HeadKind kind = HeadKind::parse(head_kind);
  const auto den = config.denoiser();
  CostReport r;
  r.head = kind.name();
  r.denoiser_macs = config.cost_denoiser_macs > 0 ? config.cost_denoiser_macs : denoiser_macs(den);
  r.n_pixels = config.cost_n_pixels > 0 ? config.cost_n_pixels : config.data.height * config.data.width;
  const std::size_t n_latent =
      config.cost_n_latent > 0 ? config.cost_n_latent : static_cast<std::size_t>(diffusion::UNet<float>(den).tap_channels());
  const auto classes = static_cast<std::size_t>(config.n_classes());

  std::size_t n_steps = 0;
  switch (kind.type) {
    case HeadKind::Type::kSupervised:
      r.denoiser_forwards = 1;
      r.total_macs = r.denoiser_macs;
      return r;
    case HeadKind::Type::kLedm: n_steps = config.ledm_steps.size(); break;
    case HeadKind::Type::kLedme:
    case HeadKind::Type::kTedm: n_steps = config.tedm_steps.size(); break;
    case HeadKind::Type::kTedmSingle: n_steps = 1; break;
  }
  r.denoiser_forwards = n_steps;
  const bool concat = kind.type == HeadKind::Type::kLedm || kind.type == HeadKind::Type::kLedme;
  r.mlp_input = concat ? n_steps * n_latent : n_latent;
  r.mlp_evaluations = concat ? 1 : n_steps;
  r.mlp_macs_per_pixel = mlp_macs(r.mlp_input, classes, config.head_hidden);
  r.total_macs = static_cast<double>(n_steps) * r.denoiser_macs +
                 static_cast<double>(r.mlp_evaluations) * static_cast<double>(r.n_pixels) * r.mlp_macs_per_pixel;
  return r;
}

}  // namespace tedm::runner
