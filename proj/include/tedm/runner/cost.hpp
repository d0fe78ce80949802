#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tedm/diffusion/unet.hpp"
#include "tedm/runner/config.hpp"

namespace tedm::runner {

// Multiply-accumulates of one denoiser forward pass at the configured
// resolution: every conv contributes out * in * k^2 * H * W, linear layers
// in * out.
double denoiser_macs(const diffusion::DenoiserConfig& config);

// Per-pixel MACs of the classifier MLP: in*h1 + h1*h2 + ... + h_last*out.
double mlp_macs(std::size_t in, std::size_t out, const std::vector<int>& hidden);

struct CostReport {
  std::string head;
  std::size_t denoiser_forwards = 0;  // |S|, or 1 for baselines
  double denoiser_macs = 0;           // N
  std::size_t mlp_input = 0;
  std::size_t mlp_evaluations = 0;    // per pixel
  double mlp_macs_per_pixel = 0;      // N_MLP
  std::size_t n_pixels = 0;
  double total_macs = 0;
};

// baselines: N
// ledm/ledme: |S| N + n_pixels N_MLP(|S| n_latent, classes)
// tedm:       |S| N + |S| n_pixels N_MLP(n_latent, classes)
// tedm@t:     one step of the above
CostReport estimate_cost(const ExperimentConfig& config, const std::string& head_kind);

}  // namespace tedm::runner
