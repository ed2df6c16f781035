#pragma once

#include <torch/torch.h>

#include <utility>
#include <vector>

#include "querypose/config.hpp"

namespace querypose {

enum class FlowBase { kGaussian, kLaplace };

// Log density of the standard base distribution, summed over the trailing axis.
torch::Tensor base_log_prob(const torch::Tensor& z, FlowBase base);

// One affine coupling over 2-D points: the `conditioned` coordinate passes
// through unchanged and parameterizes a scale/shift of the other one.
class AffineCouplingImpl : public torch::nn::Module {
 public:
  AffineCouplingImpl(int conditioned_axis, int hidden);

  // data -> latent: z_t = (x_t - shift) * exp(-log_scale); returns (z, log|det J|).
  std::pair<torch::Tensor, torch::Tensor> to_latent(const torch::Tensor& x);
  // latent -> data, the exact inverse of to_latent.
  std::pair<torch::Tensor, torch::Tensor> to_data(const torch::Tensor& z);

  // Zeroes the conditioner's output layer, making the coupling the identity.
  void set_identity();
  torch::nn::Sequential& conditioner() { return net_; }

 private:
  std::pair<torch::Tensor, torch::Tensor> scale_shift(const torch::Tensor& conditioner_input);

  int conditioned_;
  torch::nn::Sequential net_{nullptr};
};
TORCH_MODULE(AffineCoupling);

// RealNVP-style density over 2-D residuals: alternating affine couplings on top
// of a fixed standard base. Log-determinants come from the coupling scales.
class RealNvpFlowImpl : public torch::nn::Module {
 public:
  RealNvpFlowImpl(int layers, int hidden, FlowBase base = FlowBase::kGaussian);

  std::pair<torch::Tensor, torch::Tensor> to_latent(const torch::Tensor& x);
  std::pair<torch::Tensor, torch::Tensor> to_data(const torch::Tensor& z);

  // log P(x) = log base(to_latent(x)) + log|det d to_latent / dx|, over (..., 2).
  torch::Tensor log_prob(const torch::Tensor& x);

  // to_data(to_latent(x)); the identity up to rounding.
  torch::Tensor round_trip(const torch::Tensor& x);

  void set_identity();
  [[nodiscard]] FlowBase base() const { return base_; }
  std::vector<AffineCoupling>& layers() { return layers_; }

 private:
  FlowBase base_;
  std::vector<AffineCoupling> layers_;
};
TORCH_MODULE(RealNvpFlow);

struct RleLossInput {
  torch::Tensor mean;    // (R, K, 2) predicted mu
  torch::Tensor scale;   // (R, K, 2) predicted sigma > 0
  torch::Tensor target;  // (R, K, 2) box-normalized ground truth
  torch::Tensor mask;    // (R, K) bool; false entries contribute nothing
};

struct RleLossResult {
  torch::Tensor loss;             // scalar
  int supervised_instances = 0;   // instances with at least one unmasked keypoint
  bool no_supervision = false;    // every keypoint of every instance masked
};

// Residual log-likelihood keypoint loss. Per unmasked keypoint with
// r = (target - mean) / scale:
//   basic:    -log P_flow(r) + sum_axis log scale
//   residual: -log Q(r) - log P_flow(r) + sum_axis log scale, Q a unit-variance Laplace
// Keypoint terms are summed per instance and averaged over supervised instances.
RleLossResult rle_loss(const RleLossInput& input, RealNvpFlow& flow, FlowMode mode);

// Riemann-sum of exp(log_prob) over [-half_width, half_width]^2.
double flow_density_mass(RealNvpFlow& flow, double half_width = 6.0, int cells_per_axis = 600);

}  // namespace querypose
