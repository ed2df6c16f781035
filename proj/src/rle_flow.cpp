#include "querypose/rle_flow.hpp"

#include <cmath>
#include <numbers>

#include "querypose/errors.hpp"

namespace querypose {

namespace nn = torch::nn;

namespace {

// Laplace scale giving unit variance per axis.
const double kLaplaceScale = 1.0 / std::numbers::sqrt2;

}  // namespace

torch::Tensor base_log_prob(const torch::Tensor& z, FlowBase base) {
  if (base == FlowBase::kGaussian) {
    return -0.5 * z.pow(2).sum(-1) - std::log(2.0 * std::numbers::pi);
  }
  return -(z.abs() / kLaplaceScale).sum(-1) - 2.0 * std::log(2.0 * kLaplaceScale);
}

AffineCouplingImpl::AffineCouplingImpl(int conditioned_axis, int hidden) : conditioned_(conditioned_axis) {
  net_ = register_module("net", nn::Sequential(nn::Linear(1, hidden), nn::LeakyReLU(), nn::Linear(hidden, hidden),
                                               nn::LeakyReLU(), nn::Linear(hidden, 2)));
  torch::NoGradGuard guard;
  for (auto& p : net_->named_parameters()) {
    if (p.value().dim() == 2) {
      nn::init::xavier_uniform_(p.value(), 0.01);
    } else {
      p.value().zero_();
    }
  }
}

void AffineCouplingImpl::set_identity() {
  torch::NoGradGuard guard;
  auto last = net_[net_->size() - 1]->as<nn::Linear>();
  last->weight.zero_();
  last->bias.zero_();
}

std::pair<torch::Tensor, torch::Tensor> AffineCouplingImpl::scale_shift(const torch::Tensor& conditioner_input) {
  auto out = net_->forward(conditioner_input.unsqueeze(-1));
  return {torch::tanh(out.select(-1, 0)), out.select(-1, 1)};
}

std::pair<torch::Tensor, torch::Tensor> AffineCouplingImpl::to_latent(const torch::Tensor& x) {
  const int transformed = 1 - conditioned_;
  auto c = x.select(-1, conditioned_);
  auto [log_scale, shift] = scale_shift(c);
  auto t = (x.select(-1, transformed) - shift) * torch::exp(-log_scale);
  auto z = conditioned_ == 0 ? torch::stack({c, t}, -1) : torch::stack({t, c}, -1);
  return {z, -log_scale};
}

std::pair<torch::Tensor, torch::Tensor> AffineCouplingImpl::to_data(const torch::Tensor& z) {
  const int transformed = 1 - conditioned_;
  auto c = z.select(-1, conditioned_);
  auto [log_scale, shift] = scale_shift(c);
  auto t = z.select(-1, transformed) * torch::exp(log_scale) + shift;
  auto x = conditioned_ == 0 ? torch::stack({c, t}, -1) : torch::stack({t, c}, -1);
  return {x, log_scale};
}

RealNvpFlowImpl::RealNvpFlowImpl(int layers, int hidden, FlowBase base) : base_(base) {
  if (layers < 1) throw ConfigError("flow: at least one coupling layer is required");
  for (int i = 0; i < layers; ++i) {
    layers_.push_back(register_module("coupling" + std::to_string(i), AffineCoupling(i % 2, hidden)));
  }
}

std::pair<torch::Tensor, torch::Tensor> RealNvpFlowImpl::to_latent(const torch::Tensor& x) {
  if (x.size(-1) != 2) throw ShapeError("flow: inputs must be 2-D points");
  auto z = x;
  auto log_det = torch::zeros(x.sizes().slice(0, x.dim() - 1), x.options());
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    auto [next, ld] = (*it)->to_latent(z);
    z = next;
    log_det = log_det + ld;
  }
  return {z, log_det};
}

std::pair<torch::Tensor, torch::Tensor> RealNvpFlowImpl::to_data(const torch::Tensor& z) {
  if (z.size(-1) != 2) throw ShapeError("flow: inputs must be 2-D points");
  auto x = z;
  auto log_det = torch::zeros(z.sizes().slice(0, z.dim() - 1), z.options());
  for (auto& layer : layers_) {
    auto [next, ld] = layer->to_data(x);
    x = next;
    log_det = log_det + ld;
  }
  return {x, log_det};
}

torch::Tensor RealNvpFlowImpl::log_prob(const torch::Tensor& x) {
  auto [z, log_det] = to_latent(x);
  return base_log_prob(z, base_) + log_det;
}

torch::Tensor RealNvpFlowImpl::round_trip(const torch::Tensor& x) { return to_data(to_latent(x).first).first; }

void RealNvpFlowImpl::set_identity() {
  for (auto& layer : layers_) layer->set_identity();
}

RleLossResult rle_loss(const RleLossInput& input, RealNvpFlow& flow, FlowMode mode) {
  const auto& mean = input.mean;
  if (mean.dim() != 3 || mean.size(2) != 2 || input.scale.sizes() != mean.sizes() ||
      input.target.sizes() != mean.sizes() || input.mask.dim() != 2 || input.mask.size(0) != mean.size(0) ||
      input.mask.size(1) != mean.size(1)) {
    throw ShapeError("rle_loss: expected (R, K, 2) predictions/targets and an (R, K) mask");
  }
  RleLossResult result;
  const auto mask = input.mask.to(torch::kBool);
  const auto per_instance_count = mask.sum(1);
  result.supervised_instances = static_cast<int>((per_instance_count > 0).sum().item<int64_t>());
  if (result.supervised_instances == 0) {
    result.no_supervision = true;
    result.loss = (mean.sum() + input.scale.sum()) * 0.0;
    return result;
  }

  // Masked entries are replaced before the flow sees them, so they cannot leak
  // non-finite values into the gradient.
  const auto maskf = mask.to(mean.scalar_type()).unsqueeze(-1);
  const auto safe_scale = torch::where(maskf > 0, input.scale, torch::ones_like(input.scale));
  const auto residual = torch::where(maskf > 0, (input.target - mean) / safe_scale, torch::zeros_like(mean));

  auto nll = -flow->log_prob(residual) + torch::log(safe_scale).sum(-1);
  if (mode == FlowMode::kResidual) nll = nll - base_log_prob(residual, FlowBase::kLaplace);
  auto per_instance = (nll * maskf.squeeze(-1)).sum(1);
  result.loss = per_instance.sum() / static_cast<double>(result.supervised_instances);
  if (!torch::isfinite(result.loss).item<bool>()) throw NumericError("rle_loss: non-finite keypoint loss");
  return result;
}

double flow_density_mass(RealNvpFlow& flow, double half_width, int cells_per_axis) {
  torch::NoGradGuard guard;
  auto param = flow->parameters().front();
  const auto opts = param.options();
  const double h = 2.0 * half_width / cells_per_axis;
  auto axis = -half_width + (torch::arange(cells_per_axis, opts) + 0.5) * h;
  auto grid = torch::stack(torch::meshgrid({axis, axis}, "ij"), -1).reshape({-1, 2});
  auto density = torch::exp(flow->log_prob(grid)).to(torch::kFloat64);
  return density.sum().item<double>() * h * h;
}

}  // namespace querypose
