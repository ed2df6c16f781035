#include "querypose/attention.hpp"

#include <cmath>
#include <string>

#include "querypose/errors.hpp"

namespace querypose {

SelfAttentionBlockImpl::SelfAttentionBlockImpl(int dim, int heads) : dim_(dim), heads_(heads) {
  if (heads <= 0 || dim % heads != 0) {
    throw ConfigError("attention: dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) + " heads");
  }
  qkv_ = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
  out_ = register_module("out", torch::nn::Linear(dim, dim));
  norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  torch::nn::init::xavier_uniform_(qkv_->weight);
  torch::nn::init::zeros_(qkv_->bias);
  torch::nn::init::xavier_uniform_(out_->weight);
  torch::nn::init::zeros_(out_->bias);
}

AttentionOutput SelfAttentionBlockImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 3 || x.size(2) != dim_) throw ShapeError("attention: expected (B, L, " + std::to_string(dim_) + ")");
  const int64_t batch = x.size(0);
  const int64_t len = x.size(1);
  const int64_t head_dim = dim_ / heads_;
  auto qkv = qkv_->forward(x).view({batch, len, 3, heads_, head_dim}).permute({2, 0, 3, 1, 4});
  auto q = qkv[0];
  auto k = qkv[1];
  auto v = qkv[2];
  auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(head_dim));
  auto weights = torch::softmax(scores, -1);
  auto attended = torch::matmul(weights, v).permute({0, 2, 1, 3}).reshape({batch, len, dim_});
  return {norm_->forward(x + out_->forward(attended)), weights};
}

FeedForwardBlockImpl::FeedForwardBlockImpl(int dim, int hidden) {
  fc1_ = register_module("fc1", torch::nn::Linear(dim, hidden));
  fc2_ = register_module("fc2", torch::nn::Linear(hidden, dim));
  norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
}

torch::Tensor FeedForwardBlockImpl::forward(const torch::Tensor& x) {
  return norm_->forward(x + fc2_->forward(torch::relu(fc1_->forward(x))));
}

}  // namespace querypose
