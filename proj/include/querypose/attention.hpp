#pragma once

#include <torch/torch.h>

namespace querypose {

struct AttentionOutput {
  torch::Tensor values;   // (B, L, D)
  torch::Tensor weights;  // (B, heads, L, L), rows sum to 1
};

// Multi-head self-attention over the L tokens of each batch row, followed by
// residual add and layer normalization. Rows never attend across the batch.
class SelfAttentionBlockImpl : public torch::nn::Module {
 public:
  SelfAttentionBlockImpl(int dim, int heads);

  AttentionOutput forward(const torch::Tensor& x);

  [[nodiscard]] int heads() const { return heads_; }

 private:
  int dim_;
  int heads_;
  torch::nn::Linear qkv_{nullptr};
  torch::nn::Linear out_{nullptr};
  torch::nn::LayerNorm norm_{nullptr};
};
TORCH_MODULE(SelfAttentionBlock);

// Two-layer feed-forward block with residual add and layer normalization.
class FeedForwardBlockImpl : public torch::nn::Module {
 public:
  FeedForwardBlockImpl(int dim, int hidden);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Linear fc1_{nullptr};
  torch::nn::Linear fc2_{nullptr};
  torch::nn::LayerNorm norm_{nullptr};
};
TORCH_MODULE(FeedForwardBlock);

}  // namespace querypose
