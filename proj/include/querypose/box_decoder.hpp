#pragma once

#include <torch/torch.h>

#include "querypose/attention.hpp"
#include "querypose/backbone.hpp"
#include "querypose/config.hpp"

namespace querypose {

// Refines boxes with center-shift / log-size deltas:
//   cx' = cx + dx*w, cy' = cy + dy*h, w' = w*exp(dw), h' = h*exp(dh)
// then clips to [0, image_w] x [0, image_h] keeping at least `min_size` of extent.
// Throws NumericError on a non-finite delta.
torch::Tensor apply_box_delta(const torch::Tensor& deltas, const torch::Tensor& boxes, double image_w,
                              double image_h, double min_size = 1.0);

// Clips corner boxes to the image, keeping each side at least `min_size` long.
torch::Tensor clip_boxes(const torch::Tensor& boxes, double image_w, double image_h, double min_size = 1.0);

// FPN level per box: floor(4 + log2(sqrt(area) / 224)) clamped to [2, 5],
// returned as an index 0..3 into FeaturePyramid::levels.
torch::Tensor assign_fpn_levels(const torch::Tensor& boxes);

// RoIAlign over P2..P5 with each box pooled from its assigned level.
// boxes (B, N, 4) -> (B, N, C, pool, pool).
torch::Tensor multi_level_roi_align(const FeaturePyramid& pyramid, const torch::Tensor& boxes, int pool,
                                    int sampling_ratio);

// Per-instance channel mixing whose weights are generated from each query.
// Two generated layers (d -> d_h -> d) act on every RoI position; the grid is
// flattened, projected back to d and fused into the query (residual + norm).
class DynamicChannelMlpImpl : public torch::nn::Module {
 public:
  DynamicChannelMlpImpl(int dim, int dynamic_dim, int pool);

  // queries (R, d), rois (R, d, pool, pool) -> (R, d)
  torch::Tensor forward(const torch::Tensor& queries, const torch::Tensor& rois);

  torch::nn::Linear& generator() { return generator_; }

 private:
  int dim_;
  int dynamic_dim_;
  int pool_;
  torch::nn::Linear generator_{nullptr};
  torch::nn::LayerNorm norm1_{nullptr};
  torch::nn::LayerNorm norm2_{nullptr};
  torch::nn::Linear out_{nullptr};
  torch::nn::LayerNorm out_norm_{nullptr};
  torch::nn::LayerNorm fuse_norm_{nullptr};
};
TORCH_MODULE(DynamicChannelMlp);

struct StageBoxOutput {
  torch::Tensor boxes;      // (B, N, 4) refined, clipped to the image
  torch::Tensor logits;     // (B, N) person-vs-background
  torch::Tensor queries;    // (B, N, d)
  torch::Tensor attention;  // (B, heads, N, N) instance self-attention weights
};

// One cascade stage of box refinement: instance self-attention, dynamic
// interaction with the RoI features, feed-forward, and the class/box heads.
class BoxStageImpl : public torch::nn::Module {
 public:
  explicit BoxStageImpl(const ModelConfig& config);

  StageBoxOutput forward(const FeaturePyramid& pyramid, const torch::Tensor& boxes, const torch::Tensor& queries,
                         double image_w, double image_h);

  SelfAttentionBlock& self_attention() { return attention_; }
  DynamicChannelMlp& dynamic_mlp() { return dynamic_; }
  torch::nn::Linear& class_head() { return cls_; }
  torch::nn::Sequential& box_head() { return reg_; }

  // Zeroes the last layer of every head so deltas and logits start at zero.
  void zero_heads();

 private:
  int pool_;
  int sampling_ratio_;
  SelfAttentionBlock attention_{nullptr};
  DynamicChannelMlp dynamic_{nullptr};
  FeedForwardBlock ffn_{nullptr};
  torch::nn::Linear cls_{nullptr};
  torch::nn::Sequential reg_{nullptr};
  torch::nn::Linear delta_{nullptr};
};
TORCH_MODULE(BoxStage);

}  // namespace querypose
