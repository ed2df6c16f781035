#pragma once

#include <torch/torch.h>

#include <optional>

#include "querypose/attention.hpp"
#include "querypose/config.hpp"
#include "querypose/part_division.hpp"

namespace querypose {

struct PartEmbeddings {
  torch::Tensor embeddings;  // (R, M, d_p)
  torch::Tensor attention;   // (R, M, h, w), each map sums to 1
};

// Softmax-normalizes each of the M logit maps over space, pools `features`
// with them and projects the pooled vectors to the part dimension.
// logits (R, M, h, w), features (R, C, h, w).
PartEmbeddings pool_part_embeddings(const torch::Tensor& logits, const torch::Tensor& features,
                                    torch::nn::Linear& projection);

// Spatial part embedding generation: two 3x3 conv blocks on the pose RoI, a
// stride-2 transposed conv to double the resolution, a 3x3 conv down to M
// attention logits, then attention pooling and a linear projection.
class SpegmImpl : public torch::nn::Module {
 public:
  SpegmImpl(int in_channels, int hidden_channels, int num_parts, int part_dim);

  // rois (R, in_channels, H, W) -> embeddings (R, M, d_p), attention (R, M, 2H, 2W)
  PartEmbeddings forward(const torch::Tensor& rois);

  torch::nn::Conv2d& attention_conv() { return attention_conv_; }
  torch::nn::Linear& projection() { return projection_; }

 private:
  int in_channels_;
  int num_parts_;
  torch::nn::Sequential trunk_{nullptr};
  torch::nn::Conv2d attention_conv_{nullptr};
  torch::nn::Linear projection_{nullptr};
};
TORCH_MODULE(Spegm);

struct GatedUpdate {
  torch::Tensor queries;          // W_E * E + W_Q * Q_prev
  torch::Tensor embedding_gate;   // W_E in (0, 1)
  torch::Tensor query_gate;       // W_Q in (0, 1)
};

// Selective iteration: one MLP over (E + Q_prev) emits two sigmoid gates that
// weight the fresh embeddings and the previous queries elementwise.
class SelectiveIterationImpl : public torch::nn::Module {
 public:
  explicit SelectiveIterationImpl(int part_dim);

  GatedUpdate forward(const torch::Tensor& previous, const torch::Tensor& embeddings);

  torch::nn::Linear& gate_output() { return fc2_; }

 private:
  int part_dim_;
  torch::nn::Linear fc1_{nullptr};
  torch::nn::Linear fc2_{nullptr};
};
TORCH_MODULE(SelectiveIteration);

struct PoseEstimate {
  torch::Tensor mean;   // (..., K, 2) box-normalized
  torch::Tensor scale;  // (..., K, 2) in (0, 1)
};

// One non-shared linear head per part; head m emits (mu_x, mu_y, s_x, s_y) for
// the keypoints of part m, and the scales pass through a sigmoid.
class KeypointHeadsImpl : public torch::nn::Module {
 public:
  KeypointHeadsImpl(const PartDivision& division, int part_dim);

  // queries (R, M, d_p) -> PoseEstimate with (R, K, 2) tensors in keypoint order.
  PoseEstimate forward(const torch::Tensor& queries);

  torch::nn::Linear& head(int part) { return heads_.at(static_cast<std::size_t>(part)); }
  [[nodiscard]] const PartDivision& division() const { return division_; }

 private:
  PartDivision division_;
  std::vector<torch::nn::Linear> heads_;
  torch::Tensor inverse_order_;
};
TORCH_MODULE(KeypointHeads);

struct StageKeypointOutput {
  torch::Tensor part_queries;      // (B, N, M, d_p)
  PoseEstimate pose;               // (B, N, K, 2) each
  torch::Tensor attention;         // (B, N, M, 2H, 2W)
  torch::Tensor part_attention;    // (B*N, heads, M, M)
  torch::Tensor instance_queries;  // (B, N, d) after write-back; undefined in box-only mode
  std::optional<GatedUpdate> gates;
};

// One cascade stage of part-query keypoint regression:
// RoIAlign(P2, boxes) -> SPEGM -> SIM -> part self-attention -> per-part heads.
// In serial mode the pooled part queries are also written back into the
// instance queries.
class KeypointStageImpl : public torch::nn::Module {
 public:
  explicit KeypointStageImpl(const ModelConfig& config);

  StageKeypointOutput forward(const torch::Tensor& p2, const torch::Tensor& boxes, const torch::Tensor& part_queries,
                              const torch::Tensor& instance_queries);

  Spegm& spegm() { return spegm_; }
  SelfAttentionBlock& part_attention() { return attention_; }
  KeypointHeads& heads() { return heads_; }
  [[nodiscard]] bool has_selective_iteration() const { return !sim_.is_empty(); }
  SelectiveIteration& sim() { return sim_; }

 private:
  int pool_;
  int sampling_ratio_;
  Spegm spegm_{nullptr};
  SelectiveIteration sim_{nullptr};
  SelfAttentionBlock attention_{nullptr};
  KeypointHeads heads_{nullptr};
  torch::nn::Linear writeback_{nullptr};
  torch::nn::LayerNorm writeback_norm_{nullptr};
};
TORCH_MODULE(KeypointStage);

}  // namespace querypose
