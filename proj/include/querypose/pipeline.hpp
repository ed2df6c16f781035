#pragma once

#include <torch/torch.h>

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "querypose/annotation.hpp"
#include "querypose/backbone.hpp"
#include "querypose/box_decoder.hpp"
#include "querypose/config.hpp"
#include "querypose/keypoint_decoder.hpp"
#include "querypose/matching.hpp"
#include "querypose/rle_flow.hpp"

namespace querypose {

struct StageOutput {
  StageBoxOutput box;
  StageKeypointOutput keypoint;

  [[nodiscard]] StagePredictions predictions() const {
    return {box.logits, box.boxes, keypoint.pose.mean, keypoint.pose.scale};
  }
};

struct ForwardOutput {
  std::vector<StageOutput> stages;
  double image_w = 0.0;
  double image_h = 0.0;
};

// The full cascade: backbone, then S stages of box decoder followed by
// keypoint decoder, plus the shared flow used by the keypoint loss.
class QueryPoseModelImpl : public torch::nn::Module {
 public:
  explicit QueryPoseModelImpl(const ModelConfig& config);

  // images (B, 3, H, W), normalized.
  ForwardOutput forward(const torch::Tensor& images);

  [[nodiscard]] const ModelConfig& config() const { return config_; }
  [[nodiscard]] const PartDivision& division() const { return division_; }

  Backbone& backbone() { return backbone_; }
  BoxStage& box_stage(int s) { return box_stages_.at(static_cast<std::size_t>(s)); }
  KeypointStage& keypoint_stage(int s) { return keypoint_stages_.at(static_cast<std::size_t>(s)); }
  RealNvpFlow& flow() { return flow_; }
  torch::Tensor& proposals() { return proposals_; }

  // Parameters outside the flow, and the flow's own (for the 10x group).
  std::vector<torch::Tensor> regression_parameters();
  std::vector<torch::Tensor> flow_parameters();

  // Initial proposals as absolute corner boxes for an image of the given size, (B, N, 4).
  torch::Tensor initial_boxes(int64_t batch, double image_w, double image_h) const;

 private:
  ModelConfig config_;
  PartDivision division_;
  Backbone backbone_{nullptr};
  torch::Tensor proposals_;       // (N, 4) corners in [0, 1] image-relative units
  torch::Tensor query_embed_;     // (N, d)
  torch::Tensor part_embed_;      // (M, d_p), shared by every instance
  std::vector<BoxStage> box_stages_;
  std::vector<KeypointStage> keypoint_stages_;
  RealNvpFlow flow_{nullptr};
};
TORCH_MODULE(QueryPoseModel);

// (1/K) * sum_k (1 - sigma_k) * instance_score, sigma_k the mean of the two axis scales.
double pose_score(const torch::Tensor& scale, double instance_score);

struct InferOptions {
  double score_threshold = 0.3;
  int top_k = 20;
};

// Last-stage predictions only, scored, thresholded, sorted by score and cut to
// top_k. No suppression or grouping is applied. Coordinates are divided by
// `coordinate_scale` to map back to the original image.
std::vector<ScoredPose> poses_from_stage(const StageOutput& stage, int64_t image_index, const InferOptions& options,
                                         double coordinate_scale = 1.0);

// Runs the model on one normalized image (3, H, W) or a batch (B, 3, H, W).
std::vector<std::vector<ScoredPose>> infer(QueryPoseModel& model, const torch::Tensor& images,
                                           const InferOptions& options);

struct TrainBatch {
  torch::Tensor images;               // (B, 3, H, W), normalized
  std::vector<ImageTargets> targets;  // one per image
};

struct LossBreakdown {
  // "s<stage>.cls", "s<stage>.l1", "s<stage>.giou" (weighted) and "s<stage>.keypoint".
  std::map<std::string, double> terms;
  double total = 0.0;
  double learning_rate = 0.0;
  int64_t step = 0;
  bool no_keypoint_supervision = false;
};

// Sums the per-stage losses over a forward pass; also reports the breakdown.
std::pair<torch::Tensor, LossBreakdown> compute_loss(QueryPoseModel& model, const ForwardOutput& forward,
                                                     const std::vector<ImageTargets>& targets);

// AdamW over the model with the flow in its own parameter group at a scaled
// learning rate, optional warmup/step schedule and gradient-norm clipping.
class Trainer {
 public:
  explicit Trainer(QueryPoseModel model);

  // One optimizer step. Throws NumericError naming the first non-finite term
  // without touching the parameters.
  LossBreakdown step(const TrainBatch& batch);

  [[nodiscard]] int64_t step_count() const { return step_; }
  void set_step_count(int64_t step) { step_ = step; }
  [[nodiscard]] double learning_rate_at(int64_t step) const;

  QueryPoseModel& model() { return model_; }
  torch::optim::AdamW& optimizer() { return *optimizer_; }

 private:
  void apply_schedule();

  QueryPoseModel model_;
  std::unique_ptr<torch::optim::AdamW> optimizer_;
  int64_t step_ = 0;
};

inline constexpr int64_t kCheckpointFormatVersion = 1;

struct CheckpointContents {
  ModelConfig config;
  int64_t step = 0;
  std::string extra;  // free-form JSON text carried alongside (run config)
};

// Single archive with the format version, the model config as JSON text, every
// named parameter and buffer, and optionally the optimizer state.
void save_checkpoint(const std::string& path, QueryPoseModel& model, const Trainer* trainer = nullptr,
                     const std::string& extra = "");

// Reads only the header (version, config, step).
CheckpointContents read_checkpoint_header(const std::string& path);

// Loads parameters into `model`; a config that disagrees on any structural
// field raises ConfigConflictError. Restores the optimizer state when
// `trainer` is given and the checkpoint carries one.
CheckpointContents load_checkpoint(const std::string& path, QueryPoseModel& model, Trainer* trainer = nullptr);

// Builds a fresh model from the checkpoint's config and loads it.
QueryPoseModel load_model(const std::string& path);

}  // namespace querypose
