#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace querypose {

// How the instance queries travel through a stage.
enum class IterationMode {
  kSerial,   // box decoder, then keypoint decoder writes back into Q_I
  kBoxOnly,  // only the box decoder updates Q_I
};

// How part queries are carried from one stage to the next.
enum class PartIteration {
  kSelective,  // gated update from prior queries and fresh part embeddings
  kNone,       // fresh part embeddings replace the prior queries
};

enum class FlowMode {
  kBasic,     // flow density alone
  kResidual,  // Laplace base times a learned residual density
};

// Set-loss and matching weights. The matcher and the stage loss both read these.
struct LossWeights {
  double cls = 2.0;
  double l1 = 5.0;
  double giou = 2.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  // Adds an L1 keypoint term to the matching cost when enabled.
  bool keypoint_cost = false;
  double keypoint_cost_weight = 1.0;

  bool operator==(const LossWeights&) const = default;
};

struct OptimizerConfig {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double clip_norm = 1.0;
  double flow_lr_multiplier = 10.0;
  int warmup_steps = 0;
  // Step indices at which the learning rate drops by `lr_drop_factor`.
  std::vector<int> lr_drop_steps;
  double lr_drop_factor = 0.1;

  bool operator==(const OptimizerConfig&) const = default;
};

struct ModelConfig {
  int num_stages = 6;
  int num_queries = 100;
  int hidden_dim = 256;
  int part_dim = 128;
  // Part division scheme 'a'..'d', or a custom grouping when `custom_parts` is set.
  char scheme = 'c';
  std::optional<std::vector<std::vector<int>>> custom_parts;
  int num_keypoints = 17;

  int box_heads = 8;
  int part_heads = 4;
  int dynamic_dim = 64;
  int ffn_dim = 1024;
  int box_pool = 7;
  int pose_pool = 14;
  int spegm_channels = 256;
  int sampling_ratio = 2;
  std::array<int, 4> trunk_channels = {32, 64, 128, 256};

  IterationMode iteration = IterationMode::kSerial;
  PartIteration part_iteration = PartIteration::kSelective;
  FlowMode flow_mode = FlowMode::kResidual;
  int flow_layers = 4;
  int flow_hidden = 64;
  // Stops keypoint-loss gradients at the refined boxes used for pose RoIs.
  bool detach_pose_boxes = true;

  std::array<double, 3> pixel_mean = {0.485, 0.456, 0.406};
  std::array<double, 3> pixel_std = {0.229, 0.224, 0.225};

  LossWeights loss;
  OptimizerConfig optimizer;

  // S=3, N=20 with otherwise default widths.
  static ModelConfig desk();

  // Number of part queries implied by the scheme.
  [[nodiscard]] int num_parts() const;

  // Throws ConfigError naming the offending field.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

std::string to_string(IterationMode m);
std::string to_string(PartIteration m);
std::string to_string(FlowMode m);

}  // namespace querypose
