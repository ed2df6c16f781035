#include "querypose/config.hpp"

#include <string>

#include "querypose/errors.hpp"
#include "querypose/part_division.hpp"

namespace querypose {

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.num_stages = 3;
  c.num_queries = 20;
  return c;
}

namespace {

PartDivision division_for(const ModelConfig& c) {
  if (c.custom_parts) return custom_part_division(*c.custom_parts, c.num_keypoints);
  return part_division(c.scheme);
}

void require(bool ok, const std::string& field, const std::string& message) {
  if (!ok) throw ConfigError("model." + field + ": " + message);
}

}  // namespace

int ModelConfig::num_parts() const { return division_for(*this).num_parts(); }

void ModelConfig::validate() const {
  require(num_stages >= 1, "num_stages", "must be at least 1");
  require(num_queries >= 1, "num_queries", "must be at least 1");
  require(hidden_dim >= 1, "hidden_dim", "must be positive");
  require(part_dim >= 1, "part_dim", "must be positive");
  require(box_heads >= 1 && hidden_dim % box_heads == 0, "box_heads", "hidden_dim must be divisible by the head count");
  require(part_heads >= 1 && part_dim % part_heads == 0, "part_heads", "part_dim must be divisible by the head count");
  require(dynamic_dim >= 1, "dynamic_dim", "must be positive");
  require(ffn_dim >= 1, "ffn_dim", "must be positive");
  require(box_pool >= 1, "box_pool", "must be positive");
  require(pose_pool >= 1, "pose_pool", "must be positive");
  require(spegm_channels >= 1, "spegm_channels", "must be positive");
  require(sampling_ratio >= 1, "sampling_ratio", "must be positive");
  for (int ch : trunk_channels) require(ch >= 1, "trunk_channels", "must be positive");
  require(flow_layers >= 1, "flow_layers", "must be at least 1");
  require(flow_hidden >= 1, "flow_hidden", "must be positive");
  for (double s : pixel_std) require(s > 0.0, "pixel_std", "must be positive");
  require(loss.cls >= 0 && loss.l1 >= 0 && loss.giou >= 0, "loss", "weights must be non-negative");
  require(optimizer.lr > 0, "optimizer.lr", "must be positive");
  require(optimizer.clip_norm >= 0, "optimizer.clip_norm", "must be non-negative");
  require(optimizer.flow_lr_multiplier > 0, "optimizer.flow_lr_multiplier", "must be positive");
  PartDivision division;
  try {
    division = division_for(*this);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("model.scheme: ") + e.what());
  }
  require(division.num_keypoints == num_keypoints, "num_keypoints",
          "part division covers " + std::to_string(division.num_keypoints) + " keypoints");
}

std::string to_string(IterationMode m) { return m == IterationMode::kSerial ? "serial" : "box_only"; }
std::string to_string(PartIteration m) { return m == PartIteration::kSelective ? "selective" : "none"; }
std::string to_string(FlowMode m) { return m == FlowMode::kBasic ? "basic" : "residual"; }

}  // namespace querypose
