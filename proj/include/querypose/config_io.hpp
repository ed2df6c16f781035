#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <string>

#include "querypose/config.hpp"
#include "querypose/synthetic.hpp"

namespace querypose {

struct DataConfig {
  std::string source = "synthetic";  // "synthetic" or "coco"
  SyntheticConfig synthetic;
  int num_images = 20;
  std::string coco_annotations;
  std::string coco_images;
  // Longest side after letterboxing COCO images; a multiple of 32.
  int image_size = 256;
  // OKS constant for synthetic scenes; COCO data always uses the per-keypoint table.
  double synthetic_kappa = 0.0;  // 0 selects the mean COCO constant

  bool operator==(const DataConfig&) const = default;
};

struct TrainConfig {
  int steps = 2000;
  int batch_size = 2;
  int checkpoint_interval = 500;
  int log_interval = 10;
  int threads = 1;

  bool operator==(const TrainConfig&) const = default;
};

struct InferConfig {
  double score_threshold = 0.3;
  int top_k = 20;

  bool operator==(const InferConfig&) const = default;
};

struct RunConfig {
  ModelConfig model = ModelConfig::desk();
  DataConfig data;
  TrainConfig train;
  InferConfig infer;
  std::string output_dir;  // empty: runs/<timestamp>-<tag>
  std::string tag = "run";
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& config);
nlohmann::json to_json(const SyntheticConfig& config);
nlohmann::json to_json(const RunConfig& config);

// Strict readers: unknown keys and wrong types raise ConfigError naming the
// dotted path of the offending key. Missing keys keep their defaults (for a
// model config, the values in `base`; a run config starts from the desk model).
ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& path = "model",
                                   const ModelConfig& base = ModelConfig{});
RunConfig run_config_from_json(const nlohmann::json& j);

RunConfig load_run_config(const std::string& file);
void save_run_config(const RunConfig& config, const std::string& file);

// Applies a "dotted.path=value" override. The value is parsed as JSON when
// possible and as a plain string otherwise.
void apply_override(nlohmann::json& config, const std::string& assignment);

// First structural difference between two model configs, or nullopt.
std::optional<std::string> config_conflict(const ModelConfig& stored, const ModelConfig& current);

}  // namespace querypose
