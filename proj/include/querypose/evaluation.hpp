#pragma once

#include <nlohmann/json.hpp>

#include <optional>
#include <vector>

#include "querypose/annotation.hpp"

namespace querypose {

// Keypoint AP/AR; an empty optional means the metric is undefined (no
// ground truth in the relevant area range).
struct EvalMetrics {
  std::optional<double> ap;
  std::optional<double> ap50;
  std::optional<double> ap75;
  std::optional<double> ap_medium;
  std::optional<double> ap_large;
  std::optional<double> ar;
};

struct EvalOptions {
  // One OKS constant per keypoint, or a single shared constant.
  std::vector<double> kappas;
  int max_detections = 20;
};

// Per-threshold detail for one area range, exposed for tests.
struct PrecisionRecall {
  std::vector<double> thresholds;              // 0.50, 0.55, ..., 0.95
  std::vector<std::vector<double>> precision;  // [threshold][101 recall points]; empty row if undefined
  std::vector<double> recall;                  // max recall per threshold
  int num_ground_truth = 0;                    // non-ignored instances
};

// COCO keypoint evaluation: per image and threshold, detections are matched
// greedily in descending score order to the unmatched ground truth with the
// highest OKS at or above the threshold. Across images detections are ranked
// by score with ties kept in image order, then in per-image order. Ground
// truth without labeled keypoints, or outside the area range, is ignored, and
// so are unmatched detections whose keypoint-extent area falls outside it.
// `predictions[i]` pairs with `ground_truth[i]`.
EvalMetrics evaluate_ap(const std::vector<std::vector<ScoredPose>>& predictions,
                        const std::vector<SceneAnnotation>& ground_truth, const EvalOptions& options);

// Area ranges: all = [0, inf), medium = [32^2, 96^2], large = [96^2, inf).
enum class AreaRange { kAll, kMedium, kLarge };

PrecisionRecall precision_recall(const std::vector<std::vector<ScoredPose>>& predictions,
                                 const std::vector<SceneAnnotation>& ground_truth, const EvalOptions& options,
                                 AreaRange range);

nlohmann::json to_json(const EvalMetrics& metrics);

}  // namespace querypose
