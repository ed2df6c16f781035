#pragma once

#include <cstdint>
#include <vector>

#include "querypose/geometry.hpp"

namespace querypose {

struct PersonInstance {
  Box box;
  KeypointSet keypoints;
  // Area used for OKS normalization and the medium/large split.
  double area = 0.0;
  std::int64_t id = 0;
};

struct SceneAnnotation {
  std::int64_t image_id = 0;
  int width = 0;
  int height = 0;
  std::vector<PersonInstance> instances;
};

// One detected person as emitted by inference.
struct ScoredPose {
  KeypointSet keypoints;              // image coordinates
  std::vector<double> keypoint_scores;  // 1 - mean per-axis scale, per keypoint
  double score = 0.0;                 // pose score
  double instance_score = 0.0;        // sigmoid of the class logit
  Box box;
  int query_index = -1;
};

}  // namespace querypose
