#pragma once

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

#include "querypose/annotation.hpp"

namespace querypose {

struct CocoDataset {
  std::vector<SceneAnnotation> scenes;
  std::vector<std::string> image_paths;  // parallel to scenes
};

// Reads a COCO person-keypoint annotation file. Boxes are converted from
// [x, y, w, h] to corners, keypoints from 17 (x, y, v) triplets; crowd
// annotations are skipped. Malformed records raise DataError naming the
// record id. With `check_images`, every referenced image must exist under
// `image_root`.
CocoDataset load_coco_keypoints(const std::string& annotation_file, const std::string& image_root,
                                bool check_images = true);

// Same, from already parsed JSON.
CocoDataset parse_coco_keypoints(const nlohmann::json& document, const std::string& image_root, bool check_images);

// COCO results list: one entry per pose with image_id, category_id = 1,
// keypoints flattened as (x, y, keypoint score) triplets, and the pose score.
nlohmann::json coco_results(const std::vector<std::vector<ScoredPose>>& predictions,
                            const std::vector<std::int64_t>& image_ids);

// Ground truth replayed as perfect predictions with score 1 (evaluation oracle).
std::vector<std::vector<ScoredPose>> replay_ground_truth(const std::vector<SceneAnnotation>& scenes);

}  // namespace querypose
