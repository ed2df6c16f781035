#pragma once

#include <string>
#include <vector>

namespace querypose {

// COCO keypoint order.
enum CocoKeypoint : int {
  kNose = 0,
  kLeftEye,
  kRightEye,
  kLeftEar,
  kRightEar,
  kLeftShoulder,
  kRightShoulder,
  kLeftElbow,
  kRightElbow,
  kLeftWrist,
  kRightWrist,
  kLeftHip,
  kRightHip,
  kLeftKnee,
  kRightKnee,
  kLeftAnkle,
  kRightAnkle,
};

const std::vector<std::string>& coco_keypoint_names();

// Grouping of K keypoints into M parts; each part query owns one group.
struct PartDivision {
  std::string scheme;                   // "a".."d" or "custom"
  std::vector<std::vector<int>> parts;  // parts[m] = keypoint indices
  int num_keypoints = 0;

  [[nodiscard]] int num_parts() const { return static_cast<int>(parts.size()); }
  // part_of()[k] = index of the part that owns keypoint k.
  [[nodiscard]] std::vector<int> part_of() const;
};

// Built-in schemes over the COCO skeleton:
//   a: every keypoint its own part (17)
//   b: the five head keypoints together, the rest alone (13)
//   c: head, shoulders, hips and the four lower limb segments (7)
//   d: head and the four limbs (5)
PartDivision part_division(char scheme);

// Validates that `parts` partitions 0..num_keypoints-1.
PartDivision custom_part_division(std::vector<std::vector<int>> parts, int num_keypoints);

}  // namespace querypose
