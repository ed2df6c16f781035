#include "querypose/part_division.hpp"

#include <string>

#include "querypose/errors.hpp"

namespace querypose {

const std::vector<std::string>& coco_keypoint_names() {
  static const std::vector<std::string> names = {
      "nose",           "left_eye",   "right_eye",   "left_ear",   "right_ear",  "left_shoulder",
      "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hip",
      "right_hip",      "left_knee",  "right_knee",  "left_ankle", "right_ankle"};
  return names;
}

std::vector<int> PartDivision::part_of() const {
  std::vector<int> owner(static_cast<std::size_t>(num_keypoints), -1);
  for (int m = 0; m < num_parts(); ++m) {
    for (int k : parts[static_cast<std::size_t>(m)]) owner[static_cast<std::size_t>(k)] = m;
  }
  return owner;
}

PartDivision part_division(char scheme) {
  const std::vector<int> head = {kNose, kLeftEye, kRightEye, kLeftEar, kRightEar};
  PartDivision d;
  d.num_keypoints = 17;
  d.scheme = std::string(1, scheme);
  switch (scheme) {
    case 'a':
      for (int k = 0; k < 17; ++k) d.parts.push_back({k});
      break;
    case 'b':
      d.parts.push_back(head);
      for (int k = kLeftShoulder; k <= kRightAnkle; ++k) d.parts.push_back({k});
      break;
    case 'c':
      d.parts = {head,
                 {kLeftShoulder, kRightShoulder},
                 {kLeftHip, kRightHip},
                 {kLeftElbow, kLeftWrist},
                 {kRightElbow, kRightWrist},
                 {kLeftKnee, kLeftAnkle},
                 {kRightKnee, kRightAnkle}};
      break;
    case 'd':
      d.parts = {head,
                 {kLeftShoulder, kLeftElbow, kLeftWrist},
                 {kRightShoulder, kRightElbow, kRightWrist},
                 {kLeftHip, kLeftKnee, kLeftAnkle},
                 {kRightHip, kRightKnee, kRightAnkle}};
      break;
    default:
      throw ConfigError(std::string("unknown part division scheme '") + scheme + "' (expected a, b, c or d)");
  }
  return d;
}

PartDivision custom_part_division(std::vector<std::vector<int>> parts, int num_keypoints) {
  if (num_keypoints <= 0) throw ConfigError("custom part division: num_keypoints must be positive");
  if (parts.empty()) throw ConfigError("custom part division: no parts given");
  std::vector<int> seen(static_cast<std::size_t>(num_keypoints), 0);
  for (const auto& part : parts) {
    if (part.empty()) throw ConfigError("custom part division: empty part");
    for (int k : part) {
      if (k < 0 || k >= num_keypoints) {
        throw ConfigError("custom part division: keypoint index " + std::to_string(k) + " out of range");
      }
      if (seen[static_cast<std::size_t>(k)]++ != 0) {
        throw ConfigError("custom part division: keypoint " + std::to_string(k) + " assigned twice");
      }
    }
  }
  for (int k = 0; k < num_keypoints; ++k) {
    if (seen[static_cast<std::size_t>(k)] == 0) {
      throw ConfigError("custom part division: keypoint " + std::to_string(k) + " not assigned");
    }
  }
  return PartDivision{"custom", std::move(parts), num_keypoints};
}

}  // namespace querypose
