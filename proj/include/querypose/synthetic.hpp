#pragma once

#include <opencv2/core.hpp>

#include <cstdint>

#include "querypose/annotation.hpp"

namespace querypose {

struct SyntheticConfig {
  int image_width = 256;
  int image_height = 256;
  int min_persons = 1;
  int max_persons = 4;
  // Figure height as a fraction of the image height.
  double min_scale = 0.35;
  double max_scale = 0.7;
  // Chance that a person gets an occluding patch over one limb end.
  double occlusion_prob = 0.1;
  // Expected clutter strokes per 64x64 pixels of background.
  double clutter_density = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const SyntheticConfig&) const = default;
};

struct SyntheticScene {
  cv::Mat image;  // BGR, 8-bit
  SceneAnnotation annotation;
};

// Renders 1..max_persons stick figures with the COCO 17-keypoint topology on a
// textured, cluttered background. Output depends only on (config, index).
SyntheticScene generate_scene(const SyntheticConfig& config, std::int64_t index);

// SplitMix64 stream keyed by (seed, index, stream); the sole randomness source
// of the generator, fixed so scenes reproduce across platforms.
class SplitMix64 {
 public:
  SplitMix64(std::uint64_t seed, std::uint64_t index, std::uint64_t stream = 0);

  std::uint64_t next();
  // Uniform in [0, 1) from the top 53 bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [lo, hi].
  int integer(int lo, int hi);
  // Standard normal via Box-Muller.
  double normal();

 private:
  std::uint64_t state_;
};

}  // namespace querypose
