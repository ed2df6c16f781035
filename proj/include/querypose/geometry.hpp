#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace querypose {

// Axis-aligned box in corner form, image-pixel coordinates.
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  [[nodiscard]] double width() const { return x2 - x1; }
  [[nodiscard]] double height() const { return y2 - y1; }
  [[nodiscard]] double area() const { return width() * height(); }
  [[nodiscard]] double center_x() const { return 0.5 * (x1 + x2); }
  [[nodiscard]] double center_y() const { return 0.5 * (y1 + y2); }
  [[nodiscard]] bool valid() const;

  // COCO stores boxes as [x, y, w, h].
  static Box from_xywh(double x, double y, double w, double h) { return {x, y, x + w, y + h}; }

  bool operator==(const Box&) const = default;
};

// Throws GeometryError unless the box has positive, finite extent.
void check_box(const Box& box, const char* what = "box");

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point2&) const = default;
};

// COCO visibility flags: v=0 unlabeled, v=1 labeled but occluded, v=2 visible.
enum class Visibility : std::uint8_t { kUnlabeled = 0, kOccluded = 1, kVisible = 2 };

inline bool is_labeled(Visibility v) { return v != Visibility::kUnlabeled; }

struct KeypointSet {
  std::vector<Point2> coords;
  std::vector<Visibility> visibility;

  [[nodiscard]] std::size_t size() const { return coords.size(); }
  [[nodiscard]] std::size_t num_labeled() const;
};

// Box-relative coordinates in (-0.5, 0.5); mask is true only for labeled
// keypoints strictly inside the box.
struct NormalizedKeypoints {
  std::vector<Point2> coords;
  std::vector<bool> mask;
};

inline constexpr int kCocoNumKeypoints = 17;

// Per-keypoint OKS constants (twice the COCO per-keypoint sigmas).
const std::array<double, kCocoNumKeypoints>& coco_kappas();

// Mean of coco_kappas(); the default single constant for synthetic skeletons.
double mean_coco_kappa();

double iou(const Box& a, const Box& b);
double giou(const Box& a, const Box& b);

NormalizedKeypoints normalize_keypoints(const KeypointSet& kps, const Box& box);
KeypointSet denormalize_keypoints(const NormalizedKeypoints& norm, const Box& box);

// Object keypoint similarity; std::nullopt when gt has no labeled keypoint.
// `kappas` holds either one constant per keypoint or a single shared value.
std::optional<double> oks(const KeypointSet& pred, const KeypointSet& gt, double gt_area,
                          std::span<const double> kappas);

// ---------------------------------------------------------------------------
// Tensor forms. Boxes are (..., 4) corner tensors; all are differentiable.

// Elementwise GIoU between matching rows of `a` and `b`.
torch::Tensor giou_elementwise(const torch::Tensor& a, const torch::Tensor& b);

// (N, 4) x (G, 4) -> (N, G) pairwise GIoU.
torch::Tensor giou_pairwise(const torch::Tensor& a, const torch::Tensor& b);

// Keypoints (..., K, 2) against boxes (..., 4) -> box-relative coordinates.
torch::Tensor normalize_keypoints(const torch::Tensor& kps, const torch::Tensor& boxes);
torch::Tensor denormalize_keypoints(const torch::Tensor& norm, const torch::Tensor& boxes);

struct RoiAlignOptions {
  int out_h = 7;
  int out_w = 7;
  // Bilinear samples per bin along each axis.
  int sampling_ratio = 2;
  // Feature pixels per image pixel (1 / stride).
  double spatial_scale = 1.0;
};

// Pools `boxes` (B, R, 4) from `features` (B, C, H, W); returns (B, R, C, out_h, out_w).
// Pixel centers sit at half-integer continuous coordinates, so a box spanning the
// whole map with one sample per bin reproduces the map exactly. Samples outside the
// map clamp to the border. Gradients flow to both features and box coordinates.
torch::Tensor roi_align(const torch::Tensor& features, const torch::Tensor& boxes,
                        const RoiAlignOptions& options);

// Single-map convenience form: features (C, H, W), one box -> (C, out_h, out_w).
torch::Tensor roi_align(const torch::Tensor& features, const Box& box, const RoiAlignOptions& options);

}  // namespace querypose
