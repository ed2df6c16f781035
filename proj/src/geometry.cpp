#include "querypose/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "querypose/errors.hpp"

namespace querypose {

bool Box::valid() const {
  return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) && x2 > x1 &&
         y2 > y1;
}

void check_box(const Box& box, const char* what) {
  if (!box.valid()) {
    throw GeometryError(std::string("degenerate ") + what + " (" + std::to_string(box.x1) + ", " +
                        std::to_string(box.y1) + ", " + std::to_string(box.x2) + ", " +
                        std::to_string(box.y2) + ")");
  }
}

std::size_t KeypointSet::num_labeled() const {
  return static_cast<std::size_t>(std::count_if(visibility.begin(), visibility.end(), is_labeled));
}

const std::array<double, kCocoNumKeypoints>& coco_kappas() {
  static const std::array<double, kCocoNumKeypoints> kappas = [] {
    constexpr std::array<double, kCocoNumKeypoints> sigmas = {
        .26, .25, .25, .35, .35, .79, .79, .72, .72, .62, .62, 1.07, 1.07, .87, .87, .89, .89};
    std::array<double, kCocoNumKeypoints> out{};
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = 2.0 * sigmas[k] / 10.0;
    return out;
  }();
  return kappas;
}

double mean_coco_kappa() {
  const auto& k = coco_kappas();
  return std::accumulate(k.begin(), k.end(), 0.0) / static_cast<double>(k.size());
}

namespace {

double intersection_area(const Box& a, const Box& b) {
  const double w = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double h = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  return w * h;
}

}  // namespace

double iou(const Box& a, const Box& b) {
  check_box(a);
  check_box(b);
  const double inter = intersection_area(a, b);
  return inter / (a.area() + b.area() - inter);
}

double giou(const Box& a, const Box& b) {
  check_box(a);
  check_box(b);
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  const double hull = (std::max(a.x2, b.x2) - std::min(a.x1, b.x1)) * (std::max(a.y2, b.y2) - std::min(a.y1, b.y1));
  return inter / uni - (hull - uni) / hull;
}

NormalizedKeypoints normalize_keypoints(const KeypointSet& kps, const Box& box) {
  check_box(box);
  NormalizedKeypoints out;
  out.coords.reserve(kps.size());
  out.mask.reserve(kps.size());
  for (std::size_t k = 0; k < kps.size(); ++k) {
    const Point2 p{(kps.coords[k].x - box.x1) / box.width() - 0.5, (kps.coords[k].y - box.y1) / box.height() - 0.5};
    const bool inside = p.x > -0.5 && p.x < 0.5 && p.y > -0.5 && p.y < 0.5;
    const bool labeled = k < kps.visibility.size() && is_labeled(kps.visibility[k]);
    out.coords.push_back(p);
    out.mask.push_back(inside && labeled);
  }
  return out;
}

KeypointSet denormalize_keypoints(const NormalizedKeypoints& norm, const Box& box) {
  check_box(box);
  KeypointSet out;
  out.coords.reserve(norm.coords.size());
  for (std::size_t k = 0; k < norm.coords.size(); ++k) {
    const auto& p = norm.coords[k];
    out.coords.push_back({(p.x + 0.5) * box.width() + box.x1, (p.y + 0.5) * box.height() + box.y1});
    const bool kept = k < norm.mask.size() ? norm.mask[k] : true;
    out.visibility.push_back(kept ? Visibility::kVisible : Visibility::kUnlabeled);
  }
  return out;
}

std::optional<double> oks(const KeypointSet& pred, const KeypointSet& gt, double gt_area,
                          std::span<const double> kappas) {
  if (pred.size() != gt.size()) {
    throw ShapeError("oks: prediction has " + std::to_string(pred.size()) + " keypoints, ground truth " +
                     std::to_string(gt.size()));
  }
  if (kappas.size() != 1 && kappas.size() != gt.size()) {
    throw ShapeError("oks: expected 1 or " + std::to_string(gt.size()) + " kappa constants");
  }
  double total = 0.0;
  int labeled = 0;
  for (std::size_t k = 0; k < gt.size(); ++k) {
    if (!is_labeled(gt.visibility[k])) continue;
    const double kappa = kappas.size() == 1 ? kappas[0] : kappas[k];
    const double dx = pred.coords[k].x - gt.coords[k].x;
    const double dy = pred.coords[k].y - gt.coords[k].y;
    total += std::exp(-(dx * dx + dy * dy) / (2.0 * gt_area * kappa * kappa));
    ++labeled;
  }
  if (labeled == 0) return std::nullopt;
  return total / labeled;
}

// ---------------------------------------------------------------------------

namespace {

constexpr double kBoxEps = 1e-7;

struct Corners {
  torch::Tensor x1, y1, x2, y2;
};

Corners unpack(const torch::Tensor& boxes) {
  if (boxes.size(-1) != 4) throw ShapeError("boxes must have a trailing dimension of 4");
  auto parts = boxes.unbind(-1);
  return {parts[0], parts[1], parts[2], parts[3]};
}

torch::Tensor giou_from_corners(const Corners& a, const Corners& b) {
  const auto area_a = (a.x2 - a.x1) * (a.y2 - a.y1);
  const auto area_b = (b.x2 - b.x1) * (b.y2 - b.y1);
  const auto iw = (torch::min(a.x2, b.x2) - torch::max(a.x1, b.x1)).clamp_min(0);
  const auto ih = (torch::min(a.y2, b.y2) - torch::max(a.y1, b.y1)).clamp_min(0);
  const auto inter = iw * ih;
  const auto uni = area_a + area_b - inter;
  const auto hull = (torch::max(a.x2, b.x2) - torch::min(a.x1, b.x1)) * (torch::max(a.y2, b.y2) - torch::min(a.y1, b.y1));
  return inter / (uni + kBoxEps) - (hull - uni) / (hull + kBoxEps);
}

}  // namespace

torch::Tensor giou_elementwise(const torch::Tensor& a, const torch::Tensor& b) {
  return giou_from_corners(unpack(a), unpack(b));
}

torch::Tensor giou_pairwise(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2) throw ShapeError("giou_pairwise expects (N,4) and (G,4)");
  return giou_elementwise(a.unsqueeze(1), b.unsqueeze(0));
}

torch::Tensor normalize_keypoints(const torch::Tensor& kps, const torch::Tensor& boxes) {
  const auto lo = boxes.narrow(-1, 0, 2).unsqueeze(-2);
  const auto size = (boxes.narrow(-1, 2, 2) - boxes.narrow(-1, 0, 2)).unsqueeze(-2);
  return (kps - lo) / size - 0.5;
}

torch::Tensor denormalize_keypoints(const torch::Tensor& norm, const torch::Tensor& boxes) {
  const auto lo = boxes.narrow(-1, 0, 2).unsqueeze(-2);
  const auto size = (boxes.narrow(-1, 2, 2) - boxes.narrow(-1, 0, 2)).unsqueeze(-2);
  return (norm + 0.5) * size + lo;
}

namespace {

// Sample offsets within [0, bins) at (j + (a + 0.5) / sr), shape (bins * sr).
torch::Tensor bin_offsets(int bins, int sr, const torch::TensorOptions& opts) {
  auto j = torch::arange(bins, opts).unsqueeze(1);
  auto a = (torch::arange(sr, opts) + 0.5) / sr;
  return (j + a.unsqueeze(0)).reshape({bins * sr});
}

// Per-axis interpolation weights (B, R, bins, size) for bins starting at `lo`
// with width `bin`. A sample at continuous position p reads pixel i with weight
// max(0, 1 - |clamp(p - 0.5, 0, size - 1) - i|), i.e. bilinear with the sample
// clamped to the border; the bin's samples are averaged.
torch::Tensor axis_weights(const torch::Tensor& lo, const torch::Tensor& bin, int bins, int sr, int64_t size) {
  const auto opts = lo.options();
  const auto pos = lo.unsqueeze(-1) + bin_offsets(bins, sr, opts) * bin.unsqueeze(-1);
  const auto idx = (pos - 0.5).clamp(0.0, static_cast<double>(size - 1));
  const auto w = (1.0 - (idx.unsqueeze(-1) - torch::arange(size, opts)).abs()).clamp_min(0.0);
  return w.view({lo.size(0), lo.size(1), bins, sr, size}).mean(3);
}

}  // namespace

torch::Tensor roi_align(const torch::Tensor& features, const torch::Tensor& boxes, const RoiAlignOptions& options) {
  if (options.out_h <= 0 || options.out_w <= 0 || options.sampling_ratio <= 0) {
    throw ConfigError("roi_align: output size and sampling ratio must be positive");
  }
  if (features.dim() != 4) throw ShapeError("roi_align: features must be (B, C, H, W)");
  if (boxes.dim() != 3 || boxes.size(2) != 4 || boxes.size(0) != features.size(0)) {
    throw ShapeError("roi_align: boxes must be (B, R, 4) with B matching the features");
  }
  const int64_t batch = features.size(0);
  const int64_t channels = features.size(1);
  const int64_t height = features.size(2);
  const int64_t width = features.size(3);
  const int64_t rois = boxes.size(1);
  const int sr = options.sampling_ratio;

  const auto scaled = boxes.to(features.scalar_type()) * options.spatial_scale;
  auto c = unpack(scaled);
  // Bilinear sampling is separable: each output cell is wy^T F wx with per-axis
  // weights averaged over the bin's samples, so pooling becomes two matmuls.
  const auto wx = axis_weights(c.x1, (c.x2 - c.x1) / options.out_w, options.out_w, sr, width);   // (B, R, ow, W)
  const auto wy = axis_weights(c.y1, (c.y2 - c.y1) / options.out_h, options.out_h, sr, height);  // (B, R, oh, H)

  // Contract H first so the only relayout is of the feature map, not of per-RoI
  // intermediates. (B, R*oh, H) x (B, H, C*W) -> (B, R, oh, C, W)
  const auto f = features.permute({0, 2, 1, 3}).reshape({batch, height, channels * width});
  auto t = torch::bmm(wy.reshape({batch, rois * options.out_h, height}), f);
  t = t.view({batch * rois, options.out_h * channels, width});
  // (B*R, oh*C, W) x (B*R, W, ow) -> (B, R, C, oh, ow)
  auto out = torch::bmm(t, wx.reshape({batch * rois, options.out_w, width}).transpose(1, 2));
  return out.view({batch, rois, options.out_h, channels, options.out_w}).permute({0, 1, 3, 2, 4});
}

torch::Tensor roi_align(const torch::Tensor& features, const Box& box, const RoiAlignOptions& options) {
  check_box(box);
  if (features.dim() != 3) throw ShapeError("roi_align: single-map form expects (C, H, W)");
  auto boxes = torch::tensor({box.x1, box.y1, box.x2, box.y2}, features.options()).view({1, 1, 4});
  return roi_align(features.unsqueeze(0), boxes, options).squeeze(0).squeeze(0);
}

}  // namespace querypose
