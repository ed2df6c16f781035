#pragma once

#include <torch/torch.h>

#include <utility>
#include <vector>

#include "querypose/annotation.hpp"
#include "querypose/config.hpp"
#include "querypose/rle_flow.hpp"

namespace querypose {

// Binary focal loss on a single logit.
double focal_loss(double logit, int target, double alpha, double gamma);

// Elementwise focal loss; `targets` holds 0/1 in the logits' dtype.
torch::Tensor focal_loss(const torch::Tensor& logits, const torch::Tensor& targets, double alpha, double gamma);

// Dense N x G cost matrix, row-major.
struct CostMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> values;

  CostMatrix() = default;
  CostMatrix(int r, int c) : rows(r), cols(c), values(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), 0.0) {}

  [[nodiscard]] double at(int r, int c) const { return values[static_cast<std::size_t>(r * cols + c)]; }
  double& at(int r, int c) { return values[static_cast<std::size_t>(r * cols + c)]; }
  static CostMatrix from_tensor(const torch::Tensor& t);
};

// (prediction, ground truth) pairs; injective in both coordinates.
struct Assignment {
  std::vector<std::pair<int, int>> pairs;

  [[nodiscard]] double total_cost(const CostMatrix& cost) const;
};

// Per-image ground truth as tensors.
struct ImageTargets {
  torch::Tensor boxes;       // (G, 4) corners, pixels
  torch::Tensor keypoints;   // (G, K, 2) pixels
  torch::Tensor labeled;     // (G, K) bool
  [[nodiscard]] int64_t size() const { return boxes.defined() ? boxes.size(0) : 0; }
};

ImageTargets make_targets(const SceneAnnotation& scene, int num_keypoints, torch::ScalarType dtype = torch::kFloat32);

// cost(i, j) = w_cls * focal_cost(logit_i) + w_l1 * L1(box_i, gt_j) - w_giou * GIoU(box_i, gt_j)
// The focal cost is the positive-minus-negative focal term; L1 runs on corners
// divided by the image size. When `weights.keypoint_cost` is set and keypoints
// are supplied, the image-normalized mean L1 keypoint distance is added.
// Throws DataError on an invalid ground-truth box.
CostMatrix cost_matrix(const torch::Tensor& logits, const torch::Tensor& boxes, const ImageTargets& targets,
                       double image_w, double image_h, const LossWeights& weights,
                       const torch::Tensor& keypoints = {});

// Minimum-cost one-to-one assignment of min(N, G) pairs (Kuhn-Munkres with
// potentials, O(n^2 m)). Ties resolve toward the lowest prediction index.
Assignment hungarian(const CostMatrix& cost);

struct StagePredictions {
  torch::Tensor logits;      // (B, N)
  torch::Tensor boxes;       // (B, N, 4)
  torch::Tensor pose_mean;   // (B, N, K, 2)
  torch::Tensor pose_scale;  // (B, N, K, 2)
};

struct StageLoss {
  torch::Tensor cls;       // focal, normalized by the ground-truth count
  torch::Tensor l1;
  torch::Tensor giou;      // mean of (1 - GIoU)
  torch::Tensor keypoint;  // RLE term
  torch::Tensor instance;  // w_cls*cls + w_l1*l1 + w_giou*giou
  torch::Tensor total;     // instance + keypoint
  bool no_keypoint_supervision = false;
};

// Matched predictions receive box, positive-class and keypoint losses;
// everything else gets the negative focal term only. Keypoint targets are
// normalized by the matched (detached) predicted box, and keypoints outside it
// are masked.
StageLoss stage_loss(const StagePredictions& predictions, const std::vector<ImageTargets>& targets,
                     const std::vector<Assignment>& assignments, RealNvpFlow& flow, const LossWeights& weights,
                     FlowMode mode, double image_w, double image_h);

// Matches each image of the batch independently.
std::vector<Assignment> match_stage(const StagePredictions& predictions, const std::vector<ImageTargets>& targets,
                                    double image_w, double image_h, const LossWeights& weights);

}  // namespace querypose
