#include "querypose/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "querypose/errors.hpp"
#include "querypose/geometry.hpp"

namespace querypose {

namespace {

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

double focal_loss(double logit, int target, double alpha, double gamma) {
  const double p = sigmoid(logit);
  if (target != 0) return alpha * std::pow(1.0 - p, gamma) * softplus(-logit);
  return (1.0 - alpha) * std::pow(p, gamma) * softplus(logit);
}

torch::Tensor focal_loss(const torch::Tensor& logits, const torch::Tensor& targets, double alpha, double gamma) {
  const auto p = torch::sigmoid(logits);
  const auto pos = alpha * torch::pow(1.0 - p, gamma) * torch::softplus(-logits);
  const auto neg = (1.0 - alpha) * torch::pow(p, gamma) * torch::softplus(logits);
  return targets * pos + (1.0 - targets) * neg;
}

CostMatrix CostMatrix::from_tensor(const torch::Tensor& t) {
  if (t.dim() != 2) throw ShapeError("cost matrix tensor must be 2-D");
  auto c = t.detach().to(torch::kFloat64).contiguous();
  CostMatrix m(static_cast<int>(c.size(0)), static_cast<int>(c.size(1)));
  std::copy(c.data_ptr<double>(), c.data_ptr<double>() + c.numel(), m.values.begin());
  return m;
}

double Assignment::total_cost(const CostMatrix& cost) const {
  double total = 0.0;
  for (const auto& [r, c] : pairs) total += cost.at(r, c);
  return total;
}

ImageTargets make_targets(const SceneAnnotation& scene, int num_keypoints, torch::ScalarType dtype) {
  const auto g = static_cast<int64_t>(scene.instances.size());
  ImageTargets t;
  t.boxes = torch::zeros({g, 4}, torch::kFloat64);
  t.keypoints = torch::zeros({g, num_keypoints, 2}, torch::kFloat64);
  t.labeled = torch::zeros({g, num_keypoints}, torch::kBool);
  auto boxes = t.boxes.accessor<double, 2>();
  auto kps = t.keypoints.accessor<double, 3>();
  auto labeled = t.labeled.accessor<bool, 2>();
  for (int64_t i = 0; i < g; ++i) {
    const auto& inst = scene.instances[static_cast<std::size_t>(i)];
    if (static_cast<int>(inst.keypoints.size()) != num_keypoints) {
      throw DataError("instance " + std::to_string(inst.id) + " has " + std::to_string(inst.keypoints.size()) +
                      " keypoints, expected " + std::to_string(num_keypoints));
    }
    boxes[i][0] = inst.box.x1;
    boxes[i][1] = inst.box.y1;
    boxes[i][2] = inst.box.x2;
    boxes[i][3] = inst.box.y2;
    for (int k = 0; k < num_keypoints; ++k) {
      kps[i][k][0] = inst.keypoints.coords[static_cast<std::size_t>(k)].x;
      kps[i][k][1] = inst.keypoints.coords[static_cast<std::size_t>(k)].y;
      labeled[i][k] = is_labeled(inst.keypoints.visibility[static_cast<std::size_t>(k)]);
    }
  }
  t.boxes = t.boxes.to(dtype);
  t.keypoints = t.keypoints.to(dtype);
  return t;
}

CostMatrix cost_matrix(const torch::Tensor& logits, const torch::Tensor& boxes, const ImageTargets& targets,
                       double image_w, double image_h, const LossWeights& weights, const torch::Tensor& keypoints) {
  torch::NoGradGuard guard;
  const auto n = logits.size(0);
  const auto g = targets.size();
  if (g == 0) return CostMatrix(static_cast<int>(n), 0);
  if (boxes.size(0) != n) throw ShapeError("cost_matrix: logits and boxes disagree on N");
  auto gt = targets.boxes.to(torch::kFloat64);
  {
    auto c = gt.unbind(-1);
    if (!torch::isfinite(gt).all().item<bool>() || !((c[2] > c[0]) & (c[3] > c[1])).all().item<bool>()) {
      throw DataError("cost_matrix: invalid ground-truth box");
    }
  }
  auto pred = boxes.detach().to(torch::kFloat64);
  auto x = logits.detach().to(torch::kFloat64);

  auto p = torch::sigmoid(x);
  auto pos = weights.focal_alpha * torch::pow(1.0 - p, weights.focal_gamma) * torch::softplus(-x);
  auto neg = (1.0 - weights.focal_alpha) * torch::pow(p, weights.focal_gamma) * torch::softplus(x);
  auto cls_cost = (pos - neg).unsqueeze(1).expand({n, g});

  auto scale = torch::tensor({image_w, image_h, image_w, image_h}, torch::kFloat64);
  auto l1_cost = torch::cdist(pred / scale, gt / scale, 1.0);
  auto giou_cost = -giou_pairwise(pred, gt);

  auto cost = weights.cls * cls_cost + weights.l1 * l1_cost + weights.giou * giou_cost;
  if (weights.keypoint_cost && keypoints.defined()) {
    auto kp_scale = torch::tensor({image_w, image_h}, torch::kFloat64);
    auto pk = (keypoints.detach().to(torch::kFloat64) / kp_scale).unsqueeze(1);       // (N, 1, K, 2)
    auto gk = (targets.keypoints.to(torch::kFloat64) / kp_scale).unsqueeze(0);        // (1, G, K, 2)
    auto lab = targets.labeled.to(torch::kFloat64).unsqueeze(0);                      // (1, G, K)
    auto dist = ((pk - gk).abs().sum(-1) * lab).sum(-1) / lab.sum(-1).clamp_min(1.0);  // (N, G)
    cost = cost + weights.keypoint_cost_weight * dist;
  }
  return CostMatrix::from_tensor(cost);
}

Assignment hungarian(const CostMatrix& cost) {
  Assignment out;
  if (cost.rows == 0 || cost.cols == 0) return out;
  for (double v : cost.values) {
    if (!std::isfinite(v)) throw NumericError("hungarian: non-finite cost");
  }
  // Rows of the working problem must not outnumber columns; predictions stay
  // on the column side whenever they are the larger set so ties favour the
  // lowest prediction index.
  const bool transpose = cost.rows > cost.cols;
  const int n = transpose ? cost.cols : cost.rows;
  const int m = transpose ? cost.rows : cost.cols;
  auto a = [&](int i, int j) { return transpose ? cost.at(j - 1, i - 1) : cost.at(i - 1, j - 1); };

  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<double> v(static_cast<std::size_t>(m) + 1, 0.0);
  std::vector<int> p(static_cast<std::size_t>(m) + 1, 0);
  std::vector<int> way(static_cast<std::size_t>(m) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(m) + 1, kInf);
    std::vector<char> used(static_cast<std::size_t>(m) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      double delta = kInf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = a(i0, j) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  for (int j = 1; j <= m; ++j) {
    const int i = p[static_cast<std::size_t>(j)];
    if (i == 0) continue;
    // Column j holds working row i; map back to (prediction, ground truth).
    if (transpose) {
      out.pairs.emplace_back(j - 1, i - 1);
    } else {
      out.pairs.emplace_back(i - 1, j - 1);
    }
  }
  std::sort(out.pairs.begin(), out.pairs.end());
  return out;
}

std::vector<Assignment> match_stage(const StagePredictions& predictions, const std::vector<ImageTargets>& targets,
                                    double image_w, double image_h, const LossWeights& weights) {
  std::vector<Assignment> out;
  out.reserve(targets.size());
  for (std::size_t b = 0; b < targets.size(); ++b) {
    const auto idx = static_cast<int64_t>(b);
    torch::Tensor keypoints;
    if (weights.keypoint_cost && predictions.pose_mean.defined()) {
      keypoints = denormalize_keypoints(predictions.pose_mean[idx], predictions.boxes[idx]);
    }
    out.push_back(hungarian(cost_matrix(predictions.logits[idx], predictions.boxes[idx], targets[b], image_w, image_h,
                                        weights, keypoints)));
  }
  return out;
}

StageLoss stage_loss(const StagePredictions& predictions, const std::vector<ImageTargets>& targets,
                     const std::vector<Assignment>& assignments, RealNvpFlow& flow, const LossWeights& weights,
                     FlowMode mode, double image_w, double image_h) {
  const auto batch = predictions.logits.size(0);
  const auto n = predictions.logits.size(1);
  if (static_cast<int64_t>(targets.size()) != batch || static_cast<int64_t>(assignments.size()) != batch) {
    throw ShapeError("stage_loss: one target set and one assignment per image are required");
  }
  const auto dtype = predictions.logits.scalar_type();
  int64_t total_gt = 0;
  std::vector<int64_t> pred_index;
  std::vector<torch::Tensor> gt_boxes;
  std::vector<torch::Tensor> gt_kps;
  std::vector<torch::Tensor> gt_labeled;
  auto cls_targets = torch::zeros({batch, n}, predictions.logits.options());
  for (int64_t b = 0; b < batch; ++b) {
    const auto& t = targets[static_cast<std::size_t>(b)];
    total_gt += t.size();
    for (const auto& [i, j] : assignments[static_cast<std::size_t>(b)].pairs) {
      pred_index.push_back(b * n + i);
      cls_targets[b][i] = 1.0;
      gt_boxes.push_back(t.boxes[j].to(dtype));
      gt_kps.push_back(t.keypoints[j].to(dtype));
      gt_labeled.push_back(t.labeled[j]);
    }
  }
  const double norm = static_cast<double>(std::max<int64_t>(total_gt, 1));

  StageLoss loss;
  loss.cls = focal_loss(predictions.logits, cls_targets, weights.focal_alpha, weights.focal_gamma).sum() / norm;
  if (pred_index.empty()) {
    auto zero = predictions.boxes.sum() * 0.0;
    loss.l1 = zero;
    loss.giou = zero;
    loss.keypoint = predictions.pose_mean.defined() ? (predictions.pose_mean.sum() + predictions.pose_scale.sum()) * 0.0 : zero;
    loss.no_keypoint_supervision = true;
  } else {
    auto index = torch::tensor(pred_index, torch::kLong);
    auto pb = predictions.boxes.reshape({batch * n, 4}).index_select(0, index);
    auto gb = torch::stack(gt_boxes);
    auto scale = torch::tensor({image_w, image_h, image_w, image_h}, pb.options());
    loss.l1 = (pb / scale - gb / scale).abs().sum() / norm;
    loss.giou = (1.0 - giou_elementwise(pb, gb)).sum() / norm;

    const auto k = predictions.pose_mean.size(2);
    auto mean = predictions.pose_mean.reshape({batch * n, k, 2}).index_select(0, index);
    auto scale_k = predictions.pose_scale.reshape({batch * n, k, 2}).index_select(0, index);
    auto target = normalize_keypoints(torch::stack(gt_kps), pb.detach());
    auto inside = (target.abs() < 0.5).all(-1);
    auto mask = torch::stack(gt_labeled) & inside;
    auto rle = rle_loss({mean, scale_k, target, mask}, flow, mode);
    loss.keypoint = rle.loss;
    loss.no_keypoint_supervision = rle.no_supervision;
  }
  loss.instance = weights.cls * loss.cls + weights.l1 * loss.l1 + weights.giou * loss.giou;
  loss.total = loss.instance + loss.keypoint;
  return loss;
}

}  // namespace querypose
