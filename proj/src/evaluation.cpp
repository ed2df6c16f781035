#include "querypose/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "querypose/errors.hpp"

namespace querypose {

namespace {

constexpr int kRecallPoints = 101;
constexpr double kMediumLo = 32.0 * 32.0;
constexpr double kMediumHi = 96.0 * 96.0;

std::vector<double> oks_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

bool outside(double area, AreaRange range) {
  switch (range) {
    case AreaRange::kAll:
      return false;
    case AreaRange::kMedium:
      return area < kMediumLo || area > kMediumHi;
    case AreaRange::kLarge:
      return area < kMediumHi;
  }
  return false;
}

// Area of the keypoint extent, used to place detections in an area range.
double detection_area(const ScoredPose& p) {
  if (p.keypoints.coords.empty()) return 0.0;
  double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
  for (const auto& c : p.keypoints.coords) {
    x0 = std::min(x0, c.x);
    y0 = std::min(y0, c.y);
    x1 = std::max(x1, c.x);
    y1 = std::max(y1, c.y);
  }
  return (x1 - x0) * (y1 - y0);
}

struct ScoredMatch {
  double score;
  std::vector<bool> matched;  // per threshold
  std::vector<bool> ignored;  // per threshold
};

}  // namespace

PrecisionRecall precision_recall(const std::vector<std::vector<ScoredPose>>& predictions,
                                 const std::vector<SceneAnnotation>& ground_truth, const EvalOptions& options,
                                 AreaRange range) {
  if (predictions.size() != ground_truth.size()) {
    throw DataError("evaluate_ap: " + std::to_string(predictions.size()) + " prediction lists for " +
                    std::to_string(ground_truth.size()) + " images");
  }
  if (options.kappas.empty()) throw ConfigError("evaluate_ap: OKS constants required");
  PrecisionRecall pr;
  pr.thresholds = oks_thresholds();
  const std::size_t num_t = pr.thresholds.size();

  std::vector<ScoredMatch> detections;
  for (std::size_t img = 0; img < ground_truth.size(); ++img) {
    const auto& gts = ground_truth[img].instances;
    // Non-ignored ground truth first, as the greedy matcher relies on it.
    std::vector<std::size_t> gt_order(gts.size());
    std::iota(gt_order.begin(), gt_order.end(), 0);
    std::vector<bool> gt_ignore_raw(gts.size());
    for (std::size_t g = 0; g < gts.size(); ++g) {
      gt_ignore_raw[g] = gts[g].keypoints.num_labeled() == 0 || outside(gts[g].area, range);
    }
    std::stable_sort(gt_order.begin(), gt_order.end(),
                     [&](std::size_t a, std::size_t b) { return !gt_ignore_raw[a] && gt_ignore_raw[b]; });
    for (std::size_t g = 0; g < gts.size(); ++g) pr.num_ground_truth += gt_ignore_raw[g] ? 0 : 1;

    std::vector<const ScoredPose*> dts;
    for (const auto& p : predictions[img]) dts.push_back(&p);
    std::stable_sort(dts.begin(), dts.end(), [](const ScoredPose* a, const ScoredPose* b) { return a->score > b->score; });
    if (dts.size() > static_cast<std::size_t>(options.max_detections)) {
      dts.resize(static_cast<std::size_t>(options.max_detections));
    }

    std::vector<std::vector<double>> sim(dts.size(), std::vector<double>(gts.size(), 0.0));
    for (std::size_t d = 0; d < dts.size(); ++d) {
      for (std::size_t gi = 0; gi < gts.size(); ++gi) {
        const auto& g = gts[gt_order[gi]];
        sim[d][gi] = oks(dts[d]->keypoints, g.keypoints, g.area, options.kappas).value_or(0.0);
      }
    }

    std::vector<ScoredMatch> image_matches(dts.size());
    for (std::size_t d = 0; d < dts.size(); ++d) {
      image_matches[d] = {dts[d]->score, std::vector<bool>(num_t, false), std::vector<bool>(num_t, false)};
    }
    for (std::size_t t = 0; t < num_t; ++t) {
      std::vector<bool> gt_taken(gts.size(), false);
      for (std::size_t d = 0; d < dts.size(); ++d) {
        double best = std::min(pr.thresholds[t], 1.0 - 1e-10);
        int m = -1;
        for (std::size_t gi = 0; gi < gts.size(); ++gi) {
          if (gt_taken[gi]) continue;
          const bool ignored_g = gt_ignore_raw[gt_order[gi]];
          // Once matched to a real instance, never fall back to an ignored one.
          if (m > -1 && !gt_ignore_raw[gt_order[static_cast<std::size_t>(m)]] && ignored_g) break;
          if (sim[d][gi] < best) continue;
          best = sim[d][gi];
          m = static_cast<int>(gi);
        }
        if (m == -1) continue;
        gt_taken[static_cast<std::size_t>(m)] = true;
        image_matches[d].matched[t] = true;
        image_matches[d].ignored[t] = gt_ignore_raw[gt_order[static_cast<std::size_t>(m)]];
      }
      for (std::size_t d = 0; d < dts.size(); ++d) {
        if (!image_matches[d].matched[t] && outside(detection_area(*dts[d]), range)) image_matches[d].ignored[t] = true;
      }
    }
    for (auto& m : image_matches) detections.push_back(std::move(m));
  }

  pr.precision.assign(num_t, {});
  pr.recall.assign(num_t, 0.0);
  if (pr.num_ground_truth == 0) {
    pr.recall.clear();
    return pr;
  }
  std::stable_sort(detections.begin(), detections.end(),
                   [](const ScoredMatch& a, const ScoredMatch& b) { return a.score > b.score; });

  for (std::size_t t = 0; t < num_t; ++t) {
    std::vector<double> rc;
    std::vector<double> pc;
    double tp = 0.0;
    double fp = 0.0;
    for (const auto& d : detections) {
      if (d.ignored[t]) continue;
      (d.matched[t] ? tp : fp) += 1.0;
      rc.push_back(tp / pr.num_ground_truth);
      pc.push_back(tp / (tp + fp + std::numeric_limits<double>::epsilon()));
    }
    pr.recall[t] = rc.empty() ? 0.0 : rc.back();
    // Monotone envelope, then sample at the recall points (left insertion).
    for (std::size_t i = pc.size(); i-- > 1;) pc[i - 1] = std::max(pc[i - 1], pc[i]);
    std::vector<double> row(kRecallPoints, 0.0);
    for (int r = 0; r < kRecallPoints; ++r) {
      // Same recall grid as a 101-point linspace over [0, 1].
      const double level = r == kRecallPoints - 1 ? 1.0 : r * 0.01;
      const auto it = std::lower_bound(rc.begin(), rc.end(), level);
      if (it != rc.end()) row[static_cast<std::size_t>(r)] = pc[static_cast<std::size_t>(it - rc.begin())];
    }
    pr.precision[t] = std::move(row);
  }
  return pr;
}

EvalMetrics evaluate_ap(const std::vector<std::vector<ScoredPose>>& predictions,
                        const std::vector<SceneAnnotation>& ground_truth, const EvalOptions& options) {
  auto mean_ap = [](const PrecisionRecall& pr, std::optional<std::size_t> only) -> std::optional<double> {
    if (pr.num_ground_truth == 0) return std::nullopt;
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t t = 0; t < pr.precision.size(); ++t) {
      if (only && t != *only) continue;
      for (double p : pr.precision[t]) total += p;
      count += pr.precision[t].size();
    }
    return count == 0 ? std::nullopt : std::optional<double>(total / static_cast<double>(count));
  };

  EvalMetrics m;
  const auto all = precision_recall(predictions, ground_truth, options, AreaRange::kAll);
  m.ap = mean_ap(all, std::nullopt);
  m.ap50 = mean_ap(all, 0);
  m.ap75 = mean_ap(all, 5);
  m.ap_medium = mean_ap(precision_recall(predictions, ground_truth, options, AreaRange::kMedium), std::nullopt);
  m.ap_large = mean_ap(precision_recall(predictions, ground_truth, options, AreaRange::kLarge), std::nullopt);
  if (all.num_ground_truth > 0) {
    m.ar = std::accumulate(all.recall.begin(), all.recall.end(), 0.0) / static_cast<double>(all.recall.size());
  }
  return m;
}

nlohmann::json to_json(const EvalMetrics& m) {
  auto value = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"AP", value(m.ap)},          {"AP50", value(m.ap50)},      {"AP75", value(m.ap75)},
          {"AP_M", value(m.ap_medium)}, {"AP_L", value(m.ap_large)}, {"AR", value(m.ar)}};
}

}  // namespace querypose
