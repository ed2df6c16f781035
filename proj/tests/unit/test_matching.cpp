#include "support/doctest.hpp"

#include <cmath>
#include <random>
#include <set>

#include "querypose/errors.hpp"
#include "querypose/matching.hpp"
#include "support/oracles.hpp"

using namespace querypose;

namespace {

CostMatrix random_cost(std::mt19937& rng, int rows, int cols) {
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  CostMatrix c(rows, cols);
  for (auto& v : c.values) v = u(rng);
  return c;
}

ImageTargets two_people() {
  SceneAnnotation scene;
  scene.width = scene.height = 64;
  for (int i = 0; i < 2; ++i) {
    PersonInstance p;
    p.box = {10.0 + 20 * i, 8.0, 30.0 + 20 * i, 50.0};
    for (int k = 0; k < 17; ++k) {
      p.keypoints.coords.push_back({p.box.x1 + 1 + k, p.box.y1 + 2 + 2 * k});
      p.keypoints.visibility.push_back(k == 3 ? Visibility::kUnlabeled : Visibility::kVisible);
    }
    scene.instances.push_back(p);
  }
  return make_targets(scene, 17, torch::kFloat64);
}

StagePredictions predictions_for(const ImageTargets& t, int n, double logit) {
  const auto g = t.size();
  StagePredictions p;
  p.logits = torch::full({1, n}, -logit, torch::kFloat64);
  p.boxes = torch::tensor({1.0, 1.0, 5.0, 5.0}, torch::kFloat64).repeat({1, n, 1});
  p.pose_mean = torch::zeros({1, n, 17, 2}, torch::kFloat64);
  p.pose_scale = torch::full({1, n, 17, 2}, 0.5, torch::kFloat64);
  for (int64_t j = 0; j < g; ++j) {
    p.logits[0][j] = logit;
    p.boxes[0][j] = t.boxes[j];
  }
  return p;
}

}  // namespace

TEST_SUITE("matching") {
  TEST_CASE("focal loss closed forms") {
    CHECK(focal_loss(0.0, 1, 0.25, 2.0) == doctest::Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-12));
    CHECK(focal_loss(40.0, 1, 0.25, 2.0) < 1e-12);
    for (double x : {-3.0, -0.2, 0.0, 1.7}) {
      const double p = 1.0 / (1.0 + std::exp(-x));
      CHECK(focal_loss(x, 1, 0.5, 0.0) == doctest::Approx(-0.5 * std::log(p)).epsilon(1e-12));
      CHECK(focal_loss(x, 0, 0.5, 0.0) == doctest::Approx(-0.5 * std::log(1 - p)).epsilon(1e-12));
    }
    auto x = torch::tensor({0.0, 40.0, -2.0}, torch::kFloat64);
    auto t = torch::tensor({1.0, 1.0, 0.0}, torch::kFloat64);
    auto v = focal_loss(x, t, 0.25, 2.0);
    for (int i = 0; i < 3; ++i) {
      CHECK(v[i].item<double>() ==
            doctest::Approx(focal_loss(x[i].item<double>(), static_cast<int>(t[i].item<double>()), 0.25, 2.0)).epsilon(1e-12));
    }
  }

  TEST_CASE("weights default to two, five, two") {
    LossWeights w;
    CHECK(w.cls == 2.0);
    CHECK(w.l1 == 5.0);
    CHECK(w.giou == 2.0);
    CHECK_FALSE(w.keypoint_cost);
  }

  TEST_CASE("cost of an exact confident match") {
    auto t = two_people();
    const double x = 8.0;
    auto c = cost_matrix(torch::full({1}, x, torch::kFloat64), t.boxes[0].view({1, 4}), t, 64, 64, LossWeights{});
    const double p = 1.0 / (1.0 + std::exp(-x));
    const double pos = 0.25 * (1 - p) * (1 - p) * -std::log(p);
    const double neg = 0.75 * p * p * -std::log(1 - p);
    CHECK(pos < 1e-5);
    CHECK(c.at(0, 0) == doctest::Approx(2.0 * (pos - neg) + 0.0 - 2.0).epsilon(1e-9));
  }

  TEST_CASE("cost matrix terms follow the weighted sum") {
    auto t = two_people();
    auto logits = torch::tensor({0.3, -1.2, 2.0}, torch::kFloat64);
    auto boxes = torch::tensor({0.0, 0.0, 20.0, 30.0, 12.0, 9.0, 31.0, 48.0, 5.0, 5.0, 60.0, 60.0}, torch::kFloat64).view({3, 4});
    LossWeights w;
    auto c = cost_matrix(logits, boxes, t, 64, 48, w);
    for (int i = 0; i < 3; ++i) {
      const double x = logits[i].item<double>();
      const double p = 1.0 / (1.0 + std::exp(-x));
      const double cls = 0.25 * (1 - p) * (1 - p) * -std::log(p) - 0.75 * p * p * -std::log(1 - p);
      for (int j = 0; j < 2; ++j) {
        const Box a{boxes[i][0].item<double>(), boxes[i][1].item<double>(), boxes[i][2].item<double>(), boxes[i][3].item<double>()};
        const Box b{t.boxes[j][0].item<double>(), t.boxes[j][1].item<double>(), t.boxes[j][2].item<double>(), t.boxes[j][3].item<double>()};
        const double l1 = std::abs(a.x1 - b.x1) / 64 + std::abs(a.y1 - b.y1) / 48 + std::abs(a.x2 - b.x2) / 64 +
                          std::abs(a.y2 - b.y2) / 48;
        CHECK(c.at(i, j) == doctest::Approx(2 * cls + 5 * l1 - 2 * giou(a, b)).epsilon(1e-9));
      }
    }
  }

  TEST_CASE("identical predictions give identical rows") {
    auto t = two_people();
    auto c = cost_matrix(torch::zeros({2}, torch::kFloat64), torch::tensor({2.0, 2.0, 9.0, 9.0}, torch::kFloat64).repeat({2, 1}),
                         t, 64, 64, LossWeights{});
    CHECK(c.at(0, 0) == c.at(1, 0));
    CHECK(c.at(0, 1) == c.at(1, 1));
    auto a = hungarian(c);
    CHECK(a.pairs.size() == 2);
  }

  TEST_CASE("cost matrix rejects an invalid ground-truth box") {
    auto t = two_people();
    t.boxes[1][2] = t.boxes[1][0];
    CHECK_THROWS_AS(cost_matrix(torch::zeros({2}), torch::rand({2, 4}) * 10, t, 64, 64, LossWeights{}), DataError);
  }

  TEST_CASE("hungarian small cases") {
    CostMatrix one(1, 1);
    one.values = {3.0};
    CHECK(hungarian(one).pairs == std::vector<std::pair<int, int>>{{0, 0}});

    CostMatrix two(2, 2);
    two.values = {1, 10, 10, 1};
    auto a = hungarian(two);
    CHECK(a.pairs == std::vector<std::pair<int, int>>{{0, 0}, {1, 1}});
    CHECK(a.total_cost(two) == 2.0);

    CHECK(hungarian(CostMatrix(0, 0)).pairs.empty());
    CHECK(hungarian(CostMatrix(4, 0)).pairs.empty());
    CHECK(hungarian(CostMatrix(0, 3)).pairs.empty());
  }

  TEST_CASE("hungarian ties resolve toward the lowest prediction index") {
    CostMatrix c(3, 1);
    c.values = {1.0, 1.0, 1.0};
    CHECK(hungarian(c).pairs == std::vector<std::pair<int, int>>{{0, 0}});
    CostMatrix d(3, 2);
    d.values = {0, 0, 0, 0, 0, 0};
    auto a = hungarian(d);
    std::set<int> rows;
    for (auto [r, col] : a.pairs) rows.insert(r);
    CHECK(rows == std::set<int>{0, 1});
  }

  TEST_CASE("hungarian rejects non-finite costs") {
    CostMatrix c(2, 2);
    c.values = {1, NAN, 0, 1};
    CHECK_THROWS_AS(hungarian(c), NumericError);
  }

  TEST_CASE("hungarian equals brute force on square and rectangular matrices") {
    std::mt19937 rng(11);
    for (int t = 0; t < 200; ++t) {
      const int rows = 1 + static_cast<int>(rng() % 6);
      const int cols = 1 + static_cast<int>(rng() % 6);
      auto c = random_cost(rng, t < 50 ? 6 : rows, t < 50 ? 6 : cols);
      auto a = hungarian(c);
      CHECK(a.pairs.size() == static_cast<std::size_t>(std::min(c.rows, c.cols)));
      std::set<int> r, k;
      for (auto [i, j] : a.pairs) {
        r.insert(i);
        k.insert(j);
      }
      CHECK(r.size() == a.pairs.size());
      CHECK(k.size() == a.pairs.size());
      CHECK(a.total_cost(c) == doctest::Approx(testing::brute_force_assignment(c)).epsilon(1e-12));
    }
  }

  TEST_CASE("perfect predictions give zero box losses") {
    auto t = two_people();
    auto p = predictions_for(t, 5, 30.0);
    RealNvpFlow flow(4, 64);
    flow->to(torch::kFloat64);
    auto assignment = match_stage(p, {t}, 64, 64, LossWeights{});
    CHECK(assignment[0].pairs == std::vector<std::pair<int, int>>{{0, 0}, {1, 1}});
    auto loss = stage_loss(p, {t}, assignment, flow, LossWeights{}, FlowMode::kResidual, 64, 64);
    CHECK(loss.l1.item<double>() == doctest::Approx(0.0));
    CHECK(loss.giou.item<double>() < 1e-9);
    CHECK(loss.cls.item<double>() < 1e-9);
    CHECK(loss.total.item<double>() == doctest::Approx(loss.instance.item<double>() + loss.keypoint.item<double>()));
  }

  TEST_CASE("empty ground truth leaves only the negative focal term") {
    ImageTargets empty = make_targets(SceneAnnotation{}, 17, torch::kFloat64);
    auto p = predictions_for(empty, 4, 0.0);
    p.logits = torch::tensor({0.5, -1.0, 2.0, 0.0}, torch::kFloat64).view({1, 4});
    RealNvpFlow flow(4, 64);
    flow->to(torch::kFloat64);
    auto assignment = match_stage(p, {empty}, 64, 64, LossWeights{});
    CHECK(assignment[0].pairs.empty());
    auto loss = stage_loss(p, {empty}, assignment, flow, LossWeights{}, FlowMode::kResidual, 64, 64);
    double expected = 0.0;
    for (double x : {0.5, -1.0, 2.0, 0.0}) expected += focal_loss(x, 0, 0.25, 2.0);
    CHECK(loss.cls.item<double>() == doctest::Approx(expected).epsilon(1e-12));
    CHECK(loss.l1.item<double>() == 0.0);
    CHECK(loss.giou.item<double>() == 0.0);
    CHECK(loss.keypoint.item<double>() == 0.0);
    CHECK(loss.no_keypoint_supervision);
  }

  TEST_CASE("stage loss is invariant to ground-truth order") {
    torch::manual_seed(5);
    auto t = two_people();
    StagePredictions p;
    p.logits = torch::randn({1, 4}, torch::kFloat64);
    p.boxes = torch::tensor({9.0, 7.0, 29.0, 52.0, 31.0, 9.0, 52.0, 49.0, 2.0, 2.0, 20.0, 20.0, 40.0, 30.0, 60.0, 60.0},
                            torch::kFloat64)
                  .view({1, 4, 4});
    p.pose_mean = torch::randn({1, 4, 17, 2}, torch::kFloat64) * 0.1;
    p.pose_scale = torch::rand({1, 4, 17, 2}, torch::kFloat64) * 0.5 + 0.1;
    ImageTargets swapped{t.boxes.flip(0), t.keypoints.flip(0), t.labeled.flip(0)};
    RealNvpFlow flow(4, 64);
    flow->to(torch::kFloat64);
    auto a = stage_loss(p, {t}, match_stage(p, {t}, 64, 64, {}), flow, {}, FlowMode::kResidual, 64, 64);
    auto b = stage_loss(p, {swapped}, match_stage(p, {swapped}, 64, 64, {}), flow, {}, FlowMode::kResidual, 64, 64);
    CHECK(a.total.item<double>() == doctest::Approx(b.total.item<double>()).epsilon(1e-12));
  }

  TEST_CASE("weights change the matching and the loss together") {
    auto t = two_people();
    auto p = predictions_for(t, 3, 2.0);
    p.boxes[0][0][0] = 12.0;
    LossWeights w;
    w.l1 = 10.0;
    RealNvpFlow flow(4, 64);
    flow->to(torch::kFloat64);
    auto assignment = match_stage(p, {t}, 64, 64, w);
    auto loss = stage_loss(p, {t}, assignment, flow, w, FlowMode::kResidual, 64, 64);
    CHECK(loss.instance.item<double>() ==
          doctest::Approx(w.cls * loss.cls.item<double>() + w.l1 * loss.l1.item<double>() + w.giou * loss.giou.item<double>()));
  }
}
