#include "querypose/synthetic.hpp"

#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "querypose/errors.hpp"
#include "querypose/part_division.hpp"

namespace querypose {

SplitMix64::SplitMix64(std::uint64_t seed, std::uint64_t index, std::uint64_t stream)
    : state_(seed ^ (0x9E3779B97F4A7C15ULL * (index + 1)) ^ (0xD1B54A32D192ED03ULL * (stream + 1))) {
  next();
}

std::uint64_t SplitMix64::next() {
  std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double SplitMix64::uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

int SplitMix64::integer(int lo, int hi) {
  const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(next() % span);
}

double SplitMix64::normal() {
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

void SyntheticConfig::validate() const {
  if (image_width < 32 || image_height < 32) throw ConfigError("synthetic.image_width/height: must be at least 32");
  if (min_persons < 1 || max_persons < min_persons) {
    throw ConfigError("synthetic.min_persons/max_persons: need 1 <= min <= max");
  }
  if (!(min_scale > 0.0) || max_scale < min_scale) {
    throw ConfigError("synthetic.min_scale/max_scale: need 0 < min <= max");
  }
  // A figure is about as wide as it is tall with arms raised, plus a margin.
  if (max_scale * image_height > 0.9 * image_height || max_scale * image_height > 0.9 * image_width) {
    throw ConfigError("synthetic.max_scale: figure would not fit inside the image");
  }
  if (occlusion_prob < 0.0 || occlusion_prob > 1.0) throw ConfigError("synthetic.occlusion_prob: must lie in [0, 1]");
  if (clutter_density < 0.0) throw ConfigError("synthetic.clutter_density: must be non-negative");
}

namespace {

using Pose = std::array<cv::Point2d, kCocoNumKeypoints>;

// Limbs drawn as colored segments; each limb has its own color so the left and
// right sides stay distinguishable.
struct Limb {
  int a;
  int b;
  cv::Scalar color;  // BGR
};

const std::array<Limb, 16>& limbs() {
  static const std::array<Limb, 16> table = {{
      {kLeftShoulder, kRightShoulder, {40, 200, 200}},
      {kLeftHip, kRightHip, {200, 200, 40}},
      {kLeftShoulder, kLeftHip, {60, 180, 60}},
      {kRightShoulder, kRightHip, {180, 60, 180}},
      {kLeftShoulder, kLeftElbow, {0, 0, 255}},
      {kLeftElbow, kLeftWrist, {0, 128, 255}},
      {kRightShoulder, kRightElbow, {255, 0, 0}},
      {kRightElbow, kRightWrist, {255, 128, 0}},
      {kLeftHip, kLeftKnee, {0, 255, 255}},
      {kLeftKnee, kLeftAnkle, {0, 255, 128}},
      {kRightHip, kRightKnee, {255, 0, 255}},
      {kRightKnee, kRightAnkle, {128, 0, 255}},
      {kNose, kLeftEye, {90, 90, 255}},
      {kNose, kRightEye, {255, 90, 90}},
      {kLeftEye, kLeftEar, {60, 60, 200}},
      {kRightEye, kRightEar, {200, 60, 60}},
  }};
  return table;
}

cv::Scalar joint_color(int k) {
  // Left joints warm, right joints cool, head white-ish.
  if (k <= kRightEar) return k % 2 == 1 ? cv::Scalar(120, 220, 255) : (k == kNose ? cv::Scalar(255, 255, 255) : cv::Scalar(255, 220, 120));
  return k % 2 == 1 ? cv::Scalar(0, 60, 230) : cv::Scalar(230, 60, 0);
}

cv::Point2d direction(double angle) { return {std::sin(angle), std::cos(angle)}; }

// Articulated skeleton in figure units (height 1), origin at the hip center, y down.
Pose random_pose(SplitMix64& rng) {
  constexpr double deg = std::numbers::pi / 180.0;
  Pose p{};
  const double lean = rng.uniform(-12, 12) * deg;
  const cv::Point2d up = -direction(lean);
  const cv::Point2d side(std::cos(lean), std::sin(lean));  // toward the person's left (image right)
  const cv::Point2d hip(0, 0);
  const cv::Point2d neck = hip + 0.30 * up;

  p[kLeftShoulder] = neck + 0.11 * side;
  p[kRightShoulder] = neck - 0.11 * side;
  p[kLeftHip] = hip + 0.075 * side;
  p[kRightHip] = hip - 0.075 * side;

  const double tilt = rng.uniform(-15, 15) * deg;
  const cv::Point2d head_up = -direction(lean + tilt);
  const cv::Point2d head_side(std::cos(lean + tilt), std::sin(lean + tilt));
  p[kNose] = neck + 0.12 * head_up;
  p[kLeftEye] = p[kNose] + 0.028 * head_side + 0.025 * head_up;
  p[kRightEye] = p[kNose] - 0.028 * head_side + 0.025 * head_up;
  p[kLeftEar] = p[kNose] + 0.055 * head_side + 0.005 * head_up;
  p[kRightEar] = p[kNose] - 0.055 * head_side + 0.005 * head_up;

  // Angles measured from straight down; positive swings toward image right.
  auto arm = [&](int shoulder, int elbow, int wrist, double sign) {
    const double upper = lean + sign * rng.uniform(-20, 150) * deg;
    const double lower = upper + sign * rng.uniform(-10, 120) * deg;
    p[elbow] = p[shoulder] + 0.16 * direction(upper);
    p[wrist] = p[elbow] + 0.14 * direction(lower);
  };
  arm(kLeftShoulder, kLeftElbow, kLeftWrist, 1.0);
  arm(kRightShoulder, kRightElbow, kRightWrist, -1.0);

  auto leg = [&](int hip_k, int knee, int ankle, double sign) {
    const double thigh = lean + sign * rng.uniform(-15, 40) * deg;
    const double shin = thigh - sign * rng.uniform(0, 60) * deg;
    p[knee] = p[hip_k] + 0.24 * direction(thigh);
    p[ankle] = p[knee] + 0.23 * direction(shin);
  };
  leg(kLeftHip, kLeftKnee, kLeftAnkle, 1.0);
  leg(kRightHip, kRightKnee, kRightAnkle, -1.0);
  return p;
}

cv::Point fixed_point(const cv::Point2d& p) {
  constexpr double kScale = 16.0;  // 4 fractional bits
  return {static_cast<int>(std::lround(p.x * kScale)), static_cast<int>(std::lround(p.y * kScale))};
}

void draw_background(cv::Mat& image, const SyntheticConfig& cfg, std::int64_t index) {
  SplitMix64 rng(cfg.seed, static_cast<std::uint64_t>(index), 1);
  // Smooth color field from a coarse random grid, then fine grain noise.
  cv::Mat coarse(4, 4, CV_32FC3);
  const cv::Vec3f base(static_cast<float>(rng.uniform(40, 160)), static_cast<float>(rng.uniform(40, 160)),
                       static_cast<float>(rng.uniform(40, 160)));
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 4; ++x) {
      coarse.at<cv::Vec3f>(y, x) = base + cv::Vec3f(static_cast<float>(rng.uniform(-40, 40)),
                                                    static_cast<float>(rng.uniform(-40, 40)),
                                                    static_cast<float>(rng.uniform(-40, 40)));
    }
  }
  cv::Mat field;
  cv::resize(coarse, field, image.size(), 0, 0, cv::INTER_CUBIC);
  for (int y = 0; y < image.rows; ++y) {
    for (int x = 0; x < image.cols; ++x) {
      const auto& f = field.at<cv::Vec3f>(y, x);
      const double grain = 10.0 * (rng.uniform() - 0.5);
      auto& px = image.at<cv::Vec3b>(y, x);
      for (int c = 0; c < 3; ++c) px[c] = cv::saturate_cast<uchar>(f[c] + grain);
    }
  }

  SplitMix64 clutter(cfg.seed, static_cast<std::uint64_t>(index), 2);
  const int strokes = static_cast<int>(std::lround(cfg.clutter_density * image.cols * image.rows / 4096.0));
  for (int i = 0; i < strokes; ++i) {
    const cv::Scalar color(clutter.uniform(30, 200), clutter.uniform(30, 200), clutter.uniform(30, 200));
    const cv::Point a(clutter.integer(0, image.cols - 1), clutter.integer(0, image.rows - 1));
    const int kind = clutter.integer(0, 2);
    if (kind == 0) {
      const cv::Point b(clutter.integer(0, image.cols - 1), clutter.integer(0, image.rows - 1));
      cv::line(image, a, b, color, clutter.integer(1, 3), cv::LINE_AA);
    } else if (kind == 1) {
      cv::circle(image, a, clutter.integer(3, 14), color, clutter.integer(1, 2), cv::LINE_AA);
    } else {
      const cv::Point b = a + cv::Point(clutter.integer(4, 20), clutter.integer(4, 20));
      cv::rectangle(image, a, b, color, cv::FILLED);
    }
  }
}

}  // namespace

SyntheticScene generate_scene(const SyntheticConfig& cfg, std::int64_t index) {
  cfg.validate();
  if (index < 0) throw DataError("synthetic scene index must be non-negative");
  SyntheticScene scene;
  scene.image = cv::Mat(cfg.image_height, cfg.image_width, CV_8UC3);
  draw_background(scene.image, cfg, index);

  SplitMix64 rng(cfg.seed, static_cast<std::uint64_t>(index), 0);
  auto& ann = scene.annotation;
  ann.image_id = index;
  ann.width = cfg.image_width;
  ann.height = cfg.image_height;

  const int persons = rng.integer(cfg.min_persons, cfg.max_persons);
  for (int i = 0; i < persons; ++i) {
    const Pose unit = random_pose(rng);
    double height = rng.uniform(cfg.min_scale, cfg.max_scale) * cfg.image_height;
    const double thickness = std::max(2.0, 0.03 * height);
    const double margin = 0.04 * height + thickness;

    // Extent in figure units; shrink until the padded figure fits.
    double lo_x = 1e9, lo_y = 1e9, hi_x = -1e9, hi_y = -1e9;
    for (const auto& q : unit) {
      lo_x = std::min(lo_x, q.x);
      lo_y = std::min(lo_y, q.y);
      hi_x = std::max(hi_x, q.x);
      hi_y = std::max(hi_y, q.y);
    }
    const double fit = std::min((cfg.image_width - 2.0 * margin - 2.0) / ((hi_x - lo_x) * height),
                                (cfg.image_height - 2.0 * margin - 2.0) / ((hi_y - lo_y) * height));
    if (fit < 1.0) height *= fit;

    const double min_x = margin - lo_x * height;
    const double max_x = cfg.image_width - margin - hi_x * height;
    const double min_y = margin - lo_y * height;
    const double max_y = cfg.image_height - margin - hi_y * height;
    const cv::Point2d origin(rng.uniform(min_x, std::max(min_x, max_x)), rng.uniform(min_y, std::max(min_y, max_y)));

    PersonInstance person;
    person.id = index * 100 + i + 1;
    Pose pose{};
    for (int k = 0; k < kCocoNumKeypoints; ++k) {
      pose[static_cast<std::size_t>(k)] = origin + height * unit[static_cast<std::size_t>(k)];
      person.keypoints.coords.push_back({pose[static_cast<std::size_t>(k)].x, pose[static_cast<std::size_t>(k)].y});
      person.keypoints.visibility.push_back(Visibility::kVisible);
    }

    const int t = static_cast<int>(std::lround(thickness));
    // cv drawing treats integer coordinates as pixel centers; keypoints use a
    // continuous frame where pixel (i, j) spans [i, i+1), hence the half-pixel shift.
    auto at = [&](int k) { return fixed_point(pose[static_cast<std::size_t>(k)] - cv::Point2d(0.5, 0.5)); };
    cv::circle(scene.image, at(kNose), static_cast<int>(std::lround(16 * 0.075 * height)), cv::Scalar(230, 230, 230),
               std::max(1, t / 2), cv::LINE_AA, 4);
    for (const auto& limb : limbs()) cv::line(scene.image, at(limb.a), at(limb.b), limb.color, t, cv::LINE_AA, 4);
    for (int k = 0; k < kCocoNumKeypoints; ++k) {
      cv::circle(scene.image, at(k), 16 * std::max(2, t), joint_color(k), cv::FILLED, cv::LINE_AA, 4);
    }

    if (rng.uniform() < cfg.occlusion_prob) {
      static constexpr std::array<int, 4> ends = {kLeftWrist, kRightWrist, kLeftAnkle, kRightAnkle};
      const int k = ends[static_cast<std::size_t>(rng.integer(0, 3))];
      const double r = 2.5 * thickness;
      const cv::Point2d c = pose[static_cast<std::size_t>(k)];
      cv::rectangle(scene.image, fixed_point(c - cv::Point2d(r, r)), fixed_point(c + cv::Point2d(r, r)),
                    cv::Scalar(110, 110, 110), cv::FILLED, cv::LINE_8, 4);
      person.keypoints.visibility[static_cast<std::size_t>(k)] = Visibility::kOccluded;
    }

    double bx1 = 1e9, by1 = 1e9, bx2 = -1e9, by2 = -1e9;
    for (const auto& q : pose) {
      bx1 = std::min(bx1, q.x);
      by1 = std::min(by1, q.y);
      bx2 = std::max(bx2, q.x);
      by2 = std::max(by2, q.y);
    }
    person.box = Box{std::max(0.0, bx1 - margin), std::max(0.0, by1 - margin),
                     std::min<double>(cfg.image_width, bx2 + margin), std::min<double>(cfg.image_height, by2 + margin)};
    person.area = person.box.area();
    ann.instances.push_back(std::move(person));
  }
  return scene;
}

}  // namespace querypose
