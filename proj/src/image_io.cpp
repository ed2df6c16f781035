#include "querypose/image_io.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <array>
#include <cmath>

#include "querypose/errors.hpp"

namespace querypose {

cv::Mat read_image(const std::string& path) {
  cv::Mat image = cv::imread(path, cv::IMREAD_COLOR);
  if (image.empty()) throw DataError("cannot read image " + path);
  return image;
}

void write_image(const std::string& path, const cv::Mat& image) {
  bool ok = false;
  try {
    ok = cv::imwrite(path, image);
  } catch (const cv::Exception&) {
    ok = false;
  }
  if (!ok) throw DataError("cannot write image " + path);
}

torch::Tensor image_to_tensor(const cv::Mat& bgr, const ModelConfig& config) {
  if (bgr.empty() || bgr.type() != CV_8UC3) throw DataError("expected a non-empty 8-bit color image");
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  auto t = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8).clone();
  t = t.permute({2, 0, 1}).to(torch::kFloat32).div(255.0);
  auto mean = torch::tensor(std::vector<double>(config.pixel_mean.begin(), config.pixel_mean.end()), torch::kFloat32);
  auto std = torch::tensor(std::vector<double>(config.pixel_std.begin(), config.pixel_std.end()), torch::kFloat32);
  return ((t - mean.view({3, 1, 1})) / std.view({3, 1, 1})).contiguous();
}

Letterboxed letterbox(const cv::Mat& bgr, int size) {
  if (bgr.empty()) throw DataError("letterbox: empty image");
  Letterboxed out;
  out.scale = static_cast<double>(size) / std::max(bgr.cols, bgr.rows);
  const int w = std::max(1, static_cast<int>(std::lround(bgr.cols * out.scale)));
  const int h = std::max(1, static_cast<int>(std::lround(bgr.rows * out.scale)));
  cv::Mat resized;
  cv::resize(bgr, resized, cv::Size(w, h), 0, 0, out.scale < 1.0 ? cv::INTER_AREA : cv::INTER_LINEAR);
  out.image = cv::Mat::zeros(size, size, bgr.type());
  resized.copyTo(out.image(cv::Rect(0, 0, w, h)));
  return out;
}

SceneAnnotation scale_annotation(const SceneAnnotation& scene, double scale, int width, int height) {
  SceneAnnotation out = scene;
  out.width = width;
  out.height = height;
  for (auto& inst : out.instances) {
    inst.box = Box{inst.box.x1 * scale, inst.box.y1 * scale, inst.box.x2 * scale, inst.box.y2 * scale};
    inst.area *= scale * scale;
    for (auto& c : inst.keypoints.coords) c = {c.x * scale, c.y * scale};
  }
  return out;
}

namespace {

constexpr std::array<std::pair<int, int>, 16> kSkeleton = {{{0, 1},
                                                           {0, 2},
                                                           {1, 3},
                                                           {2, 4},
                                                           {5, 6},
                                                           {5, 7},
                                                           {7, 9},
                                                           {6, 8},
                                                           {8, 10},
                                                           {5, 11},
                                                           {6, 12},
                                                           {11, 12},
                                                           {11, 13},
                                                           {13, 15},
                                                           {12, 14},
                                                           {14, 16}}};

}  // namespace

cv::Mat render_poses(const cv::Mat& bgr, const std::vector<ScoredPose>& poses) {
  cv::Mat canvas = bgr.clone();
  for (const auto& p : poses) {
    const auto& c = p.keypoints.coords;
    auto pt = [&](std::size_t k) { return cv::Point(static_cast<int>(std::lround(c[k].x)), static_cast<int>(std::lround(c[k].y))); };
    cv::rectangle(canvas, cv::Point(static_cast<int>(p.box.x1), static_cast<int>(p.box.y1)),
                  cv::Point(static_cast<int>(p.box.x2), static_cast<int>(p.box.y2)), cv::Scalar(0, 255, 0), 1);
    for (const auto& [a, b] : kSkeleton) {
      if (static_cast<std::size_t>(std::max(a, b)) >= c.size()) continue;
      cv::line(canvas, pt(static_cast<std::size_t>(a)), pt(static_cast<std::size_t>(b)), cv::Scalar(255, 255, 255), 2,
               cv::LINE_AA);
    }
    for (std::size_t k = 0; k < c.size(); ++k) cv::circle(canvas, pt(k), 3, cv::Scalar(0, 0, 255), cv::FILLED, cv::LINE_AA);
    cv::putText(canvas, cv::format("%.2f", p.score), cv::Point(static_cast<int>(p.box.x1), static_cast<int>(p.box.y1) + 10),
                cv::FONT_HERSHEY_SIMPLEX, 0.35, cv::Scalar(0, 255, 0), 1);
  }
  return canvas;
}

cv::Mat attention_overlay(const cv::Mat& bgr, const torch::Tensor& map, const Box& box) {
  if (map.dim() != 2) throw ShapeError("attention_overlay: map must be 2-D");
  auto m = map.detach().to(torch::kFloat32).contiguous();
  m = m / m.max().clamp_min(1e-12);
  cv::Mat heat(static_cast<int>(m.size(0)), static_cast<int>(m.size(1)), CV_32F, m.data_ptr<float>());
  cv::Mat heat8;
  heat.convertTo(heat8, CV_8U, 255.0);

  const int x1 = std::clamp(static_cast<int>(std::floor(box.x1)), 0, bgr.cols - 1);
  const int y1 = std::clamp(static_cast<int>(std::floor(box.y1)), 0, bgr.rows - 1);
  const int x2 = std::clamp(static_cast<int>(std::ceil(box.x2)), x1 + 1, bgr.cols);
  const int y2 = std::clamp(static_cast<int>(std::ceil(box.y2)), y1 + 1, bgr.rows);
  cv::Mat resized;
  cv::resize(heat8, resized, cv::Size(x2 - x1, y2 - y1), 0, 0, cv::INTER_LINEAR);
  cv::Mat colored;
  cv::applyColorMap(resized, colored, cv::COLORMAP_JET);

  cv::Mat canvas = bgr.clone();
  cv::Mat roi = canvas(cv::Rect(x1, y1, x2 - x1, y2 - y1));
  cv::addWeighted(roi, 0.5, colored, 0.5, 0.0, roi);
  cv::rectangle(canvas, cv::Rect(x1, y1, x2 - x1, y2 - y1), cv::Scalar(255, 255, 255), 1);
  return canvas;
}

}  // namespace querypose
