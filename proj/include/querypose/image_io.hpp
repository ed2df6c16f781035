#pragma once

#include <opencv2/core.hpp>
#include <torch/torch.h>

#include <string>
#include <vector>

#include "querypose/annotation.hpp"
#include "querypose/config.hpp"

namespace querypose {

// Reads a color image; throws DataError if it cannot be decoded.
cv::Mat read_image(const std::string& path);
void write_image(const std::string& path, const cv::Mat& image);

// BGR 8-bit image -> (3, H, W) float tensor, RGB order, normalized with the
// model's pixel statistics.
torch::Tensor image_to_tensor(const cv::Mat& bgr, const ModelConfig& config);

struct Letterboxed {
  cv::Mat image;       // size x size
  double scale = 1.0;  // model pixels per original pixel
};

// Resizes so the longer side equals `size` and pads the bottom/right with
// black to a size x size canvas.
Letterboxed letterbox(const cv::Mat& bgr, int size);

// Maps an annotation into letterboxed coordinates.
SceneAnnotation scale_annotation(const SceneAnnotation& scene, double scale, int width, int height);

// Draws skeletons, boxes and scores for each pose.
cv::Mat render_poses(const cv::Mat& bgr, const std::vector<ScoredPose>& poses);

// Blends a heat map (h, w), stretched over `box`, onto the image.
cv::Mat attention_overlay(const cv::Mat& bgr, const torch::Tensor& map, const Box& box);

}  // namespace querypose
