#pragma once

#include <torch/torch.h>

#include <array>

namespace querypose {

// P2..P5 at strides 4, 8, 16, 32; every level has the same channel count.
struct FeaturePyramid {
  static constexpr std::array<int, 4> kStrides = {4, 8, 16, 32};
  std::array<torch::Tensor, 4> levels;  // each (B, C, H/stride, W/stride)

  [[nodiscard]] const torch::Tensor& p2() const { return levels[0]; }
};

struct BackboneOptions {
  std::array<int, 4> trunk_channels = {32, 64, 128, 256};
  int out_channels = 256;
};

// Small convolutional trunk (four stages, two 3x3 conv blocks each, stride-2
// entry) followed by a top-down feature pyramid with 1x1 laterals, nearest
// upsampling and 3x3 smoothing.
class BackboneImpl : public torch::nn::Module {
 public:
  explicit BackboneImpl(const BackboneOptions& options = {});

  // `images` is (B, 3, H, W), already normalized; H and W must be multiples of 32.
  FeaturePyramid forward(const torch::Tensor& images);

  // Zeroes the 3x3 output convolutions, so every level becomes exactly zero.
  void zero_output_layers();

 private:
  torch::nn::Sequential stem_{nullptr};
  std::array<torch::nn::Sequential, 4> stages_;
  std::array<torch::nn::Conv2d, 4> laterals_ = {nullptr, nullptr, nullptr, nullptr};
  std::array<torch::nn::Conv2d, 4> outputs_ = {nullptr, nullptr, nullptr, nullptr};
};
TORCH_MODULE(Backbone);

// Checks the input-size contract; throws ShapeError.
void check_backbone_input(const torch::Tensor& images);

}  // namespace querypose
