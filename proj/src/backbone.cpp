#include "querypose/backbone.hpp"

#include <string>

#include "querypose/errors.hpp"

namespace querypose {

namespace {

namespace nn = torch::nn;

// Appends conv3x3 (no bias) + GroupNorm + ReLU.
void add_conv_block(nn::Sequential& seq, int in, int out, int stride) {
  nn::Conv2d conv(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false));
  nn::init::kaiming_normal_(conv->weight, 0.0, torch::kFanOut, torch::kReLU);
  seq->push_back(conv);
  seq->push_back(nn::GroupNorm(nn::GroupNormOptions(std::min(8, out), out)));
  seq->push_back(nn::ReLU());
}

}  // namespace

void check_backbone_input(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != 3) throw ShapeError("backbone: expected (B, 3, H, W) images");
  const auto h = images.size(2);
  const auto w = images.size(3);
  if (h < 32 || w < 32) {
    throw ShapeError("backbone: input " + std::to_string(h) + "x" + std::to_string(w) +
                     " is smaller than one stride-32 cell");
  }
  if (h % 32 != 0 || w % 32 != 0) {
    throw ShapeError("backbone: input " + std::to_string(h) + "x" + std::to_string(w) +
                     " must be padded to multiples of 32");
  }
}

BackboneImpl::BackboneImpl(const BackboneOptions& options) {
  const auto& ch = options.trunk_channels;
  nn::Sequential stem;
  add_conv_block(stem, 3, ch[0], 2);
  stem_ = register_module("stem", stem);
  int in = ch[0];
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    nn::Sequential stage;
    add_conv_block(stage, in, ch[i], 2);
    add_conv_block(stage, ch[i], ch[i], 1);
    stages_[i] = register_module("stage" + std::to_string(i + 2), stage);
    laterals_[i] = register_module("lateral" + std::to_string(i + 2),
                                   nn::Conv2d(nn::Conv2dOptions(ch[i], options.out_channels, 1)));
    outputs_[i] = register_module("output" + std::to_string(i + 2),
                                  nn::Conv2d(nn::Conv2dOptions(options.out_channels, options.out_channels, 3).padding(1)));
    for (auto* conv : {&laterals_[i], &outputs_[i]}) {
      nn::init::kaiming_uniform_((*conv)->weight, 1.0);
      nn::init::zeros_((*conv)->bias);
    }
    in = ch[i];
  }
}

FeaturePyramid BackboneImpl::forward(const torch::Tensor& images) {
  check_backbone_input(images);
  std::array<torch::Tensor, 4> trunk;
  auto x = stem_->forward(images);
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    x = stages_[i]->forward(x);
    trunk[i] = x;
  }
  FeaturePyramid pyramid;
  auto top = laterals_[3]->forward(trunk[3]);
  pyramid.levels[3] = outputs_[3]->forward(top);
  for (int i = 2; i >= 0; --i) {
    const auto& lat_in = trunk[static_cast<std::size_t>(i)];
    auto up = torch::nn::functional::interpolate(
        top, torch::nn::functional::InterpolateFuncOptions()
                 .size(std::vector<int64_t>{lat_in.size(2), lat_in.size(3)})
                 .mode(torch::kNearest));
    top = laterals_[static_cast<std::size_t>(i)]->forward(lat_in) + up;
    pyramid.levels[static_cast<std::size_t>(i)] = outputs_[static_cast<std::size_t>(i)]->forward(top);
  }
  return pyramid;
}

void BackboneImpl::zero_output_layers() {
  torch::NoGradGuard guard;
  for (auto& conv : outputs_) {
    conv->weight.zero_();
    conv->bias.zero_();
  }
}

}  // namespace querypose
