#include "querypose/box_decoder.hpp"

#include <cmath>
#include <string>

#include "querypose/errors.hpp"
#include "querypose/geometry.hpp"

namespace querypose {

namespace nn = torch::nn;

namespace {

// exp() guard on the log-size deltas.
const double kMaxLogScale = std::log(1000.0 / 16.0);

// Prior probability for the person logit at initialization.
constexpr double kClassPrior = 0.01;

}  // namespace

torch::Tensor clip_boxes(const torch::Tensor& boxes, double image_w, double image_h, double min_size) {
  auto c = boxes.unbind(-1);
  auto x1 = c[0].clamp(0.0, image_w - min_size);
  auto y1 = c[1].clamp(0.0, image_h - min_size);
  auto x2 = torch::maximum(c[2].clamp_max(image_w), x1 + min_size);
  auto y2 = torch::maximum(c[3].clamp_max(image_h), y1 + min_size);
  return torch::stack({x1, y1, x2, y2}, -1);
}

torch::Tensor apply_box_delta(const torch::Tensor& deltas, const torch::Tensor& boxes, double image_w,
                              double image_h, double min_size) {
  if (deltas.sizes() != boxes.sizes() || deltas.size(-1) != 4) {
    throw ShapeError("apply_box_delta: deltas and boxes must share a (..., 4) shape");
  }
  if (!torch::isfinite(deltas).all().item<bool>()) throw NumericError("apply_box_delta: non-finite box delta");
  auto b = boxes.unbind(-1);
  auto d = deltas.unbind(-1);
  const auto w = b[2] - b[0];
  const auto h = b[3] - b[1];
  const auto cx = b[0] + 0.5 * w + d[0] * w;
  const auto cy = b[1] + 0.5 * h + d[1] * h;
  const auto nw = w * torch::exp(d[2].clamp_max(kMaxLogScale));
  const auto nh = h * torch::exp(d[3].clamp_max(kMaxLogScale));
  auto out = torch::stack({cx - 0.5 * nw, cy - 0.5 * nh, cx + 0.5 * nw, cy + 0.5 * nh}, -1);
  return clip_boxes(out, image_w, image_h, min_size);
}

torch::Tensor assign_fpn_levels(const torch::Tensor& boxes) {
  auto c = boxes.detach().unbind(-1);
  auto scale = torch::sqrt(((c[2] - c[0]) * (c[3] - c[1])).clamp_min(1e-6));
  auto level = torch::floor(4.0 + torch::log2(scale / 224.0)).clamp(2.0, 5.0);
  return (level - 2.0).to(torch::kLong);
}

torch::Tensor multi_level_roi_align(const FeaturePyramid& pyramid, const torch::Tensor& boxes, int pool,
                                    int sampling_ratio) {
  const auto levels = assign_fpn_levels(boxes);
  torch::Tensor pooled;
  for (std::size_t l = 0; l < pyramid.levels.size(); ++l) {
    RoiAlignOptions opts{pool, pool, sampling_ratio, 1.0 / FeaturePyramid::kStrides[l]};
    auto r = roi_align(pyramid.levels[l], boxes, opts);
    auto mask = (levels == static_cast<int64_t>(l)).to(r.scalar_type()).view({boxes.size(0), boxes.size(1), 1, 1, 1});
    pooled = pooled.defined() ? pooled + r * mask : r * mask;
  }
  return pooled;
}

DynamicChannelMlpImpl::DynamicChannelMlpImpl(int dim, int dynamic_dim, int pool)
    : dim_(dim), dynamic_dim_(dynamic_dim), pool_(pool) {
  generator_ = register_module("generator", nn::Linear(dim, 2 * dim * dynamic_dim));
  norm1_ = register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({dynamic_dim})));
  norm2_ = register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({dim})));
  out_ = register_module("out", nn::Linear(nn::LinearOptions(dim * pool * pool, dim).bias(false)));
  out_norm_ = register_module("out_norm", nn::LayerNorm(nn::LayerNormOptions({dim})));
  fuse_norm_ = register_module("fuse_norm", nn::LayerNorm(nn::LayerNormOptions({dim})));
}

torch::Tensor DynamicChannelMlpImpl::forward(const torch::Tensor& queries, const torch::Tensor& rois) {
  if (queries.dim() != 2 || queries.size(1) != dim_) throw ShapeError("dynamic_channel_mlp: queries must be (R, d)");
  if (rois.dim() != 4 || rois.size(0) != queries.size(0) || rois.size(1) != dim_ || rois.size(2) != pool_ ||
      rois.size(3) != pool_) {
    throw ShapeError("dynamic_channel_mlp: expected " + std::to_string(queries.size(0)) + " RoI grids of shape (" +
                     std::to_string(dim_) + ", " + std::to_string(pool_) + ", " + std::to_string(pool_) + ")");
  }
  const int64_t r = queries.size(0);
  auto params = generator_->forward(queries);
  auto w1 = params.narrow(1, 0, dim_ * dynamic_dim_).view({r, dim_, dynamic_dim_});
  auto w2 = params.narrow(1, dim_ * dynamic_dim_, dim_ * dynamic_dim_).view({r, dynamic_dim_, dim_});

  auto x = rois.flatten(2).transpose(1, 2);  // (R, pool*pool, d)
  x = torch::relu(norm1_->forward(torch::bmm(x, w1)));
  x = torch::relu(norm2_->forward(torch::bmm(x, w2)));
  x = torch::relu(out_norm_->forward(out_->forward(x.flatten(1))));
  return fuse_norm_->forward(queries + x);
}

BoxStageImpl::BoxStageImpl(const ModelConfig& config) : pool_(config.box_pool), sampling_ratio_(config.sampling_ratio) {
  const int d = config.hidden_dim;
  attention_ = register_module("attention", SelfAttentionBlock(d, config.box_heads));
  dynamic_ = register_module("dynamic", DynamicChannelMlp(d, config.dynamic_dim, config.box_pool));
  ffn_ = register_module("ffn", FeedForwardBlock(d, config.ffn_dim));
  cls_ = register_module("cls", nn::Linear(d, 1));
  reg_ = register_module("reg", nn::Sequential(nn::Linear(nn::LinearOptions(d, d).bias(false)),
                                              nn::LayerNorm(nn::LayerNormOptions({d})), nn::ReLU(),
                                              nn::Linear(nn::LinearOptions(d, d).bias(false)),
                                              nn::LayerNorm(nn::LayerNormOptions({d})), nn::ReLU()));
  delta_ = register_module("delta", nn::Linear(d, 4));

  torch::NoGradGuard guard;
  nn::init::normal_(cls_->weight, 0.0, 0.01);
  nn::init::constant_(cls_->bias, -std::log((1.0 - kClassPrior) / kClassPrior));
  nn::init::zeros_(delta_->weight);
  nn::init::zeros_(delta_->bias);
}

void BoxStageImpl::zero_heads() {
  torch::NoGradGuard guard;
  cls_->weight.zero_();
  cls_->bias.zero_();
  delta_->weight.zero_();
  delta_->bias.zero_();
}

StageBoxOutput BoxStageImpl::forward(const FeaturePyramid& pyramid, const torch::Tensor& boxes,
                                     const torch::Tensor& queries, double image_w, double image_h) {
  if (boxes.dim() != 3 || queries.dim() != 3 || boxes.size(0) != queries.size(0) || boxes.size(1) != queries.size(1)) {
    throw ShapeError("box_stage: boxes (B, N, 4) and queries (B, N, d) must align");
  }
  const int64_t batch = queries.size(0);
  const int64_t n = queries.size(1);
  const int64_t d = queries.size(2);

  auto rois = multi_level_roi_align(pyramid, boxes.detach(), pool_, sampling_ratio_);
  auto attended = attention_->forward(queries);
  auto q = dynamic_->forward(attended.values.reshape({batch * n, d}), rois.reshape({batch * n, d, pool_, pool_}));
  q = ffn_->forward(q.view({batch, n, d}));

  StageBoxOutput out;
  out.logits = cls_->forward(q).squeeze(-1);
  out.boxes = apply_box_delta(delta_->forward(reg_->forward(q)), boxes, image_w, image_h);
  out.queries = q;
  out.attention = attended.weights;
  return out;
}

}  // namespace querypose
