#include "querypose/keypoint_decoder.hpp"

#include <string>

#include "querypose/errors.hpp"
#include "querypose/geometry.hpp"

namespace querypose {

namespace nn = torch::nn;

PartEmbeddings pool_part_embeddings(const torch::Tensor& logits, const torch::Tensor& features,
                                    nn::Linear& projection) {
  if (logits.dim() != 4 || features.dim() != 4 || logits.size(0) != features.size(0) ||
      logits.size(2) != features.size(2) || logits.size(3) != features.size(3)) {
    throw ShapeError("spegm: attention logits and features must share batch and spatial shape");
  }
  const auto r = logits.size(0);
  const auto m = logits.size(1);
  auto attention = torch::softmax(logits.flatten(2), -1);                       // (R, M, hw)
  auto pooled = torch::bmm(attention, features.flatten(2).transpose(1, 2));     // (R, M, C)
  return {projection->forward(pooled), attention.view({r, m, logits.size(2), logits.size(3)})};
}

SpegmImpl::SpegmImpl(int in_channels, int hidden_channels, int num_parts, int part_dim)
    : in_channels_(in_channels), num_parts_(num_parts) {
  if (num_parts <= 0) throw ConfigError("spegm: number of parts must be positive");
  trunk_ = register_module(
      "trunk", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in_channels, hidden_channels, 3).padding(1)), nn::ReLU(),
                              nn::Conv2d(nn::Conv2dOptions(hidden_channels, hidden_channels, 3).padding(1)), nn::ReLU(),
                              nn::ConvTranspose2d(nn::ConvTranspose2dOptions(hidden_channels, hidden_channels, 4)
                                                      .stride(2)
                                                      .padding(1)),
                              nn::ReLU()));
  attention_conv_ = register_module("attention", nn::Conv2d(nn::Conv2dOptions(hidden_channels, num_parts, 3).padding(1)));
  projection_ = register_module("projection", nn::Linear(hidden_channels, part_dim));

  torch::NoGradGuard guard;
  for (auto& p : trunk_->named_parameters()) {
    if (p.key().find("weight") != std::string::npos) {
      nn::init::kaiming_normal_(p.value(), 0.0, torch::kFanOut, torch::kReLU);
    } else {
      p.value().zero_();
    }
  }
  nn::init::normal_(attention_conv_->weight, 0.0, 0.01);
  nn::init::zeros_(attention_conv_->bias);
}

PartEmbeddings SpegmImpl::forward(const torch::Tensor& rois) {
  if (rois.dim() != 4 || rois.size(1) != in_channels_) {
    throw ShapeError("spegm: expected RoI grids of shape (R, " + std::to_string(in_channels_) + ", H, W)");
  }
  auto features = trunk_->forward(rois);
  return pool_part_embeddings(attention_conv_->forward(features), features, projection_);
}

SelectiveIterationImpl::SelectiveIterationImpl(int part_dim) : part_dim_(part_dim) {
  fc1_ = register_module("fc1", nn::Linear(part_dim, part_dim));
  fc2_ = register_module("fc2", nn::Linear(part_dim, 2 * part_dim));
  torch::NoGradGuard guard;
  nn::init::zeros_(fc2_->weight);
  nn::init::zeros_(fc2_->bias);
}

GatedUpdate SelectiveIterationImpl::forward(const torch::Tensor& previous, const torch::Tensor& embeddings) {
  if (previous.sizes() != embeddings.sizes() || previous.size(-1) != part_dim_) {
    throw ShapeError("sim: previous part queries and part embeddings must have the same shape");
  }
  auto gates = torch::sigmoid(fc2_->forward(torch::relu(fc1_->forward(embeddings + previous))));
  auto embedding_gate = gates.narrow(-1, 0, part_dim_);
  auto query_gate = gates.narrow(-1, part_dim_, part_dim_);
  return {embedding_gate * embeddings + query_gate * previous, embedding_gate, query_gate};
}

KeypointHeadsImpl::KeypointHeadsImpl(const PartDivision& division, int part_dim) : division_(division) {
  std::vector<int64_t> order;
  for (int m = 0; m < division.num_parts(); ++m) {
    const auto& part = division.parts[static_cast<std::size_t>(m)];
    auto head = nn::Linear(part_dim, 4 * static_cast<int64_t>(part.size()));
    {
      torch::NoGradGuard guard;
      nn::init::normal_(head->weight, 0.0, 0.01);
      nn::init::zeros_(head->bias);
    }
    heads_.push_back(register_module("head" + std::to_string(m), head));
    order.insert(order.end(), part.begin(), part.end());
  }
  std::vector<int64_t> inverse(order.size());
  for (std::size_t p = 0; p < order.size(); ++p) inverse[static_cast<std::size_t>(order[p])] = static_cast<int64_t>(p);
  inverse_order_ = torch::tensor(inverse, torch::kLong);
}

PoseEstimate KeypointHeadsImpl::forward(const torch::Tensor& queries) {
  if (queries.dim() != 3 || queries.size(1) != division_.num_parts()) {
    throw ConfigError("keypoint heads: expected " + std::to_string(division_.num_parts()) +
                      " part queries per instance, got shape " + std::to_string(queries.size(1)));
  }
  const auto r = queries.size(0);
  std::vector<torch::Tensor> outputs;
  outputs.reserve(heads_.size());
  for (std::size_t m = 0; m < heads_.size(); ++m) {
    outputs.push_back(heads_[m]->forward(queries.select(1, static_cast<int64_t>(m))).view({r, -1, 4}));
  }
  auto stacked = torch::cat(outputs, 1).index_select(1, inverse_order_);  // (R, K, 4)
  return {stacked.narrow(2, 0, 2), torch::sigmoid(stacked.narrow(2, 2, 2))};
}

KeypointStageImpl::KeypointStageImpl(const ModelConfig& config)
    : pool_(config.pose_pool), sampling_ratio_(config.sampling_ratio) {
  const auto division =
      config.custom_parts ? custom_part_division(*config.custom_parts, config.num_keypoints) : part_division(config.scheme);
  spegm_ = register_module("spegm", Spegm(config.hidden_dim, config.spegm_channels, division.num_parts(), config.part_dim));
  if (config.part_iteration == PartIteration::kSelective) {
    sim_ = register_module("sim", SelectiveIteration(config.part_dim));
  }
  attention_ = register_module("attention", SelfAttentionBlock(config.part_dim, config.part_heads));
  heads_ = register_module("heads", KeypointHeads(division, config.part_dim));
  if (config.iteration == IterationMode::kSerial) {
    writeback_ = register_module("writeback", nn::Linear(config.part_dim, config.hidden_dim));
    writeback_norm_ = register_module("writeback_norm", nn::LayerNorm(nn::LayerNormOptions({config.hidden_dim})));
  }
}

StageKeypointOutput KeypointStageImpl::forward(const torch::Tensor& p2, const torch::Tensor& boxes,
                                               const torch::Tensor& part_queries, const torch::Tensor& instance_queries) {
  if (boxes.dim() != 3 || part_queries.dim() != 4 || boxes.size(0) != part_queries.size(0) ||
      boxes.size(1) != part_queries.size(1)) {
    throw ShapeError("keypoint_stage: boxes (B, N, 4) and part queries (B, N, M, d_p) must align");
  }
  const auto batch = boxes.size(0);
  const auto n = boxes.size(1);
  const auto m = part_queries.size(2);
  const auto dp = part_queries.size(3);

  auto rois = roi_align(p2, boxes, RoiAlignOptions{pool_, pool_, sampling_ratio_, 1.0 / 4.0});
  rois = rois.reshape({batch * n, rois.size(2), pool_, pool_});
  auto emb = spegm_->forward(rois);
  if (emb.embeddings.size(1) != m) throw ConfigError("keypoint_stage: part query count does not match the scheme");

  StageKeypointOutput out;
  auto previous = part_queries.reshape({batch * n, m, dp});
  torch::Tensor q;
  if (!sim_.is_empty()) {
    auto gated = sim_->forward(previous, emb.embeddings);
    q = gated.queries;
    out.gates = gated;
  } else {
    q = emb.embeddings;
  }
  auto attended = attention_->forward(q);
  q = attended.values;
  auto pose = heads_->forward(q);

  const auto k = pose.mean.size(1);
  out.part_queries = q.view({batch, n, m, dp});
  out.pose = {pose.mean.view({batch, n, k, 2}), pose.scale.view({batch, n, k, 2})};
  out.attention = emb.attention.view({batch, n, m, emb.attention.size(2), emb.attention.size(3)});
  out.part_attention = attended.weights;
  if (!writeback_.is_empty() && instance_queries.defined()) {
    auto pooled = out.part_queries.mean(2);
    out.instance_queries = writeback_norm_->forward(instance_queries + writeback_->forward(pooled));
  }
  return out;
}

}  // namespace querypose
