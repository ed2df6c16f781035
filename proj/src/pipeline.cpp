#include "querypose/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "querypose/config_io.hpp"
#include "querypose/errors.hpp"

namespace querypose {

namespace {

PartDivision division_for(const ModelConfig& c) {
  if (c.custom_parts) return custom_part_division(*c.custom_parts, c.num_keypoints);
  return part_division(c.scheme);
}

}  // namespace

QueryPoseModelImpl::QueryPoseModelImpl(const ModelConfig& config) : config_(config) {
  config_.validate();
  division_ = division_for(config_);
  const int n = config_.num_queries;
  const int m = division_.num_parts();

  backbone_ = register_module("backbone", Backbone(BackboneOptions{config_.trunk_channels, config_.hidden_dim}));
  proposals_ = register_parameter("proposals", torch::tensor({0.0, 0.0, 1.0, 1.0}).repeat({n, 1}).to(torch::kFloat32));
  query_embed_ = register_parameter("query_embed", torch::randn({n, config_.hidden_dim}));
  part_embed_ = register_parameter("part_embed", torch::randn({m, config_.part_dim}));
  for (int s = 0; s < config_.num_stages; ++s) {
    box_stages_.push_back(register_module("box_stage" + std::to_string(s), BoxStage(config_)));
    keypoint_stages_.push_back(register_module("keypoint_stage" + std::to_string(s), KeypointStage(config_)));
  }
  flow_ = register_module("flow", RealNvpFlow(config_.flow_layers, config_.flow_hidden, FlowBase::kGaussian));
}

torch::Tensor QueryPoseModelImpl::initial_boxes(int64_t batch, double image_w, double image_h) const {
  auto size = torch::tensor({image_w, image_h, image_w, image_h}, proposals_.options());
  auto boxes = clip_boxes(proposals_.clamp(0.0, 1.0) * size, image_w, image_h);
  return boxes.unsqueeze(0).expand({batch, -1, -1});
}

ForwardOutput QueryPoseModelImpl::forward(const torch::Tensor& images) {
  check_backbone_input(images);
  const int64_t batch = images.size(0);
  ForwardOutput out;
  out.image_h = static_cast<double>(images.size(2));
  out.image_w = static_cast<double>(images.size(3));

  auto pyramid = backbone_->forward(images);
  auto boxes = initial_boxes(batch, out.image_w, out.image_h);
  auto instance = query_embed_.unsqueeze(0).expand({batch, -1, -1});
  auto parts = part_embed_.unsqueeze(0).unsqueeze(0).expand({batch, config_.num_queries, -1, -1});
  const bool serial = config_.iteration == IterationMode::kSerial;

  for (int s = 0; s < config_.num_stages; ++s) {
    StageOutput stage;
    stage.box = box_stages_[static_cast<std::size_t>(s)]->forward(pyramid, boxes, instance, out.image_w, out.image_h);
    auto pose_boxes = config_.detach_pose_boxes ? stage.box.boxes.detach() : stage.box.boxes;
    stage.keypoint = keypoint_stages_[static_cast<std::size_t>(s)]->forward(
        pyramid.p2(), pose_boxes, parts, serial ? stage.box.queries : torch::Tensor());
    instance = serial ? stage.keypoint.instance_queries : stage.box.queries;
    parts = stage.keypoint.part_queries;
    // Each stage refines from the previous boxes without backpropagating into them.
    boxes = stage.box.boxes.detach();
    out.stages.push_back(std::move(stage));
  }
  return out;
}

std::vector<torch::Tensor> QueryPoseModelImpl::regression_parameters() {
  std::vector<torch::Tensor> params;
  for (const auto& item : named_parameters()) {
    if (item.key().rfind("flow.", 0) != 0) params.push_back(item.value());
  }
  return params;
}

std::vector<torch::Tensor> QueryPoseModelImpl::flow_parameters() { return flow_->parameters(); }

double pose_score(const torch::Tensor& scale, double instance_score) {
  if (scale.dim() != 2 || scale.size(1) != 2) throw ShapeError("pose_score: scale must be (K, 2)");
  auto sigma = scale.to(torch::kFloat64).mean(1);
  return (1.0 - sigma).mean().item<double>() * instance_score;
}

std::vector<ScoredPose> poses_from_stage(const StageOutput& stage, int64_t image_index, const InferOptions& options,
                                         double coordinate_scale) {
  torch::NoGradGuard guard;
  auto logits = stage.box.logits[image_index].to(torch::kFloat64);
  auto boxes = stage.box.boxes[image_index].to(torch::kFloat64);
  auto mean = stage.keypoint.pose.mean[image_index].to(torch::kFloat64);
  auto scale = stage.keypoint.pose.scale[image_index].to(torch::kFloat64);
  auto coords = denormalize_keypoints(mean, boxes) / coordinate_scale;
  auto instance = torch::sigmoid(logits);
  const auto n = logits.size(0);
  const auto k = mean.size(1);

  std::vector<ScoredPose> poses;
  for (int64_t i = 0; i < n; ++i) {
    const double c = instance[i].item<double>();
    const double score = pose_score(scale[i], c);
    if (score < options.score_threshold) continue;
    ScoredPose p;
    p.instance_score = c;
    p.score = score;
    p.query_index = static_cast<int>(i);
    auto b = boxes[i] / coordinate_scale;
    p.box = Box{b[0].item<double>(), b[1].item<double>(), b[2].item<double>(), b[3].item<double>()};
    auto kp = coords[i].contiguous();
    auto sig = scale[i].mean(1).contiguous();
    p.keypoints.coords.reserve(static_cast<std::size_t>(k));
    for (int64_t j = 0; j < k; ++j) {
      p.keypoints.coords.push_back({kp[j][0].item<double>(), kp[j][1].item<double>()});
      p.keypoints.visibility.push_back(Visibility::kVisible);
      p.keypoint_scores.push_back(1.0 - sig[j].item<double>());
    }
    poses.push_back(std::move(p));
  }
  std::stable_sort(poses.begin(), poses.end(), [](const ScoredPose& a, const ScoredPose& b) { return a.score > b.score; });
  if (poses.size() > static_cast<std::size_t>(options.top_k)) poses.resize(static_cast<std::size_t>(options.top_k));
  return poses;
}

std::vector<std::vector<ScoredPose>> infer(QueryPoseModel& model, const torch::Tensor& images,
                                           const InferOptions& options) {
  torch::NoGradGuard guard;
  const bool was_training = model->is_training();
  model->eval();
  auto batch = images.dim() == 3 ? images.unsqueeze(0) : images;
  auto forward = model->forward(batch);
  if (was_training) model->train();
  std::vector<std::vector<ScoredPose>> result;
  for (int64_t b = 0; b < batch.size(0); ++b) result.push_back(poses_from_stage(forward.stages.back(), b, options));
  return result;
}

std::pair<torch::Tensor, LossBreakdown> compute_loss(QueryPoseModel& model, const ForwardOutput& forward,
                                                     const std::vector<ImageTargets>& targets) {
  const auto& cfg = model->config();
  const auto& w = cfg.loss;
  LossBreakdown breakdown;
  breakdown.no_keypoint_supervision = true;
  torch::Tensor total;
  for (std::size_t s = 0; s < forward.stages.size(); ++s) {
    auto predictions = forward.stages[s].predictions();
    auto assignments = match_stage(predictions, targets, forward.image_w, forward.image_h, w);
    auto loss = stage_loss(predictions, targets, assignments, model->flow(), w, cfg.flow_mode, forward.image_w,
                           forward.image_h);
    const std::string prefix = "s" + std::to_string(s) + ".";
    const std::pair<const char*, torch::Tensor> terms[] = {
        {"cls", loss.cls * w.cls}, {"l1", loss.l1 * w.l1}, {"giou", loss.giou * w.giou}, {"keypoint", loss.keypoint}};
    for (const auto& [name, value] : terms) {
      const double v = value.item<double>();
      if (!std::isfinite(v)) throw NumericError("non-finite loss term " + prefix + name);
      breakdown.terms[prefix + name] = v;
    }
    breakdown.no_keypoint_supervision = breakdown.no_keypoint_supervision && loss.no_keypoint_supervision;
    total = total.defined() ? total + loss.total : loss.total;
  }
  breakdown.total = total.item<double>();
  if (!std::isfinite(breakdown.total)) throw NumericError("non-finite total loss");
  return {total, breakdown};
}

namespace {

// AdamW whose update runs through ATen's single-pass fused kernel. State lives
// in the stock AdamWParamState, so serialization is unchanged.
class FusedAdamW : public torch::optim::AdamW {
 public:
  using torch::optim::AdamW::AdamW;

  torch::Tensor step(LossClosure closure) override {
    torch::NoGradGuard guard;
    torch::Tensor loss;
    if (closure) {
      torch::AutoGradMode enable(true);
      loss = closure();
    }
    for (auto& group : param_groups()) {
      auto& options = static_cast<torch::optim::AdamWOptions&>(group.options());
      if (options.amsgrad()) throw ConfigError("optimizer: amsgrad is not supported");
      std::vector<torch::Tensor> params, grads, exp_avgs, exp_avg_sqs, steps;
      for (auto& p : group.params()) {
        if (!p.grad().defined()) continue;
        auto key = p.unsafeGetTensorImpl();
        auto it = state_.find(key);
        if (it == state_.end()) {
          auto fresh = std::make_unique<torch::optim::AdamWParamState>();
          fresh->step(0);
          fresh->exp_avg(torch::zeros_like(p, torch::MemoryFormat::Preserve));
          fresh->exp_avg_sq(torch::zeros_like(p, torch::MemoryFormat::Preserve));
          it = state_.emplace(key, std::move(fresh)).first;
        }
        auto& st = static_cast<torch::optim::AdamWParamState&>(*it->second);
        st.step(st.step() + 1);
        params.push_back(p);
        grads.push_back(p.grad());
        exp_avgs.push_back(st.exp_avg());
        exp_avg_sqs.push_back(st.exp_avg_sq());
        steps.push_back(torch::tensor(static_cast<double>(st.step()), torch::kFloat32));
      }
      if (params.empty()) continue;
      const auto [beta1, beta2] = options.betas();
      at::_fused_adamw_(params, grads, exp_avgs, exp_avg_sqs, {}, steps, options.lr(), beta1, beta2,
                        options.weight_decay(), options.eps(), false, false);
    }
    return loss;
  }
};

}  // namespace

Trainer::Trainer(QueryPoseModel model) : model_(std::move(model)) {
  const auto& opt = model_->config().optimizer;
  std::vector<torch::optim::OptimizerParamGroup> groups;
  groups.emplace_back(model_->regression_parameters(),
                      std::make_unique<torch::optim::AdamWOptions>(torch::optim::AdamWOptions(opt.lr).weight_decay(
                          opt.weight_decay)));
  groups.emplace_back(model_->flow_parameters(),
                      std::make_unique<torch::optim::AdamWOptions>(
                          torch::optim::AdamWOptions(opt.lr * opt.flow_lr_multiplier).weight_decay(opt.weight_decay)));
  optimizer_ = std::make_unique<FusedAdamW>(std::move(groups),
                                                     torch::optim::AdamWOptions(opt.lr).weight_decay(opt.weight_decay));
  // LibTorch replaces per-group options with the defaults on construction.
  apply_schedule();
}

double Trainer::learning_rate_at(int64_t step) const {
  const auto& opt = model_->config().optimizer;
  double lr = opt.lr;
  if (opt.warmup_steps > 0 && step < opt.warmup_steps) {
    lr *= static_cast<double>(step + 1) / static_cast<double>(opt.warmup_steps);
  }
  for (int drop : opt.lr_drop_steps) {
    if (step >= drop) lr *= opt.lr_drop_factor;
  }
  return lr;
}

void Trainer::apply_schedule() {
  const double lr = learning_rate_at(step_);
  const double multiplier = model_->config().optimizer.flow_lr_multiplier;
  auto& groups = optimizer_->param_groups();
  static_cast<torch::optim::AdamWOptions&>(groups[0].options()).lr(lr);
  static_cast<torch::optim::AdamWOptions&>(groups[1].options()).lr(lr * multiplier);
}

LossBreakdown Trainer::step(const TrainBatch& batch) {
  if (batch.images.size(0) != static_cast<int64_t>(batch.targets.size())) {
    throw ShapeError("train step: one target set per image required");
  }
  model_->train();
  apply_schedule();
  auto forward = model_->forward(batch.images);
  auto [loss, breakdown] = compute_loss(model_, forward, batch.targets);

  optimizer_->zero_grad();
  loss.backward();
  const double clip = model_->config().optimizer.clip_norm;
  // The total norm is non-finite iff some gradient entry is (or the sum overflows).
  std::vector<torch::Tensor> grads;
  for (const auto& p : model_->parameters()) {
    if (p.grad().defined()) grads.push_back(p.grad());
  }
  const double total = grads.empty() ? 0.0 : torch::stack(at::_foreach_norm(grads, 2)).norm().item<double>();
  if (!std::isfinite(total)) {
    optimizer_->zero_grad();
    throw NumericError("non-finite gradient; step skipped");
  }
  if (clip > 0 && total > clip) at::_foreach_mul_(grads, clip / (total + 1e-6));
  optimizer_->step();
  breakdown.learning_rate = learning_rate_at(step_);
  ++step_;
  breakdown.step = step_;
  return breakdown;
}

namespace {

// Archive keys cannot contain '.', which separates module names.
std::string archive_key(const std::string& name) {
  std::string key = name;
  std::replace(key.begin(), key.end(), '.', '/');
  return "param:" + key;
}

torch::serialize::InputArchive open_archive(const std::string& path) {
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path);
  } catch (const c10::Error& e) {
    throw CheckpointError("cannot read checkpoint " + path + ": corrupt or not a checkpoint archive");
  }
  return archive;
}

CheckpointContents read_header(torch::serialize::InputArchive& archive, const std::string& path) {
  CheckpointContents contents;
  try {
    torch::Tensor version;
    if (!archive.try_read("format_version", version)) throw CheckpointError(path + ": missing format_version");
    if (version.item<int64_t>() != kCheckpointFormatVersion) {
      throw CheckpointError(path + ": format version " + std::to_string(version.item<int64_t>()) +
                            " is not supported (expected " + std::to_string(kCheckpointFormatVersion) + ")");
    }
    c10::IValue config;
    if (!archive.try_read("config", config) || !config.isString()) throw CheckpointError(path + ": missing config");
    contents.config = model_config_from_json(nlohmann::json::parse(config.toStringRef()));
    torch::Tensor step;
    if (archive.try_read("step", step)) contents.step = step.item<int64_t>();
    c10::IValue extra;
    if (archive.try_read("extra", extra) && extra.isString()) contents.extra = extra.toStringRef();
  } catch (const c10::Error& e) {
    throw CheckpointError(path + ": malformed checkpoint header");
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path + ": malformed config in checkpoint");
  } catch (const ConfigError& e) {
    throw CheckpointError(path + ": invalid config in checkpoint: " + e.what());
  }
  return contents;
}

}  // namespace

void save_checkpoint(const std::string& path, QueryPoseModel& model, const Trainer* trainer, const std::string& extra) {
  torch::serialize::OutputArchive archive;
  archive.write("format_version", torch::tensor(kCheckpointFormatVersion, torch::kInt64));
  archive.write("config", c10::IValue(to_json(model->config()).dump()));
  archive.write("step", torch::tensor(trainer != nullptr ? trainer->step_count() : int64_t{0}, torch::kInt64));
  archive.write("extra", c10::IValue(extra));
  for (const auto& item : model->named_parameters()) archive.write(archive_key(item.key()), item.value().detach());
  for (const auto& item : model->named_buffers()) archive.write(archive_key(item.key()), item.value(), true);
  if (trainer != nullptr) {
    torch::serialize::OutputArchive optimizer;
    const_cast<Trainer*>(trainer)->optimizer().save(optimizer);
    archive.write("optimizer", optimizer);
  }
  try {
    archive.save_to(path);
  } catch (const c10::Error& e) {
    throw CheckpointError("cannot write checkpoint " + path);
  }
}

CheckpointContents read_checkpoint_header(const std::string& path) {
  auto archive = open_archive(path);
  return read_header(archive, path);
}

CheckpointContents load_checkpoint(const std::string& path, QueryPoseModel& model, Trainer* trainer) {
  auto archive = open_archive(path);
  auto contents = read_header(archive, path);
  if (auto conflict = config_conflict(contents.config, model->config())) {
    throw ConfigConflictError("checkpoint " + path + " conflicts with the model config: " + *conflict);
  }
  torch::NoGradGuard guard;
  auto restore = [&](const std::string& name, torch::Tensor& target, bool is_buffer) {
    torch::Tensor stored;
    try {
      if (!archive.try_read(archive_key(name), stored, is_buffer)) {
        throw CheckpointError(path + ": missing tensor " + name);
      }
    } catch (const c10::Error& e) {
      throw CheckpointError(path + ": unreadable tensor " + name);
    }
    if (stored.sizes() != target.sizes()) throw CheckpointError(path + ": shape mismatch for " + name);
    target.copy_(stored);
  };
  for (auto& item : model->named_parameters()) restore(item.key(), item.value(), false);
  for (auto& item : model->named_buffers()) restore(item.key(), item.value(), true);
  if (trainer != nullptr) {
    torch::serialize::InputArchive optimizer;
    if (archive.try_read("optimizer", optimizer)) {
      try {
        trainer->optimizer().load(optimizer);
      } catch (const c10::Error& e) {
        throw CheckpointError(path + ": optimizer state does not match the model");
      }
    }
    trainer->set_step_count(contents.step);
  }
  return contents;
}

QueryPoseModel load_model(const std::string& path) {
  auto header = read_checkpoint_header(path);
  QueryPoseModel model(header.config);
  load_checkpoint(path, model);
  model->eval();
  return model;
}

}  // namespace querypose
