#include "querypose/config_io.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "querypose/errors.hpp"

namespace querypose {

using nlohmann::json;

namespace {

// Walks one JSON object, remembering which keys were consumed so the rest can
// be reported as unknown.
class StrictObject {
 public:
  StrictObject(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception&) {
      throw ConfigError(path_ + "." + key + ": wrong type");
    }
  }

  const json* child(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  [[nodiscard]] std::string path(const std::string& key) const { return path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(path_ + "." + it.key() + ": unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename E>
E parse_enum(const std::string& text, const std::string& path, std::initializer_list<std::pair<const char*, E>> map) {
  for (const auto& [name, value] : map) {
    if (text == name) return value;
  }
  throw ConfigError(path + ": unknown value '" + text + "'");
}

void read_enum_field(StrictObject& o, const std::string& key, IterationMode& out) {
  std::string s = to_string(out);
  o.read(key, s);
  out = parse_enum<IterationMode>(s, o.path(key),
                                  {{"serial", IterationMode::kSerial}, {"box_only", IterationMode::kBoxOnly}});
}

void read_enum_field(StrictObject& o, const std::string& key, PartIteration& out) {
  std::string s = to_string(out);
  o.read(key, s);
  out = parse_enum<PartIteration>(s, o.path(key),
                                  {{"selective", PartIteration::kSelective}, {"none", PartIteration::kNone}});
}

void read_enum_field(StrictObject& o, const std::string& key, FlowMode& out) {
  std::string s = to_string(out);
  o.read(key, s);
  out = parse_enum<FlowMode>(s, o.path(key), {{"basic", FlowMode::kBasic}, {"residual", FlowMode::kResidual}});
}

LossWeights loss_from_json(const json& j, const std::string& path) {
  LossWeights w;
  StrictObject o(j, path);
  o.read("cls", w.cls);
  o.read("l1", w.l1);
  o.read("giou", w.giou);
  o.read("focal_alpha", w.focal_alpha);
  o.read("focal_gamma", w.focal_gamma);
  o.read("keypoint_cost", w.keypoint_cost);
  o.read("keypoint_cost_weight", w.keypoint_cost_weight);
  o.finish();
  return w;
}

OptimizerConfig optimizer_from_json(const json& j, const std::string& path) {
  OptimizerConfig c;
  StrictObject o(j, path);
  o.read("lr", c.lr);
  o.read("weight_decay", c.weight_decay);
  o.read("clip_norm", c.clip_norm);
  o.read("flow_lr_multiplier", c.flow_lr_multiplier);
  o.read("warmup_steps", c.warmup_steps);
  o.read("lr_drop_steps", c.lr_drop_steps);
  o.read("lr_drop_factor", c.lr_drop_factor);
  o.finish();
  return c;
}

SyntheticConfig synthetic_from_json(const json& j, const std::string& path) {
  SyntheticConfig c;
  StrictObject o(j, path);
  o.read("image_width", c.image_width);
  o.read("image_height", c.image_height);
  o.read("min_persons", c.min_persons);
  o.read("max_persons", c.max_persons);
  o.read("min_scale", c.min_scale);
  o.read("max_scale", c.max_scale);
  o.read("occlusion_prob", c.occlusion_prob);
  o.read("clutter_density", c.clutter_density);
  o.read("seed", c.seed);
  o.finish();
  return c;
}

std::string read_text(const std::string& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open config file " + file);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

json to_json(const ModelConfig& c) {
  json j;
  j["num_stages"] = c.num_stages;
  j["num_queries"] = c.num_queries;
  j["hidden_dim"] = c.hidden_dim;
  j["part_dim"] = c.part_dim;
  j["scheme"] = std::string(1, c.scheme);
  j["custom_parts"] = c.custom_parts ? json(*c.custom_parts) : json(nullptr);
  j["num_keypoints"] = c.num_keypoints;
  j["box_heads"] = c.box_heads;
  j["part_heads"] = c.part_heads;
  j["dynamic_dim"] = c.dynamic_dim;
  j["ffn_dim"] = c.ffn_dim;
  j["box_pool"] = c.box_pool;
  j["pose_pool"] = c.pose_pool;
  j["spegm_channels"] = c.spegm_channels;
  j["sampling_ratio"] = c.sampling_ratio;
  j["trunk_channels"] = c.trunk_channels;
  j["iteration"] = to_string(c.iteration);
  j["part_iteration"] = to_string(c.part_iteration);
  j["flow_mode"] = to_string(c.flow_mode);
  j["flow_layers"] = c.flow_layers;
  j["flow_hidden"] = c.flow_hidden;
  j["detach_pose_boxes"] = c.detach_pose_boxes;
  j["pixel_mean"] = c.pixel_mean;
  j["pixel_std"] = c.pixel_std;
  j["loss"] = {{"cls", c.loss.cls},
               {"l1", c.loss.l1},
               {"giou", c.loss.giou},
               {"focal_alpha", c.loss.focal_alpha},
               {"focal_gamma", c.loss.focal_gamma},
               {"keypoint_cost", c.loss.keypoint_cost},
               {"keypoint_cost_weight", c.loss.keypoint_cost_weight}};
  j["optimizer"] = {{"lr", c.optimizer.lr},
                    {"weight_decay", c.optimizer.weight_decay},
                    {"clip_norm", c.optimizer.clip_norm},
                    {"flow_lr_multiplier", c.optimizer.flow_lr_multiplier},
                    {"warmup_steps", c.optimizer.warmup_steps},
                    {"lr_drop_steps", c.optimizer.lr_drop_steps},
                    {"lr_drop_factor", c.optimizer.lr_drop_factor}};
  return j;
}

json to_json(const SyntheticConfig& c) {
  return {{"image_width", c.image_width},         {"image_height", c.image_height},
          {"min_persons", c.min_persons},         {"max_persons", c.max_persons},
          {"min_scale", c.min_scale},             {"max_scale", c.max_scale},
          {"occlusion_prob", c.occlusion_prob},   {"clutter_density", c.clutter_density},
          {"seed", c.seed}};
}

json to_json(const RunConfig& c) {
  json j;
  j["model"] = to_json(c.model);
  j["data"] = {{"source", c.data.source},
               {"synthetic", to_json(c.data.synthetic)},
               {"num_images", c.data.num_images},
               {"coco_annotations", c.data.coco_annotations},
               {"coco_images", c.data.coco_images},
               {"image_size", c.data.image_size},
               {"synthetic_kappa", c.data.synthetic_kappa}};
  j["train"] = {{"steps", c.train.steps},
                {"batch_size", c.train.batch_size},
                {"checkpoint_interval", c.train.checkpoint_interval},
                {"log_interval", c.train.log_interval},
                {"threads", c.train.threads}};
  j["infer"] = {{"score_threshold", c.infer.score_threshold}, {"top_k", c.infer.top_k}};
  j["output_dir"] = c.output_dir;
  j["tag"] = c.tag;
  j["seed"] = c.seed;
  return j;
}

ModelConfig model_config_from_json(const json& j, const std::string& path, const ModelConfig& base) {
  ModelConfig c = base;
  StrictObject o(j, path);
  o.read("num_stages", c.num_stages);
  o.read("num_queries", c.num_queries);
  o.read("hidden_dim", c.hidden_dim);
  o.read("part_dim", c.part_dim);
  std::string scheme(1, c.scheme);
  o.read("scheme", scheme);
  if (scheme.size() != 1 || scheme[0] < 'a' || scheme[0] > 'd') {
    throw ConfigError(o.path("scheme") + ": expected one of a, b, c, d");
  }
  c.scheme = scheme[0];
  if (const json* parts = o.child("custom_parts"); parts != nullptr && !parts->is_null()) {
    try {
      c.custom_parts = parts->get<std::vector<std::vector<int>>>();
    } catch (const json::exception&) {
      throw ConfigError(o.path("custom_parts") + ": expected a list of keypoint index lists");
    }
  }
  o.read("num_keypoints", c.num_keypoints);
  o.read("box_heads", c.box_heads);
  o.read("part_heads", c.part_heads);
  o.read("dynamic_dim", c.dynamic_dim);
  o.read("ffn_dim", c.ffn_dim);
  o.read("box_pool", c.box_pool);
  o.read("pose_pool", c.pose_pool);
  o.read("spegm_channels", c.spegm_channels);
  o.read("sampling_ratio", c.sampling_ratio);
  o.read("trunk_channels", c.trunk_channels);
  read_enum_field(o, "iteration", c.iteration);
  read_enum_field(o, "part_iteration", c.part_iteration);
  read_enum_field(o, "flow_mode", c.flow_mode);
  o.read("flow_layers", c.flow_layers);
  o.read("flow_hidden", c.flow_hidden);
  o.read("detach_pose_boxes", c.detach_pose_boxes);
  o.read("pixel_mean", c.pixel_mean);
  o.read("pixel_std", c.pixel_std);
  if (const json* loss = o.child("loss")) c.loss = loss_from_json(*loss, o.path("loss"));
  if (const json* opt = o.child("optimizer")) c.optimizer = optimizer_from_json(*opt, o.path("optimizer"));
  o.finish();
  return c;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  StrictObject o(j, "config");
  if (const json* model = o.child("model")) c.model = model_config_from_json(*model, "model", c.model);
  if (const json* data = o.child("data")) {
    StrictObject d(*data, "data");
    d.read("source", c.data.source);
    if (const json* syn = d.child("synthetic")) c.data.synthetic = synthetic_from_json(*syn, "data.synthetic");
    d.read("num_images", c.data.num_images);
    d.read("coco_annotations", c.data.coco_annotations);
    d.read("coco_images", c.data.coco_images);
    d.read("image_size", c.data.image_size);
    d.read("synthetic_kappa", c.data.synthetic_kappa);
    d.finish();
  }
  if (const json* train = o.child("train")) {
    StrictObject t(*train, "train");
    t.read("steps", c.train.steps);
    t.read("batch_size", c.train.batch_size);
    t.read("checkpoint_interval", c.train.checkpoint_interval);
    t.read("log_interval", c.train.log_interval);
    t.read("threads", c.train.threads);
    t.finish();
  }
  if (const json* infer = o.child("infer")) {
    StrictObject i(*infer, "infer");
    i.read("score_threshold", c.infer.score_threshold);
    i.read("top_k", c.infer.top_k);
    i.finish();
  }
  o.read("output_dir", c.output_dir);
  o.read("tag", c.tag);
  o.read("seed", c.seed);
  o.finish();
  return c;
}

void RunConfig::validate() const {
  model.validate();
  if (data.source != "synthetic" && data.source != "coco") {
    throw ConfigError("data.source: expected 'synthetic' or 'coco'");
  }
  if (data.source == "synthetic") {
    try {
      data.synthetic.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("data.") + e.what());
    }
    if (data.num_images < 1) throw ConfigError("data.num_images: must be at least 1");
  } else if (data.coco_annotations.empty()) {
    throw ConfigError("data.coco_annotations: required for the coco source");
  }
  if (data.image_size < 32 || data.image_size % 32 != 0) {
    throw ConfigError("data.image_size: must be a positive multiple of 32");
  }
  if (data.synthetic_kappa < 0) throw ConfigError("data.synthetic_kappa: must be non-negative");
  if (train.steps < 0) throw ConfigError("train.steps: must be non-negative");
  if (train.batch_size < 1) throw ConfigError("train.batch_size: must be at least 1");
  if (train.checkpoint_interval < 0) throw ConfigError("train.checkpoint_interval: must be non-negative");
  if (train.log_interval < 1) throw ConfigError("train.log_interval: must be at least 1");
  if (train.threads < 1) throw ConfigError("train.threads: must be at least 1");
  if (infer.score_threshold < 0 || infer.score_threshold > 1) {
    throw ConfigError("infer.score_threshold: must lie in [0, 1]");
  }
  if (infer.top_k < 1) throw ConfigError("infer.top_k: must be at least 1");
}

RunConfig load_run_config(const std::string& file) {
  json j;
  try {
    j = json::parse(read_text(file));
  } catch (const json::parse_error& e) {
    throw ConfigError("malformed config " + file + ": " + e.what());
  }
  return run_config_from_json(j);
}

void save_run_config(const RunConfig& config, const std::string& file) {
  std::ofstream out(file);
  if (!out) throw ConfigError("cannot write config file " + file);
  out << to_json(config).dump(2) << "\n";
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "': expected key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);

  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }

  json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override '" + assignment + "': empty path segment");
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

std::optional<std::string> config_conflict(const ModelConfig& stored, const ModelConfig& current) {
  const json a = to_json(stored);
  const json b = to_json(current);
  // Loss weights and optimizer settings may change between runs; nothing else.
  for (auto it = a.begin(); it != a.end(); ++it) {
    if (it.key() == "loss" || it.key() == "optimizer") continue;
    if (!b.contains(it.key()) || b.at(it.key()) != it.value()) {
      return "model." + it.key() + ": checkpoint has " + it.value().dump() + ", config has " +
             (b.contains(it.key()) ? b.at(it.key()).dump() : std::string("nothing"));
    }
  }
  return std::nullopt;
}

}  // namespace querypose
