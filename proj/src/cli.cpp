#include "querypose/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include "querypose/coco.hpp"
#include "querypose/config_io.hpp"
#include "querypose/dataset.hpp"
#include "querypose/errors.hpp"
#include "querypose/evaluation.hpp"
#include "querypose/image_io.hpp"
#include "querypose/part_division.hpp"
#include "querypose/pipeline.hpp"
#include "querypose/training.hpp"

namespace querypose {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Raised for problems the user must fix in the invocation itself.
struct UsageError : Error {
  using Error::Error;
};

struct CommonArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string checkpoint;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool overwrite = false;
  bool render = false;
  std::optional<double> threshold;
};

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y%m%d-%H%M%S");
  return ss.str();
}

// Resolves the run configuration: the --config file, else the run config
// stored with the checkpoint, else defaults (with the checkpoint's model);
// then --set overrides and --seed.
RunConfig resolve_config(const CommonArgs& args, const std::optional<CheckpointContents>& header) {
  json base;
  if (!args.config.empty()) {
    std::ifstream in(args.config);
    if (!in) throw UsageError("cannot open config file " + args.config);
    try {
      base = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("malformed config " + args.config + ": " + e.what());
    }
  } else if (header && !header->extra.empty()) {
    base = json::parse(header->extra);
  } else {
    RunConfig defaults;
    if (header) defaults.model = header->config;
    base = to_json(defaults);
  }
  for (const auto& o : args.overrides) apply_override(base, o);
  auto config = run_config_from_json(base);
  if (args.seed) config.seed = *args.seed;
  config.validate();
  return config;
}

fs::path run_directory(const CommonArgs& args, const RunConfig& config) {
  if (!args.out.empty()) return args.out;
  if (!config.output_dir.empty()) return config.output_dir;
  return fs::path("runs") / (timestamp() + "-" + config.tag);
}

void refuse_clobber(const std::vector<fs::path>& outputs, bool overwrite) {
  if (overwrite) return;
  for (const auto& p : outputs) {
    if (fs::exists(p)) throw UsageError("refusing to overwrite " + p.string() + " (pass --overwrite)");
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

std::optional<CheckpointContents> checkpoint_header(const std::string& path) {
  if (path.empty()) return std::nullopt;
  if (!fs::exists(path)) throw CheckpointError("checkpoint not found: " + path);
  return read_checkpoint_header(path);
}

// Builds a model from the resolved config and loads the checkpoint into it;
// structural disagreement surfaces as ConfigConflictError.
QueryPoseModel model_from_checkpoint(const std::string& path, const RunConfig& config) {
  QueryPoseModel model(config.model);
  load_checkpoint(path, model);
  model->eval();
  return model;
}

std::string format_metric(const std::optional<double>& v) {
  if (!v) return "n/a";
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(4) << *v;
  return ss.str();
}

// ---------------------------------------------------------------------------

int cmd_train(const CommonArgs& args, bool resume, std::ostream& out) {
  std::optional<CheckpointContents> header;
  if (resume) {
    if (args.out.empty()) throw UsageError("--resume needs --out pointing at the run directory");
    const auto latest = fs::path(args.out) / "checkpoint.pt";
    if (!fs::exists(latest)) throw CheckpointError("nothing to resume: " + latest.string() + " not found");
    header = read_checkpoint_header(latest.string());
  }
  const auto config = resolve_config(args, header);
  const auto dir = run_directory(args, config);
  const auto config_file = dir / "config.json";
  const auto log_file = dir / "train_log.jsonl";
  const auto latest = dir / "checkpoint.pt";
  if (!resume) refuse_clobber({config_file, log_file, latest}, args.overwrite);
  fs::create_directories(dir / "checkpoints");
  if (!resume && args.overwrite) {
    for (const auto& entry : fs::directory_iterator(dir / "checkpoints")) fs::remove(entry.path());
  }
  save_run_config(config, config_file.string());

  torch::set_num_threads(config.train.threads);
  torch::manual_seed(config.seed);
  auto data = make_dataset(config);
  QueryPoseModel model(config.model);
  Trainer trainer(model);
  const std::string extra = to_json(config).dump();
  if (resume) {
    load_checkpoint(latest.string(), model, &trainer);
    out << "resuming at step " << trainer.step_count() << "\n";
  }

  std::ofstream log(log_file, resume ? std::ios::app : std::ios::trunc);
  if (!log) throw DataError("cannot write " + log_file.string());
  const auto start = std::chrono::steady_clock::now();

  auto save = [&](Trainer& t) {
    std::ostringstream name;
    name << "step_" << std::setw(7) << std::setfill('0') << t.step_count() << ".pt";
    save_checkpoint((dir / "checkpoints" / name.str()).string(), model, &t, extra);
    save_checkpoint(latest.string(), model, &t, extra);
  };

  FitOptions fit_options;
  fit_options.steps = config.train.steps;
  fit_options.batch_size = config.train.batch_size;
  fit_options.seed = config.seed;
  fit_options.checkpoint_interval = config.train.checkpoint_interval;
  fit_options.on_checkpoint = save;
  fit_options.on_step = [&](const LossBreakdown& b) {
    if (b.step % config.train.log_interval != 0 && b.step != 1 && b.step != config.train.steps) return;
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    json line = {{"step", b.step}, {"loss", b.total}, {"lr", b.learning_rate}, {"terms", b.terms},
                 {"elapsed_s", elapsed}, {"no_keypoint_supervision", b.no_keypoint_supervision}};
    log << line.dump() << "\n" << std::flush;
    out << "step " << b.step << " loss " << b.total << "\n";
  };
  fit(trainer, *data, fit_options);
  save(trainer);
  out << "run directory: " << dir.string() << "\n";
  return kExitOk;
}

int cmd_eval(const CommonArgs& args, bool replay, std::ostream& out) {
  if (args.checkpoint.empty() && !replay) throw UsageError("eval needs --checkpoint (or --replay-gt)");
  const auto header = checkpoint_header(args.checkpoint);
  const auto config = resolve_config(args, header);
  const fs::path dir = args.out.empty() ? fs::path(".") : fs::path(args.out);
  const auto metrics_file = dir / "metrics.json";
  refuse_clobber({metrics_file}, args.overwrite);

  auto data = make_dataset(config);
  InferOptions options{args.threshold.value_or(config.infer.score_threshold), config.infer.top_k};
  Evaluation evaluation;
  if (replay) {
    std::vector<SceneAnnotation> truth;
    for (std::size_t i = 0; i < data->size(); ++i) truth.push_back(data->get(i).original);
    evaluation.predictions = replay_ground_truth(truth);
    for (const auto& t : truth) evaluation.image_ids.push_back(t.image_id);
    EvalOptions eval{data->kappas(), options.top_k};
    evaluation.metrics = evaluate_ap(evaluation.predictions, truth, eval);
  } else {
    torch::set_num_threads(config.train.threads);
    auto model = model_from_checkpoint(args.checkpoint, config);
    evaluation = evaluate_model(model, *data, options);
  }

  fs::create_directories(dir);
  const auto metrics = to_json(evaluation.metrics);
  write_json(metrics_file, metrics);
  write_json(dir / "results.json", coco_results(evaluation.predictions, evaluation.image_ids));
  const auto& m = evaluation.metrics;
  out << "AP " << format_metric(m.ap) << "  AP50 " << format_metric(m.ap50) << "  AP75 " << format_metric(m.ap75)
      << "  AP_M " << format_metric(m.ap_medium) << "  AP_L " << format_metric(m.ap_large) << "  AR "
      << format_metric(m.ar) << "\n";
  return kExitOk;
}

int cmd_infer(const CommonArgs& args, const std::vector<std::string>& images, std::ostream& out, std::ostream& err) {
  if (args.checkpoint.empty()) throw UsageError("infer needs --checkpoint");
  if (images.empty()) throw UsageError("infer needs at least one image path");
  const auto header = checkpoint_header(args.checkpoint);
  const auto config = resolve_config(args, header);
  const fs::path dir = args.out.empty() ? fs::path(".") : fs::path(args.out);
  const auto results_file = dir / "results.json";
  refuse_clobber({results_file}, args.overwrite);
  fs::create_directories(dir);

  torch::set_num_threads(config.train.threads);
  auto model = model_from_checkpoint(args.checkpoint, config);
  InferOptions options{args.threshold.value_or(config.infer.score_threshold), config.infer.top_k};

  std::vector<std::vector<ScoredPose>> predictions;
  std::vector<std::int64_t> ids;
  json files = json::array();
  int failures = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    try {
      const auto original = read_image(images[i]);
      auto boxed = letterbox(original, config.data.image_size);
      torch::NoGradGuard guard;
      auto forward = model->forward(image_to_tensor(boxed.image, config.model).unsqueeze(0));
      auto poses = poses_from_stage(forward.stages.back(), 0, options, boxed.scale);
      if (args.render) {
        const auto name = fs::path(images[i]).stem().string() + "_poses.png";
        write_image((dir / name).string(), render_poses(original, poses));
      }
      out << images[i] << ": " << poses.size() << " poses\n";
      predictions.push_back(std::move(poses));
      ids.push_back(static_cast<std::int64_t>(i));
      files.push_back({{"image_id", i}, {"file", images[i]}});
    } catch (const DataError& e) {
      err << "error: " << e.what() << "\n";
      ++failures;
    }
  }
  write_json(results_file, coco_results(predictions, ids));
  write_json(dir / "images.json", files);
  return failures == static_cast<int>(images.size()) ? kExitFailure : kExitOk;
}

int cmd_export_attention(const CommonArgs& args, const std::string& image, std::optional<int> instance,
                         std::ostream& out) {
  if (args.checkpoint.empty()) throw UsageError("export-attn needs --checkpoint");
  if (image.empty()) throw UsageError("export-attn needs --image");
  if (!instance) throw UsageError("export-attn needs --instance");
  const auto header = checkpoint_header(args.checkpoint);
  const auto config = resolve_config(args, header);
  const fs::path dir = args.out.empty() ? fs::path("attention") : fs::path(args.out);
  refuse_clobber({dir / "part0.json"}, args.overwrite);

  torch::set_num_threads(config.train.threads);
  auto model = model_from_checkpoint(args.checkpoint, config);
  const auto original = read_image(image);
  auto boxed = letterbox(original, config.data.image_size);
  torch::NoGradGuard guard;
  auto forward = model->forward(image_to_tensor(boxed.image, config.model).unsqueeze(0));
  InferOptions options{args.threshold.value_or(config.infer.score_threshold), config.infer.top_k};
  auto poses = poses_from_stage(forward.stages.back(), 0, options, boxed.scale);
  if (*instance < 0 || static_cast<std::size_t>(*instance) >= poses.size()) {
    throw UsageError("instance index " + std::to_string(*instance) + " out of range: " +
                     std::to_string(poses.size()) + " detections retained");
  }
  const auto& pose = poses[static_cast<std::size_t>(*instance)];
  const auto maps = forward.stages.back().keypoint.attention[0][pose.query_index].to(torch::kFloat64);
  const auto& division = model->division();

  fs::create_directories(dir);
  for (int m = 0; m < maps.size(0); ++m) {
    const auto map = maps[m].contiguous();
    const double total = map.sum().item<double>();
    if (std::abs(total - 1.0) > 1e-5) {
      throw NumericError("attention map " + std::to_string(m) + " sums to " + std::to_string(total));
    }
    json rows = json::array();
    for (int64_t y = 0; y < map.size(0); ++y) {
      json row = json::array();
      for (int64_t x = 0; x < map.size(1); ++x) row.push_back(map[y][x].item<double>());
      rows.push_back(std::move(row));
    }
    json keypoints = json::array();
    for (int k : division.parts[static_cast<std::size_t>(m)]) keypoints.push_back(coco_keypoint_names()[static_cast<std::size_t>(k)]);
    write_json(dir / ("part" + std::to_string(m) + ".json"),
               {{"part", m}, {"keypoints", keypoints}, {"query_index", pose.query_index}, {"score", pose.score},
                {"box", {pose.box.x1, pose.box.y1, pose.box.x2, pose.box.y2}}, {"attention", rows}});
    write_image((dir / ("part" + std::to_string(m) + ".png")).string(), attention_overlay(original, map, pose.box));
  }
  out << "wrote " << maps.size(0) << " attention maps to " << dir.string() << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sparse query-based multi-person pose estimation"};
  app.require_subcommand(1);
  CommonArgs common;
  bool resume = false;
  bool replay = false;
  std::vector<std::string> images;
  std::string attention_image;
  std::optional<int> instance;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", common.config, "Run configuration file (JSON)");
    cmd->add_option("--set", common.overrides, "Override a config key, e.g. --set model.scheme=a (repeatable)")
        ->allow_extra_args(false)
        ->take_all();
    cmd->add_option("--checkpoint", common.checkpoint, "Checkpoint archive");
    cmd->add_option("--out", common.out, "Output directory");
    cmd->add_option("--seed", common.seed, "Random seed");
    cmd->add_flag("--overwrite", common.overwrite, "Replace existing outputs");
    cmd->add_flag("--render", common.render, "Write skeleton overlays");
    cmd->add_option("--threshold", common.threshold, "Pose score threshold");
  };
  auto* train = app.add_subcommand("train", "Train a model");
  add_common(train);
  train->add_flag("--resume", resume, "Continue from the run directory's latest checkpoint");
  auto* eval = app.add_subcommand("eval", "Evaluate keypoint AP/AR");
  add_common(eval);
  eval->add_flag("--replay-gt", replay, "Score the ground truth itself (evaluation self-check)");
  auto* inf = app.add_subcommand("infer", "Detect poses in images");
  add_common(inf);
  inf->add_option("images", images, "Image files");
  auto* attn = app.add_subcommand("export-attn", "Export part attention maps of one detection");
  add_common(attn);
  attn->add_option("--image", attention_image, "Image file");
  attn->add_option("--instance", instance, "Index into the retained detections");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    for (auto* sub : app.get_subcommands()) out << sub->help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (train->parsed()) return cmd_train(common, resume, out);
    if (eval->parsed()) return cmd_eval(common, replay, out);
    if (inf->parsed()) return cmd_infer(common, images, out, err);
    if (attn->parsed()) return cmd_export_attention(common, attention_image, instance, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigConflictError& e) {
    err << "config conflict: " << e.what() << "\n";
    return kExitFailure;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    err << "unexpected error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace querypose
