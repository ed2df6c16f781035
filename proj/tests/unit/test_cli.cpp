#include "support/doctest.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "querypose/cli.hpp"
#include "querypose/config_io.hpp"
#include "querypose/image_io.hpp"
#include "querypose/synthetic.hpp"
#include "support/oracles.hpp"

using namespace querypose;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

RunConfig tiny_run(int steps) {
  RunConfig c;
  c.model.num_stages = 2;
  c.model.num_queries = 6;
  c.model.hidden_dim = 32;
  c.model.box_heads = 4;
  c.model.dynamic_dim = 8;
  c.model.ffn_dim = 64;
  c.model.part_dim = 16;
  c.model.part_heads = 2;
  c.model.spegm_channels = 16;
  c.model.trunk_channels = {8, 16, 16, 32};
  c.data.synthetic.image_width = c.data.synthetic.image_height = 64;
  c.data.synthetic.max_scale = 0.8;
  c.data.num_images = 3;
  c.data.image_size = 64;
  c.train.steps = steps;
  c.train.batch_size = 1;
  c.train.checkpoint_interval = 2;
  c.train.log_interval = 1;
  return c;
}

fs::path write_config(const fs::path& dir, const RunConfig& c) {
  fs::create_directories(dir);
  const auto path = dir / "run.json";
  save_run_config(c, path.string());
  return path;
}

std::vector<json> read_log(const fs::path& file) {
  std::ifstream in(file);
  std::vector<json> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) lines.push_back(json::parse(line));
  }
  return lines;
}

json read_json(const fs::path& file) {
  std::ifstream in(file);
  return json::parse(in);
}

// A trained-for-three-steps run shared by the inference tests.
struct TrainedRun {
  fs::path root;
  fs::path run;
  fs::path checkpoint;
  fs::path image;
};

const TrainedRun& trained_run() {
  static const TrainedRun r = [] {
    TrainedRun t;
    t.root = testing::temp_dir("cli_trained");
    const auto config = write_config(t.root, tiny_run(3));
    t.run = t.root / "run";
    auto o = run({"train", "--config", config.string(), "--out", t.run.string()});
    REQUIRE_MESSAGE(o.code == 0, o.err);
    t.checkpoint = t.run / "checkpoint.pt";
    SyntheticConfig s;
    s.image_width = 80;
    s.image_height = 64;
    t.image = t.root / "scene.png";
    write_image(t.image.string(), generate_scene(s, 0).image);
    return t;
  }();
  return r;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("train writes config, log and checkpoints") {
    const auto& t = trained_run();
    CHECK(fs::exists(t.run / "config.json"));
    CHECK(fs::exists(t.checkpoint));
    CHECK(fs::exists(t.run / "checkpoints" / "step_0000002.pt"));
    CHECK(fs::exists(t.run / "checkpoints" / "step_0000003.pt"));
    auto log = read_log(t.run / "train_log.jsonl");
    REQUIRE(log.size() == 3);
    for (const char* key : {"step", "loss", "lr", "terms", "elapsed_s"}) CHECK(log[0].contains(key));
    CHECK(log.back()["step"] == 3);
    CHECK(load_run_config((t.run / "config.json").string()) == tiny_run(3));
  }

  TEST_CASE("existing run directories are not clobbered") {
    const auto dir = testing::temp_dir("cli_clobber");
    const auto config = write_config(dir, tiny_run(1));
    const auto out = (dir / "run").string();
    REQUIRE(run({"train", "--config", config.string(), "--out", out}).code == 0);
    auto refused = run({"train", "--config", config.string(), "--out", out});
    CHECK(refused.code == kExitUsage);
    CHECK(refused.err.find("--overwrite") != std::string::npos);
    CHECK(run({"train", "--config", config.string(), "--out", out, "--overwrite"}).code == 0);
  }

  TEST_CASE("resume continues from the recorded step with identical losses") {
    const auto dir = testing::temp_dir("cli_resume");
    const auto config = write_config(dir, tiny_run(4));
    const auto straight = dir / "straight";
    REQUIRE(run({"train", "--config", config.string(), "--out", straight.string()}).code == 0);

    const auto split = dir / "split";
    REQUIRE(run({"train", "--config", config.string(), "--out", split.string(), "--set", "train.steps=2"}).code == 0);
    auto resumed = run({"train", "--resume", "--out", split.string(), "--set", "train.steps=4"});
    REQUIRE_MESSAGE(resumed.code == 0, resumed.err);
    CHECK(resumed.out.find("resuming at step 2") != std::string::npos);

    auto a = read_log(straight / "train_log.jsonl");
    auto b = read_log(split / "train_log.jsonl");
    REQUIRE(a.size() == 4);
    REQUIRE(b.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(b[i]["step"] == a[i]["step"]);
      CHECK(b[i]["loss"].get<double>() == a[i]["loss"].get<double>());
    }
  }

  TEST_CASE("overrides reach the saved config") {
    const auto dir = testing::temp_dir("cli_override");
    const auto config = write_config(dir, tiny_run(1));
    auto o = run({"train", "--config", config.string(), "--out", (dir / "run").string(), "--set", "model.scheme=a"});
    REQUIRE_MESSAGE(o.code == 0, o.err);
    auto saved = load_run_config((dir / "run" / "config.json").string());
    CHECK(saved.model.num_parts() == 17);
  }

  TEST_CASE("configuration errors are usage errors") {
    const auto dir = testing::temp_dir("cli_badconfig");
    const auto config = write_config(dir, tiny_run(1));
    auto unknown = run({"train", "--config", config.string(), "--out", (dir / "a").string(), "--set", "model.bogus=1"});
    CHECK(unknown.code == kExitUsage);
    auto invalid =
        run({"train", "--config", config.string(), "--out", (dir / "b").string(), "--set", "model.num_queries=0"});
    CHECK(invalid.code == kExitUsage);
    CHECK(invalid.err.find("num_queries") != std::string::npos);
    CHECK(run({"frobnicate"}).code == kExitUsage);
    CHECK(run({}).code == kExitUsage);
  }

  TEST_CASE("eval replaying ground truth scores one") {
    const auto dir = testing::temp_dir("cli_replay");
    const auto config = write_config(dir, tiny_run(1));
    auto o = run({"eval", "--replay-gt", "--config", config.string(), "--out", (dir / "eval").string()});
    REQUIRE_MESSAGE(o.code == 0, o.err);
    auto metrics = read_json(dir / "eval" / "metrics.json");
    for (const char* key : {"AP", "AP50", "AP75", "AP_M", "AP_L", "AR"}) CHECK(metrics.contains(key));
    CHECK(metrics["AP"].get<double>() == doctest::Approx(1.0));
    CHECK(metrics["AP50"].get<double>() == doctest::Approx(1.0));
  }

  TEST_CASE("eval of a checkpoint writes metrics and results") {
    const auto& t = trained_run();
    const auto out = testing::temp_dir("cli_eval");
    auto o = run({"eval", "--checkpoint", t.checkpoint.string(), "--out", out.string(), "--threshold", "0"});
    REQUIRE_MESSAGE(o.code == 0, o.err);
    CHECK(read_json(out / "metrics.json").size() == 6);
    auto results = read_json(out / "results.json");
    REQUIRE(results.is_array());
    for (const auto& r : results) {
      CHECK(r["keypoints"].size() == 51);
      CHECK(r["category_id"] == 1);
    }
  }

  TEST_CASE("eval reports a missing annotation file") {
    const auto dir = testing::temp_dir("cli_missing");
    auto c = tiny_run(1);
    c.data.source = "coco";
    c.data.coco_annotations = (dir / "absent.json").string();
    c.data.coco_images = dir.string();
    const auto config = write_config(dir, c);
    auto o = run({"eval", "--replay-gt", "--config", config.string(), "--out", (dir / "eval").string()});
    CHECK(o.code == kExitFailure);
    CHECK(o.err.find("absent.json") != std::string::npos);
    CHECK(run({"eval", "--out", (dir / "eval").string()}).code == kExitUsage);
  }

  TEST_CASE("infer writes one result per pose and optional overlays") {
    const auto& t = trained_run();
    const auto out = testing::temp_dir("cli_infer");
    auto o = run({"infer", "--checkpoint", t.checkpoint.string(), "--out", out.string(), "--threshold", "0",
                  "--render", t.image.string()});
    REQUIRE_MESSAGE(o.code == 0, o.err);
    auto results = read_json(out / "results.json");
    CHECK(results.size() == 6);  // every query survives a zero threshold
    CHECK(fs::exists(out / "scene_poses.png"));
    CHECK(read_image((out / "scene_poses.png").string()).cols == 80);

    auto strict = run({"infer", "--checkpoint", t.checkpoint.string(), "--out", out.string(), "--threshold", "1.0",
                       "--overwrite", t.image.string()});
    CHECK(strict.code == 0);
    CHECK(read_json(out / "results.json").empty());

    auto partial = run({"infer", "--checkpoint", t.checkpoint.string(), "--out", out.string(), "--overwrite",
                        t.image.string(), (out / "missing.png").string()});
    CHECK(partial.code == 0);
    CHECK(partial.err.find("missing.png") != std::string::npos);
    auto none = run({"infer", "--checkpoint", t.checkpoint.string(), "--out", out.string(), "--overwrite",
                     (out / "missing.png").string()});
    CHECK(none.code == kExitFailure);
    CHECK(run({"infer", "--checkpoint", (out / "nope.pt").string(), t.image.string()}).code == kExitFailure);
  }

  TEST_CASE("export-attn writes one normalized map per part") {
    const auto& t = trained_run();
    const auto out = testing::temp_dir("cli_attn");
    auto o = run({"export-attn", "--checkpoint", t.checkpoint.string(), "--image", t.image.string(), "--instance",
                  "0", "--threshold", "0", "--out", out.string()});
    REQUIRE_MESSAGE(o.code == 0, o.err);
    for (int m = 0; m < 7; ++m) {
      const auto file = out / ("part" + std::to_string(m) + ".json");
      REQUIRE(fs::exists(file));
      CHECK(fs::exists(out / ("part" + std::to_string(m) + ".png")));
      auto j = read_json(file);
      double total = 0.0;
      for (const auto& row : j["attention"]) {
        for (const auto& v : row) total += v.get<double>();
      }
      CHECK(total == doctest::Approx(1.0).epsilon(1e-5));
      CHECK_FALSE(j["keypoints"].empty());
    }
    auto range = run({"export-attn", "--checkpoint", t.checkpoint.string(), "--image", t.image.string(),
                      "--instance", "99", "--threshold", "0", "--out", (out / "x").string()});
    CHECK(range.code == kExitUsage);
  }

  TEST_CASE("a checkpoint conflicting with the requested model is rejected") {
    const auto& t = trained_run();
    const auto out = testing::temp_dir("cli_conflict");
    auto o = run({"infer", "--checkpoint", t.checkpoint.string(), "--out", out.string(), "--set",
                  "model.num_queries=7", t.image.string()});
    CHECK(o.code == kExitFailure);
    CHECK(o.err.find("conflict") != std::string::npos);
  }
}
