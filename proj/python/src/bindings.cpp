#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <opencv2/core.hpp>

#include "querypose/coco.hpp"
#include "querypose/config_io.hpp"
#include "querypose/errors.hpp"
#include "querypose/evaluation.hpp"
#include "querypose/image_io.hpp"
#include "querypose/matching.hpp"
#include "querypose/part_division.hpp"
#include "querypose/pipeline.hpp"
#include "querypose/rle_flow.hpp"
#include "querypose/synthetic.hpp"

namespace py = pybind11;
using namespace querypose;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

KeypointSet keypoints_from(const Array& coords, const std::vector<int>& visibility) {
  if (coords.ndim() != 2 || coords.shape(1) != 2) throw ShapeError("keypoints must be a (K, 2) array");
  KeypointSet kps;
  auto c = coords.unchecked<2>();
  for (py::ssize_t k = 0; k < c.shape(0); ++k) {
    kps.coords.push_back({c(k, 0), c(k, 1)});
    const int v = visibility.empty() ? 2 : visibility.at(static_cast<std::size_t>(k));
    kps.visibility.push_back(static_cast<Visibility>(v));
  }
  return kps;
}

torch::Tensor tensor_from(const Array& a) {
  std::vector<int64_t> shape(a.shape(), a.shape() + a.ndim());
  return torch::from_blob(const_cast<double*>(a.data()), shape, torch::kFloat64).clone();
}

py::dict annotation_to_dict(const SceneAnnotation& scene) {
  py::list instances;
  for (const auto& inst : scene.instances) {
    py::list kps;
    for (std::size_t k = 0; k < inst.keypoints.size(); ++k) {
      kps.append(py::make_tuple(inst.keypoints.coords[k].x, inst.keypoints.coords[k].y,
                                static_cast<int>(inst.keypoints.visibility[k])));
    }
    py::dict d;
    d["box"] = py::make_tuple(inst.box.x1, inst.box.y1, inst.box.x2, inst.box.y2);
    d["keypoints"] = kps;
    d["area"] = inst.area;
    d["id"] = inst.id;
    instances.append(d);
  }
  py::dict out;
  out["image_id"] = scene.image_id;
  out["width"] = scene.width;
  out["height"] = scene.height;
  out["instances"] = instances;
  return out;
}

SceneAnnotation annotation_from_dict(const py::dict& d) {
  SceneAnnotation scene;
  scene.image_id = d.contains("image_id") ? d["image_id"].cast<std::int64_t>() : 0;
  scene.width = d.contains("width") ? d["width"].cast<int>() : 0;
  scene.height = d.contains("height") ? d["height"].cast<int>() : 0;
  for (const auto& item : d["instances"].cast<py::list>()) {
    auto inst = item.cast<py::dict>();
    PersonInstance p;
    auto box = inst["box"].cast<std::vector<double>>();
    if (box.size() != 4) throw ShapeError("box must have 4 values");
    p.box = Box{box[0], box[1], box[2], box[3]};
    p.area = inst.contains("area") ? inst["area"].cast<double>() : p.box.area();
    for (const auto& kp : inst["keypoints"].cast<py::list>()) {
      auto t = kp.cast<std::vector<double>>();
      if (t.size() != 3) throw ShapeError("keypoints must be (x, y, v) triplets");
      p.keypoints.coords.push_back({t[0], t[1]});
      p.keypoints.visibility.push_back(static_cast<Visibility>(static_cast<int>(t[2])));
    }
    scene.instances.push_back(std::move(p));
  }
  return scene;
}

py::dict pose_to_dict(const ScoredPose& p) {
  py::list kps;
  for (std::size_t k = 0; k < p.keypoints.size(); ++k) {
    kps.append(py::make_tuple(p.keypoints.coords[k].x, p.keypoints.coords[k].y, p.keypoint_scores[k]));
  }
  py::dict d;
  d["keypoints"] = kps;
  d["score"] = p.score;
  d["instance_score"] = p.instance_score;
  d["box"] = py::make_tuple(p.box.x1, p.box.y1, p.box.x2, p.box.y2);
  d["query_index"] = p.query_index;
  return d;
}

cv::Mat image_from(const py::array_t<std::uint8_t, py::array::c_style>& image) {
  if (image.ndim() != 3 || image.shape(2) != 3) throw ShapeError("image must be an (H, W, 3) uint8 array");
  return cv::Mat(static_cast<int>(image.shape(0)), static_cast<int>(image.shape(1)), CV_8UC3,
                 const_cast<std::uint8_t*>(image.data()))
      .clone();
}

class PyModel {
 public:
  explicit PyModel(const std::string& config_json, std::uint64_t seed) {
    torch::manual_seed(seed);
    run_ = config_json.empty() ? RunConfig{} : run_config_from_json(nlohmann::json::parse(config_json));
    run_.validate();
    model_ = QueryPoseModel(run_.model);
    model_->eval();
  }

  static PyModel load(const std::string& path) {
    PyModel m;
    auto header = read_checkpoint_header(path);
    if (!header.extra.empty()) m.run_ = run_config_from_json(nlohmann::json::parse(header.extra));
    m.run_.model = header.config;
    m.model_ = load_model(path);
    return m;
  }

  void save(const std::string& path) { save_checkpoint(path, model_, nullptr, to_json(run_).dump()); }

  py::list infer(const py::array_t<std::uint8_t, py::array::c_style>& image, double threshold, int top_k) {
    auto boxed = letterbox(image_from(image), run_.data.image_size);
    std::vector<ScoredPose> poses;
    {
      py::gil_scoped_release release;
      torch::NoGradGuard guard;
      auto forward = model_->forward(image_to_tensor(boxed.image, run_.model).unsqueeze(0));
      poses = poses_from_stage(forward.stages.back(), 0, InferOptions{threshold, top_k}, boxed.scale);
    }
    py::list out;
    for (const auto& p : poses) out.append(pose_to_dict(p));
    return out;
  }

  [[nodiscard]] std::string config_json() const { return to_json(run_).dump(); }
  [[nodiscard]] int num_parts() const { return model_->division().num_parts(); }

 private:
  PyModel() = default;
  RunConfig run_;
  QueryPoseModel model_{nullptr};
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Sparse query-based multi-person pose estimation (C++ core)";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<GeometryError>(m, "GeometryError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<DataError>(m, "DataError", PyExc_IOError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_IOError);
  py::register_exception<ConfigConflictError>(m, "ConfigConflictError", PyExc_IOError);

  m.def(
      "giou",
      [](const std::array<double, 4>& a, const std::array<double, 4>& b) {
        return giou(Box{a[0], a[1], a[2], a[3]}, Box{b[0], b[1], b[2], b[3]});
      },
      py::arg("a"), py::arg("b"), "Generalized IoU of two corner-form boxes.");

  m.def(
      "hungarian",
      [](const Array& cost) {
        if (cost.ndim() != 2) throw ShapeError("cost must be 2-D");
        CostMatrix c(static_cast<int>(cost.shape(0)), static_cast<int>(cost.shape(1)));
        std::copy(cost.data(), cost.data() + cost.size(), c.values.begin());
        auto a = hungarian(c);
        return py::make_tuple(a.pairs, a.total_cost(c));
      },
      py::arg("cost"), "Minimum-cost assignment; returns ([(row, col), ...], total_cost).");

  m.def(
      "oks",
      [](const Array& pred, const Array& gt, const std::vector<int>& visibility, double area,
         const std::vector<double>& kappas) -> std::optional<double> {
        return oks(keypoints_from(pred, {}), keypoints_from(gt, visibility), area, kappas);
      },
      py::arg("pred"), py::arg("gt"), py::arg("visibility"), py::arg("area"), py::arg("kappas"),
      "Object keypoint similarity, or None when the ground truth has no labeled keypoint.");

  m.def(
      "part_division", [](const std::string& scheme) {
        if (scheme.size() != 1) throw ConfigError("scheme must be a single letter");
        return part_division(scheme[0]).parts;
      },
      py::arg("scheme"), "Keypoint groups of a part-division scheme ('a'..'d').");

  m.def(
      "pose_score", [](const Array& scale, double instance_score) { return pose_score(tensor_from(scale), instance_score); },
      py::arg("scale"), py::arg("instance_score"), "Pose score from (K, 2) scales and the instance score.");

  m.def(
      "rle_loss",
      [](const Array& mean, const Array& scale, const Array& target, const std::string& mode) {
        auto mu = tensor_from(mean);
        if (mu.dim() != 3 || mu.size(2) != 2) throw ShapeError("mean must be (R, K, 2)");
        RealNvpFlow flow(4, 64);
        flow->to(torch::kFloat64);
        flow->set_identity();
        auto mask = torch::ones({mu.size(0), mu.size(1)}, torch::kBool);
        if (mode != "basic" && mode != "residual") throw ConfigError("mode must be 'basic' or 'residual'");
        const auto flow_mode = mode == "basic" ? FlowMode::kBasic : FlowMode::kResidual;
        return rle_loss({mu, tensor_from(scale), tensor_from(target), mask}, flow, flow_mode).loss.item<double>();
      },
      py::arg("mean"), py::arg("scale"), py::arg("target"), py::arg("mode") = "basic",
      "Keypoint likelihood loss under an identity flow, averaged over instances.");

  m.def(
      "generate_scene",
      [](std::int64_t index, int width, int height, int min_persons, int max_persons, std::uint64_t seed) {
        SyntheticConfig cfg;
        cfg.image_width = width;
        cfg.image_height = height;
        cfg.min_persons = min_persons;
        cfg.max_persons = max_persons;
        cfg.seed = seed;
        auto scene = generate_scene(cfg, index);
        py::array_t<std::uint8_t> image({scene.image.rows, scene.image.cols, 3});
        std::memcpy(image.mutable_data(), scene.image.data, scene.image.total() * scene.image.elemSize());
        return py::make_tuple(image, annotation_to_dict(scene.annotation));
      },
      py::arg("index"), py::arg("width") = 256, py::arg("height") = 256, py::arg("min_persons") = 1,
      py::arg("max_persons") = 4, py::arg("seed") = 0,
      "Renders a synthetic scene; returns (BGR image, annotation dict).");

  m.def(
      "evaluate_ap",
      [](const py::list& predictions, const py::list& ground_truth, const std::vector<double>& kappas, int max_dets) {
        std::vector<std::vector<ScoredPose>> preds;
        for (const auto& image : predictions) {
          std::vector<ScoredPose> poses;
          for (const auto& item : image.cast<py::list>()) {
            auto d = item.cast<py::dict>();
            ScoredPose p;
            for (const auto& kp : d["keypoints"].cast<py::list>()) {
              auto t = kp.cast<std::vector<double>>();
              if (t.size() < 2) throw ShapeError("prediction keypoints need x and y");
              p.keypoints.coords.push_back({t[0], t[1]});
              p.keypoints.visibility.push_back(Visibility::kVisible);
            }
            p.score = d["score"].cast<double>();
            poses.push_back(std::move(p));
          }
          preds.push_back(std::move(poses));
        }
        std::vector<SceneAnnotation> truth;
        for (const auto& item : ground_truth) truth.push_back(annotation_from_dict(item.cast<py::dict>()));
        const auto metrics = evaluate_ap(preds, truth, EvalOptions{kappas, max_dets});
        return to_json(metrics).dump();
      },
      py::arg("predictions"), py::arg("ground_truth"), py::arg("kappas"), py::arg("max_detections") = 20,
      "Keypoint AP/AR as a JSON object string (null marks an undefined metric).");

  py::class_<PyModel>(m, "Model")
      .def(py::init<const std::string&, std::uint64_t>(), py::arg("config_json") = "", py::arg("seed") = 0)
      .def_static("load", &PyModel::load, py::arg("path"))
      .def("save", &PyModel::save, py::arg("path"))
      .def("infer", &PyModel::infer, py::arg("image"), py::arg("threshold") = 0.3, py::arg("top_k") = 20)
      .def("config_json", &PyModel::config_json)
      .def_property_readonly("num_parts", &PyModel::num_parts);
}
