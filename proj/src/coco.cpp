#include "querypose/coco.hpp"

#include <filesystem>
#include <fstream>
#include <map>

#include "querypose/errors.hpp"

namespace querypose {

using nlohmann::json;

namespace {

template <typename T>
T field(const json& record, const char* key, const std::string& what) {
  auto it = record.find(key);
  if (it == record.end()) throw DataError(what + ": missing field '" + key + "'");
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw DataError(what + ": field '" + key + "' has the wrong type");
  }
}

}  // namespace

CocoDataset parse_coco_keypoints(const json& doc, const std::string& image_root, bool check_images) {
  if (!doc.is_object() || !doc.contains("images") || !doc.contains("annotations") || !doc["images"].is_array() ||
      !doc["annotations"].is_array()) {
    throw DataError("coco: expected an object with 'images' and 'annotations' arrays");
  }
  CocoDataset data;
  std::map<std::int64_t, std::size_t> by_id;
  for (const auto& img : doc["images"]) {
    const std::string what = "coco image " + (img.contains("id") ? img["id"].dump() : std::string("<no id>"));
    const auto id = field<std::int64_t>(img, "id", what);
    SceneAnnotation scene;
    scene.image_id = id;
    scene.width = field<int>(img, "width", what);
    scene.height = field<int>(img, "height", what);
    const auto file = field<std::string>(img, "file_name", what);
    const auto path = (std::filesystem::path(image_root) / file).string();
    if (check_images && !std::filesystem::exists(path)) throw DataError(what + ": image file not found: " + path);
    if (!by_id.emplace(id, data.scenes.size()).second) throw DataError(what + ": duplicate image id");
    data.scenes.push_back(std::move(scene));
    data.image_paths.push_back(path);
  }

  for (const auto& ann : doc["annotations"]) {
    const std::string what = "coco annotation " + (ann.contains("id") ? ann["id"].dump() : std::string("<no id>"));
    const auto id = field<std::int64_t>(ann, "id", what);
    if (ann.value("iscrowd", 0) != 0) continue;
    const auto image_id = field<std::int64_t>(ann, "image_id", what);
    auto scene = by_id.find(image_id);
    if (scene == by_id.end()) throw DataError(what + ": unknown image_id " + std::to_string(image_id));
    const auto bbox = field<std::vector<double>>(ann, "bbox", what);
    if (bbox.size() != 4) throw DataError(what + ": bbox must have 4 values");
    if (!(bbox[2] > 0.0) || !(bbox[3] > 0.0)) throw DataError(what + ": bbox has non-positive size");
    const auto kps = field<std::vector<double>>(ann, "keypoints", what);
    if (kps.size() != 3 * 17) {
      throw DataError(what + ": expected 17 keypoints, got " + std::to_string(kps.size() / 3) +
                      (kps.size() % 3 ? " (not triplets)" : ""));
    }

    PersonInstance person;
    person.id = id;
    person.box = Box::from_xywh(bbox[0], bbox[1], bbox[2], bbox[3]);
    person.area = ann.contains("area") ? field<double>(ann, "area", what) : person.box.area();
    for (std::size_t k = 0; k < 17; ++k) {
      const double v = kps[3 * k + 2];
      if (v != 0.0 && v != 1.0 && v != 2.0) throw DataError(what + ": visibility must be 0, 1 or 2");
      person.keypoints.coords.push_back({kps[3 * k], kps[3 * k + 1]});
      person.keypoints.visibility.push_back(static_cast<Visibility>(static_cast<int>(v)));
    }
    data.scenes[scene->second].instances.push_back(std::move(person));
  }
  return data;
}

CocoDataset load_coco_keypoints(const std::string& annotation_file, const std::string& image_root, bool check_images) {
  std::ifstream in(annotation_file);
  if (!in) throw DataError("coco: cannot open annotation file " + annotation_file);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError("coco: malformed JSON in " + annotation_file + ": " + e.what());
  }
  return parse_coco_keypoints(doc, image_root, check_images);
}

json coco_results(const std::vector<std::vector<ScoredPose>>& predictions, const std::vector<std::int64_t>& image_ids) {
  if (predictions.size() != image_ids.size()) throw DataError("coco_results: one image id per prediction list");
  json out = json::array();
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    for (const auto& p : predictions[i]) {
      json flat = json::array();
      for (std::size_t k = 0; k < p.keypoints.size(); ++k) {
        flat.push_back(p.keypoints.coords[k].x);
        flat.push_back(p.keypoints.coords[k].y);
        flat.push_back(k < p.keypoint_scores.size() ? p.keypoint_scores[k] : 1.0);
      }
      out.push_back({{"image_id", image_ids[i]}, {"category_id", 1}, {"keypoints", flat}, {"score", p.score}});
    }
  }
  return out;
}

std::vector<std::vector<ScoredPose>> replay_ground_truth(const std::vector<SceneAnnotation>& scenes) {
  std::vector<std::vector<ScoredPose>> out;
  for (const auto& scene : scenes) {
    std::vector<ScoredPose> poses;
    for (std::size_t i = 0; i < scene.instances.size(); ++i) {
      const auto& inst = scene.instances[i];
      ScoredPose p;
      p.keypoints = inst.keypoints;
      p.keypoint_scores.assign(inst.keypoints.size(), 1.0);
      p.score = 1.0;
      p.instance_score = 1.0;
      p.box = inst.box;
      p.query_index = static_cast<int>(i);
      poses.push_back(std::move(p));
    }
    out.push_back(std::move(poses));
  }
  return out;
}

}  // namespace querypose
