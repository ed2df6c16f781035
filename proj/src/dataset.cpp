#include "querypose/dataset.hpp"

#include <numeric>

#include "querypose/errors.hpp"
#include "querypose/image_io.hpp"
#include "querypose/matching.hpp"
#include "querypose/synthetic.hpp"

namespace querypose {

SyntheticDataset::SyntheticDataset(const SyntheticConfig& config, std::size_t count, const ModelConfig& model,
                                   double kappa)
    : kappa_(kappa > 0.0 ? kappa : mean_coco_kappa()) {
  config.validate();
  if (config.image_width % 32 != 0 || config.image_height % 32 != 0) {
    throw ConfigError("data.synthetic.image_width/height: must be multiples of 32");
  }
  for (std::size_t i = 0; i < count; ++i) {
    auto scene = generate_scene(config, static_cast<std::int64_t>(i));
    Sample s;
    s.tensor = image_to_tensor(scene.image, model);
    s.image = std::move(scene.image);
    s.annotation = std::move(scene.annotation);
    s.original = s.annotation;
    s.name = "synthetic_" + std::to_string(i);
    samples_.push_back(std::move(s));
  }
}

CocoImageDataset::CocoImageDataset(CocoDataset data, int image_size, const ModelConfig& model)
    : data_(std::move(data)), image_size_(image_size), model_(model) {}

Sample CocoImageDataset::get(std::size_t index) {
  const auto& scene = data_.scenes.at(index);
  const auto& path = data_.image_paths.at(index);
  auto boxed = letterbox(read_image(path), image_size_);
  Sample s;
  s.tensor = image_to_tensor(boxed.image, model_);
  s.image = std::move(boxed.image);
  s.scale = boxed.scale;
  s.annotation = scale_annotation(scene, boxed.scale, image_size_, image_size_);
  s.original = scene;
  s.name = path;
  return s;
}

std::vector<double> CocoImageDataset::kappas() const {
  const auto& k = coco_kappas();
  return {k.begin(), k.end()};
}

std::unique_ptr<Dataset> make_dataset(const RunConfig& config) {
  if (config.data.source == "synthetic") {
    return std::make_unique<SyntheticDataset>(config.data.synthetic, static_cast<std::size_t>(config.data.num_images),
                                              config.model, config.data.synthetic_kappa);
  }
  return std::make_unique<CocoImageDataset>(load_coco_keypoints(config.data.coco_annotations, config.data.coco_images),
                                            config.data.image_size, config.model);
}

TrainBatch make_batch(const std::vector<Sample>& samples, int num_keypoints) {
  if (samples.empty()) throw DataError("make_batch: empty batch");
  TrainBatch batch;
  std::vector<torch::Tensor> images;
  for (const auto& s : samples) {
    if (s.tensor.sizes() != samples.front().tensor.sizes()) throw ShapeError("make_batch: images differ in size");
    images.push_back(s.tensor);
    batch.targets.push_back(make_targets(s.annotation, num_keypoints));
  }
  batch.images = torch::stack(images);
  return batch;
}

BatchSampler::BatchSampler(std::size_t dataset_size, int batch_size, std::uint64_t seed)
    : size_(dataset_size), batch_size_(batch_size), seed_(seed) {
  if (size_ == 0) throw DataError("sampler: empty dataset");
  if (batch_size_ < 1) throw ConfigError("train.batch_size: must be at least 1");
}

std::vector<std::size_t> BatchSampler::indices(std::int64_t step) const {
  std::vector<std::size_t> out;
  std::vector<std::size_t> order;
  std::int64_t cached_epoch = -1;
  for (int i = 0; i < batch_size_; ++i) {
    const auto position = static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(batch_size_) +
                          static_cast<std::uint64_t>(i);
    const auto epoch = static_cast<std::int64_t>(position / size_);
    if (epoch != cached_epoch) {
      order.resize(size_);
      std::iota(order.begin(), order.end(), std::size_t{0});
      SplitMix64 rng(seed_, static_cast<std::uint64_t>(epoch), 7);
      for (std::size_t j = size_; j > 1; --j) {
        std::swap(order[j - 1], order[static_cast<std::size_t>(rng.next() % j)]);
      }
      cached_epoch = epoch;
    }
    out.push_back(order[position % size_]);
  }
  return out;
}

}  // namespace querypose
