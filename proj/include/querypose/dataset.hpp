#pragma once

#include <opencv2/core.hpp>
#include <torch/torch.h>

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "querypose/annotation.hpp"
#include "querypose/coco.hpp"
#include "querypose/config_io.hpp"
#include "querypose/pipeline.hpp"

namespace querypose {

// One model-ready sample; the annotation is in model-input pixels and `scale`
// maps original pixels to model pixels.
struct Sample {
  cv::Mat image;          // BGR at model resolution
  torch::Tensor tensor;   // (3, H, W) normalized
  SceneAnnotation annotation;
  SceneAnnotation original;  // annotation in the source image's pixels
  double scale = 1.0;
  std::string name;
};

class Dataset {
 public:
  virtual ~Dataset() = default;
  [[nodiscard]] virtual std::size_t size() const = 0;
  virtual Sample get(std::size_t index) = 0;
  // OKS constants appropriate to this data (one shared or one per keypoint).
  [[nodiscard]] virtual std::vector<double> kappas() const = 0;
};

// `count` synthetic scenes with indices 0..count-1, rendered once and kept.
class SyntheticDataset : public Dataset {
 public:
  SyntheticDataset(const SyntheticConfig& config, std::size_t count, const ModelConfig& model, double kappa = 0.0);

  [[nodiscard]] std::size_t size() const override { return samples_.size(); }
  Sample get(std::size_t index) override { return samples_.at(index); }
  [[nodiscard]] std::vector<double> kappas() const override { return {kappa_}; }

 private:
  std::vector<Sample> samples_;
  double kappa_;
};

// COCO images letterboxed to `image_size`; decoded on demand.
class CocoImageDataset : public Dataset {
 public:
  CocoImageDataset(CocoDataset data, int image_size, const ModelConfig& model);

  [[nodiscard]] std::size_t size() const override { return data_.scenes.size(); }
  Sample get(std::size_t index) override;
  [[nodiscard]] std::vector<double> kappas() const override;

 private:
  CocoDataset data_;
  int image_size_;
  ModelConfig model_;
};

std::unique_ptr<Dataset> make_dataset(const RunConfig& config);

// Stacks samples into a training batch with matching targets.
TrainBatch make_batch(const std::vector<Sample>& samples, int num_keypoints);

// Visits samples in a seeded order: each epoch is a fresh SplitMix64
// permutation keyed by (seed, epoch). Single worker, fully deterministic.
class BatchSampler {
 public:
  BatchSampler(std::size_t dataset_size, int batch_size, std::uint64_t seed);

  // Indices of the batch for global step `step` (0-based).
  [[nodiscard]] std::vector<std::size_t> indices(std::int64_t step) const;

 private:
  std::size_t size_;
  int batch_size_;
  std::uint64_t seed_;
};

}  // namespace querypose
