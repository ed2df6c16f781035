#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "querypose/dataset.hpp"
#include "querypose/evaluation.hpp"
#include "querypose/pipeline.hpp"

namespace querypose {

struct FitOptions {
  int steps = 0;  // total step count to reach; resumes from trainer.step_count()
  int batch_size = 1;
  std::uint64_t seed = 0;
  int checkpoint_interval = 0;  // 0 disables periodic callbacks
  std::function<void(const LossBreakdown&)> on_step;
  std::function<void(Trainer&)> on_checkpoint;
};

// Trains on `data` in the sampler's seeded order until `options.steps`.
void fit(Trainer& trainer, Dataset& data, const FitOptions& options);

struct Evaluation {
  EvalMetrics metrics;
  std::vector<std::vector<ScoredPose>> predictions;  // original image pixels
  std::vector<std::int64_t> image_ids;
};

// Runs inference over every sample and scores it against the annotations in
// the source images' pixels.
Evaluation evaluate_model(QueryPoseModel& model, Dataset& data, const InferOptions& options);

}  // namespace querypose
