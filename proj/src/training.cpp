#include "querypose/training.hpp"

namespace querypose {

void fit(Trainer& trainer, Dataset& data, const FitOptions& options) {
  BatchSampler sampler(data.size(), options.batch_size, options.seed);
  const int k = trainer.model()->config().num_keypoints;
  while (trainer.step_count() < options.steps) {
    std::vector<Sample> samples;
    for (auto i : sampler.indices(trainer.step_count())) samples.push_back(data.get(i));
    auto breakdown = trainer.step(make_batch(samples, k));
    if (options.on_step) options.on_step(breakdown);
    if (options.on_checkpoint && options.checkpoint_interval > 0 &&
        trainer.step_count() % options.checkpoint_interval == 0) {
      options.on_checkpoint(trainer);
    }
  }
}

Evaluation evaluate_model(QueryPoseModel& model, Dataset& data, const InferOptions& options) {
  torch::NoGradGuard guard;
  const bool was_training = model->is_training();
  model->eval();
  Evaluation result;
  std::vector<SceneAnnotation> truth;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto sample = data.get(i);
    auto forward = model->forward(sample.tensor.unsqueeze(0));
    result.predictions.push_back(poses_from_stage(forward.stages.back(), 0, options, sample.scale));
    result.image_ids.push_back(sample.original.image_id);
    truth.push_back(std::move(sample.original));
  }
  if (was_training) model->train();
  EvalOptions eval;
  eval.kappas = data.kappas();
  eval.max_detections = options.top_k;
  result.metrics = evaluate_ap(result.predictions, truth, eval);
  return result;
}

}  // namespace querypose
