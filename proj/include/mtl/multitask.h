#pragma once

#include <optional>
#include <set>

#include "mtl/language.h"
#include "mtl/metrics.h"
#include "mtl/model_core.h"
#include "mtl/synthetic.h"
#include "mtl/task_heads.h"

namespace mtl {

struct ModelConfig {
  VisionConfig vision;
  HeadConfig heads;
  LanguageConfig language;
};

// Hard-parameter-sharing multi-task model: shared backbone + FPN adapter
// (+ optional language adaptation of P5), task-specific heads. Teachers are
// the same model restricted to a single head.
struct MultiTaskModel {
  ModelConfig cfg;
  SceneSpec spec;
  std::set<TaskId> tasks;
  ParamStore params;

  static MultiTaskModel build(const ModelConfig& cfg, const SceneSpec& spec, uint64_t seed,
                              std::set<TaskId> tasks = {TaskId::det, TaskId::sem, TaskId::driv});

  struct Forward {
    PyramidFeatures pyr;
    std::optional<DetPrediction> det;
    std::optional<SegPrediction> sem;
    std::optional<SegPrediction> driv;
  };
  Forward forward(Ctx& ctx, const Tensor& image_hwc) const;

  // Per-task loss for one sample (annotation must be available).
  Var loss_for(const Forward& fwd, const ImageSample& sample, TaskId task) const;

  int num_classes(TaskId t) const {
    return static_cast<int>(class_vocabulary(spec, t).size());
  }

  // Stage trainable-set predicates (text encoder always excluded).
  std::function<bool(const std::string&)> trainable_adapt() const;
  std::function<bool(const std::string&)> trainable_finetune() const;

  // Parameter-name partition helpers.
  std::vector<std::string> names_matching(const std::function<bool(const std::string&)>& pred) const;
};

// Plain-value inference products (no gradients).
struct SegInference {
  IntMask labels;              // full resolution, nearest-upsampled from stride 4
  std::vector<double> scores;  // per full-res pixel, winning-class mixture score
};
SegInference infer_seg(const SegPrediction& pred, int num_classes);

// Decoded, clipped, scored proposals (score = max class probability excluding
// the no-object slot).
std::vector<ScoredBox> infer_det(const DetPrediction& pred, int64_t image_h, int64_t image_w);

struct EvalResult {
  SegMetrics sem;
  SegMetrics driv;
  DetMetrics det;
  // mean over (mIoU-SS, mIoU-DA, mAP); absent if any component is undefined
  std::optional<double> mean_over_tasks() const;
};

EvalResult evaluate_model(const MultiTaskModel& model, const PartialDataset& data);

}  // namespace mtl
