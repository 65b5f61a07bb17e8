#pragma once

#include <array>
#include <map>

#include "mtl/multitask.h"
#include "mtl/trainer.h"

namespace mtl {

struct PseudoLabelConfig {
  double box_score_threshold = 0.5;
  double mask_score_threshold = 0.3;
  int ignore_index = kIgnoreIndex;
  void validate() const;  // thresholds in (0,1)
};

// Single-task teacher: same architecture as the student restricted to one
// head, no language guidance.
struct TeacherModel {
  TaskId task;
  MultiTaskModel model;
  std::string digest;  // parameter digest, recorded on pseudo labels for audit
};

struct TeacherTrainConfig {
  int epochs = 6;
  double learning_rate = 2.5e-4;
  double weight_decay = 1e-4;
  int warmup_iters = 1000;
  double warmup_factor = 0.01;
  int batch_size = 2;
  uint64_t seed = 0;
};

// Trains one teacher on a subset labeled for `task` only (other annotations
// may be present but must include the task). Optionally warm-starts the
// backbone from pretrained tensors.
TeacherModel train_teacher(TaskId task, const ModelConfig& cfg, const PartialDataset& labeled,
                           const TeacherTrainConfig& tcfg,
                           const std::map<std::string, Tensor>* backbone_init = nullptr);

struct PseudoBoxes {
  std::vector<BoxAnnotation> boxes;  // score >= threshold, pixel coords, clipped
  std::vector<ScoredBox> raw;        // every proposal with its score, for audit
};
PseudoBoxes pseudo_boxes(const TeacherModel& teacher, const Tensor& image_hwc,
                         const PseudoLabelConfig& cfg);

struct PseudoMask {
  IntMask mask;                    // full resolution; low-score pixels = ignore
  std::vector<double> raw_scores;  // per-pixel winning score, for audit
};
PseudoMask pseudo_mask(const TeacherModel& teacher, const Tensor& image_hwc,
                       const PseudoLabelConfig& cfg);

struct MergedDataset {
  PartialDataset data;
  std::array<std::string, 3> teacher_digests;  // indexed by TaskId
};

// Ground truth is never overwritten; gaps are filled with pseudo labels so
// every image ends with all three availability flags set.
MergedDataset merge_labels(const PartialDataset& ds, const TeacherModel& det_teacher,
                           const TeacherModel& sem_teacher, const TeacherModel& driv_teacher,
                           const PseudoLabelConfig& cfg);

}  // namespace mtl
