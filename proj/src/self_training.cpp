#include "mtl/self_training.h"

#include <cmath>

#include "mtl/checkpoint.h"
#include "mtl/error.h"

namespace mtl {

void PseudoLabelConfig::validate() const {
  check_config(box_score_threshold > 0 && box_score_threshold < 1 && mask_score_threshold > 0 &&
                   mask_score_threshold < 1,
               "pseudo-label score thresholds must lie in (0, 1)");
}

TeacherModel train_teacher(TaskId task, const ModelConfig& cfg, const PartialDataset& labeled,
                           const TeacherTrainConfig& tcfg,
                           const std::map<std::string, Tensor>* backbone_init) {
  check_config(!labeled.samples.empty(), "train_teacher: empty labeled subset");
  for (const auto& s : labeled.samples)
    check_config(s.available(task),
                 std::string("train_teacher: subset contains an image without ") + task_name(task));

  ModelConfig teacher_cfg = cfg;
  teacher_cfg.language.enabled = false;  // teachers mirror the plain single-task models
  MultiTaskModel model = MultiTaskModel::build(
      teacher_cfg, labeled.spec, mix_seed(tcfg.seed, std::string("teacher_") + task_name(task)),
      {task});
  if (backbone_init) {
    LoadedCheckpoint ck;
    ck.tensors = *backbone_init;
    load_into(model.params, ck);
  }

  StageConfig stage;
  stage.stage = "finetune";
  stage.epochs = tcfg.epochs;
  stage.learning_rate = tcfg.learning_rate;
  stage.weight_decay = tcfg.weight_decay;
  stage.warmup_iters = tcfg.warmup_iters;
  stage.warmup_factor = tcfg.warmup_factor;
  stage.trainable = model.trainable_finetune();

  TrainOptions opts;
  opts.weights = LossWeights{1.0, 1.0, 1.0};
  opts.batch_size = tcfg.batch_size;
  opts.seed = mix_seed(tcfg.seed, "teacher_stage");
  run_stage(model, labeled, stage, ScheduleKind::zeroing_loss, opts);

  TeacherModel out{task, std::move(model), ""};
  out.digest = subset_digest(out.model.params, out.model.params.names());
  return out;
}

PseudoBoxes pseudo_boxes(const TeacherModel& teacher, const Tensor& image_hwc,
                         const PseudoLabelConfig& cfg) {
  cfg.validate();
  check_config(teacher.task == TaskId::det, "pseudo_boxes requires the detection teacher");
  Tape tape;
  Ctx ctx(tape, const_cast<ParamStore&>(teacher.model.params), train_none());
  MultiTaskModel::Forward fwd = teacher.model.forward(ctx, image_hwc);
  PseudoBoxes out;
  out.raw = infer_det(*fwd.det, teacher.model.spec.height, teacher.model.spec.width);
  for (const ScoredBox& b : out.raw) {
    if (b.score < cfg.box_score_threshold) continue;
    out.boxes.push_back({b.box[0], b.box[1], b.box[2], b.box[3], b.class_index});
  }
  return out;
}

PseudoMask pseudo_mask(const TeacherModel& teacher, const Tensor& image_hwc,
                       const PseudoLabelConfig& cfg) {
  cfg.validate();
  check_config(teacher.task == TaskId::sem || teacher.task == TaskId::driv,
               "pseudo_mask requires a segmentation teacher");
  Tape tape;
  Ctx ctx(tape, const_cast<ParamStore&>(teacher.model.params), train_none());
  MultiTaskModel::Forward fwd = teacher.model.forward(ctx, image_hwc);
  const SegPrediction& pred = teacher.task == TaskId::sem ? *fwd.sem : *fwd.driv;
  SegInference inf = infer_seg(pred, teacher.model.num_classes(teacher.task));
  PseudoMask out;
  out.mask = inf.labels;
  out.raw_scores = inf.scores;
  for (size_t i = 0; i < out.mask.data.size(); ++i)
    if (out.raw_scores[i] < cfg.mask_score_threshold) out.mask.data[i] = cfg.ignore_index;
  return out;
}

MergedDataset merge_labels(const PartialDataset& ds, const TeacherModel& det_teacher,
                           const TeacherModel& sem_teacher, const TeacherModel& driv_teacher,
                           const PseudoLabelConfig& cfg) {
  check_config(det_teacher.task == TaskId::det && sem_teacher.task == TaskId::sem &&
                   driv_teacher.task == TaskId::driv,
               "merge_labels: teacher/task mismatch");
  MergedDataset out;
  out.data.spec = ds.spec;
  out.teacher_digests = {det_teacher.digest, sem_teacher.digest, driv_teacher.digest};
  for (const ImageSample& src : ds.samples) {
    ImageSample s = src;  // ground truth kept bit-exactly
    if (!s.available(TaskId::det)) {
      s.boxes = pseudo_boxes(det_teacher, s.image, cfg).boxes;
      s.set_available(TaskId::det, true);
      s.set_prov(TaskId::det, Provenance::pseudo);
    }
    if (!s.available(TaskId::sem)) {
      s.semantic_mask = pseudo_mask(sem_teacher, s.image, cfg).mask;
      s.set_available(TaskId::sem, true);
      s.set_prov(TaskId::sem, Provenance::pseudo);
    }
    if (!s.available(TaskId::driv)) {
      s.drivable_mask = pseudo_mask(driv_teacher, s.image, cfg).mask;
      s.set_available(TaskId::driv, true);
      s.set_prov(TaskId::driv, Provenance::pseudo);
    }
    out.data.samples.push_back(std::move(s));
  }
  return out;
}

}  // namespace mtl
