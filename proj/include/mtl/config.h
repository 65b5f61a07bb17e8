#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "mtl/self_training.h"
#include "mtl/trainer.h"

namespace mtl {

// Whole-experiment configuration. Defaults mirror the reference
// hyperparameters (loss weights 1.0/0.7/0.7, adapt lr 2.5e-4, finetune lr
// 2.5e-5, weight decay 1e-4, warmup 1000 iters at factor 0.01, prompt length
// 16, 3 adapter decoder layers) at desk scale.
struct ExperimentConfig {
  // dataset
  SceneSpec scene = SceneSpec::desk_default(0);
  int train_images = 37;
  int val_images = 16;
  DatasetSetting setting{SettingKind::disjoint_normal, {10, 7, 20}};
  uint64_t split_seed = 0;

  // model (+ language)
  ModelConfig model;

  // training
  EpochBudget budget{1, 7};
  ScheduleKind schedule = ScheduleKind::self_training;
  LossWeights weights;
  double adapt_lr = 2.5e-4;
  double finetune_lr = 2.5e-5;
  double weight_decay = 1e-4;
  int warmup_iters = 1000;
  double warmup_factor = 0.01;
  int batch_size = 2;
  double grad_clip_norm = 1.0;

  // toy pretraining
  PretrainKind pretrain_kind = PretrainKind::contrastive_toy;
  PretrainOptions pretrain;

  // self-training
  TeacherTrainConfig teacher;
  PseudoLabelConfig pseudo;

  std::vector<uint64_t> seeds{0};

  static ExperimentConfig load(const std::string& path);
  static ExperimentConfig from_json(const nlohmann::json& j);
  nlohmann::ordered_json to_json() const;
  void validate() const;

  // digest over the full config (reproducibility audits)
  std::string digest() const;
  // digest excluding method-defining knobs (paradigm is a CLI argument;
  // prompt mode, budget, and seeds vary between compared methods)
  std::string scaffold_digest() const;

  ParadigmOptions paradigm_options(uint64_t seed) const;
};

}  // namespace mtl
