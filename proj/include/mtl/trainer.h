#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "mtl/multitask.h"

namespace mtl {

enum class ScheduleKind { self_training, zeroing_loss, round_robin, uniform_sample, weighted_sample };
ScheduleKind schedule_from_name(const std::string& s);
const char* schedule_name(ScheduleKind k);

enum class Paradigm { pretrain_finetune, pretrain_adapt_finetune };
Paradigm paradigm_from_name(const std::string& s);
const char* paradigm_name(Paradigm p);

struct EpochBudget {
  int adapt_epochs = 1;
  int finetune_epochs = 35;
};

// Declarative description of one training stage.
struct StageConfig {
  std::string stage = "finetune";  // "adapt" | "finetune"
  int epochs = 0;
  double learning_rate = 2.5e-5;   // adapt default 2.5e-4
  double weight_decay = 1e-4;
  int warmup_iters = 1000;         // capped at 10% of stage steps
  double warmup_factor = 0.01;
  std::function<bool(const std::string&)> trainable;
};

struct FreezeSpec {
  std::vector<std::string> frozen_names;
  std::string digest_before;
  std::string digest_after;
};

struct StepLog {
  std::string stage;
  int64_t step = 0;
  double lr = 0;
  double l_det = 0, l_sem = 0, l_driv = 0, total = 0;
};

struct StageResult {
  std::vector<StepLog> log;
  FreezeSpec freeze;
  int64_t steps = 0;
};

// Decoupled weight-decay adaptive-moment optimizer.
class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : b1_(beta1), b2_(beta2), eps_(eps) {}
  void step(ParamStore& params, const std::map<std::string, Tensor>& grads, double lr,
            double weight_decay);

 private:
  struct State {
    Tensor m, v;
  };
  double b1_, b2_, eps_;
  int64_t t_ = 0;
  std::map<std::string, State> state_;
};

// Warmup learning-rate rule: lr * (f + (1-f) * min(1, step/warmup_iters)).
double warmup_lr(double base_lr, double factor, int64_t step, int64_t warmup_iters);

struct BatchItem {
  int index;
  std::array<bool, 3> loss_mask;  // det, sem, driv
};

// Multi-task batch composition per the five schedules.
class BatchScheduler {
 public:
  BatchScheduler(ScheduleKind kind, const PartialDataset& data, int batch_size, uint64_t seed);
  std::vector<BatchItem> next();
  int64_t steps_per_epoch() const { return steps_per_epoch_; }
  ScheduleKind kind() const { return kind_; }

 private:
  std::vector<BatchItem> homogeneous_batch(TaskId t);

  ScheduleKind kind_;
  const PartialDataset& data_;
  int batch_size_;
  Rng rng_;
  int64_t steps_per_epoch_ = 0;
  int64_t step_ = 0;
  // epoch-shuffled order for mixed schedules
  std::vector<int> order_;
  size_t cursor_ = 0;
  // per-task pools and cursors for homogeneous schedules
  std::array<std::vector<int>, 3> pools_;
  std::array<size_t, 3> pool_cursor_{0, 0, 0};
  std::array<int, 3> counts_{0, 0, 0};
};

struct TrainOptions {
  LossWeights weights;
  int batch_size = 2;
  double grad_clip_norm = 1.0;  // <= 0 disables clipping
  uint64_t seed = 0;
  std::ostream* step_log = nullptr;  // JSONL sink, optional
};

// One training stage. Verifies bit-exact freezing of every tensor outside the
// trainable set (throws InvariantViolation on drift). The text encoder is
// frozen regardless of cfg.trainable.
StageResult run_stage(MultiTaskModel& model, const PartialDataset& data, const StageConfig& cfg,
                      ScheduleKind schedule, const TrainOptions& opts);

struct ParadigmResult {
  std::vector<StageResult> stages;
  int64_t total_steps = 0;
};

struct ParadigmOptions {
  EpochBudget budget;
  double adapt_lr = 2.5e-4;
  double finetune_lr = 2.5e-5;
  double weight_decay = 1e-4;
  int warmup_iters = 1000;
  double warmup_factor = 0.01;
  ScheduleKind schedule = ScheduleKind::self_training;
  TrainOptions train;
};

// pretrain_finetune runs one finetune stage of (adapt+finetune) epochs;
// pretrain_adapt_finetune runs adapt then finetune. Total optimizer steps are
// identical for identical budgets.
ParadigmResult run_paradigm(MultiTaskModel& model, const PartialDataset& data, Paradigm paradigm,
                            const ParadigmOptions& opts);

// -- toy pretraining registry ------------------------------------------------

enum class PretrainKind { supervised_toy, contrastive_toy, random };
PretrainKind pretrain_kind_from_name(const std::string& s);
const char* pretrain_kind_name(PretrainKind k);

struct PretrainOptions {
  int steps = 150;
  double learning_rate = 1e-3;
  int batch_images = 2;
  double temperature = 0.2;
  int num_scenes = 32;
};

struct PretrainResult {
  std::map<std::string, Tensor> backbone;  // backbone.* tensors only
  std::vector<double> losses;              // per-step (empty for random)
  std::string stage_tag;                   // "pretrain:<kind>"
};

PretrainResult toy_pretrain(PretrainKind kind, uint64_t seed, const SceneSpec& spec,
                            const VisionConfig& vision, const PretrainOptions& opts);

}  // namespace mtl
