#include "mtl/trainer.h"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "mtl/checkpoint.h"
#include "mtl/error.h"

namespace mtl {

ScheduleKind schedule_from_name(const std::string& s) {
  if (s == "self_training") return ScheduleKind::self_training;
  if (s == "zeroing_loss") return ScheduleKind::zeroing_loss;
  if (s == "round_robin") return ScheduleKind::round_robin;
  if (s == "uniform_sample") return ScheduleKind::uniform_sample;
  if (s == "weighted_sample") return ScheduleKind::weighted_sample;
  throw ConfigError("unknown schedule: '" + s + "'");
}

const char* schedule_name(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::self_training: return "self_training";
    case ScheduleKind::zeroing_loss: return "zeroing_loss";
    case ScheduleKind::round_robin: return "round_robin";
    case ScheduleKind::uniform_sample: return "uniform_sample";
    case ScheduleKind::weighted_sample: return "weighted_sample";
  }
  return "?";
}

Paradigm paradigm_from_name(const std::string& s) {
  if (s == "pretrain_finetune") return Paradigm::pretrain_finetune;
  if (s == "pretrain_adapt_finetune") return Paradigm::pretrain_adapt_finetune;
  throw ConfigError("unknown paradigm: '" + s + "'");
}

const char* paradigm_name(Paradigm p) {
  return p == Paradigm::pretrain_finetune ? "pretrain_finetune" : "pretrain_adapt_finetune";
}

PretrainKind pretrain_kind_from_name(const std::string& s) {
  if (s == "supervised_toy") return PretrainKind::supervised_toy;
  if (s == "contrastive_toy") return PretrainKind::contrastive_toy;
  if (s == "random") return PretrainKind::random;
  throw ConfigError("unknown pretrain kind: '" + s + "'");
}

const char* pretrain_kind_name(PretrainKind k) {
  switch (k) {
    case PretrainKind::supervised_toy: return "supervised_toy";
    case PretrainKind::contrastive_toy: return "contrastive_toy";
    case PretrainKind::random: return "random";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// optimizer

void AdamW::step(ParamStore& params, const std::map<std::string, Tensor>& grads, double lr,
                 double weight_decay) {
  ++t_;
  double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    check_model(p.shape == g.shape, "AdamW: grad shape mismatch for " + name);
    State& st = state_[name];
    if (st.m.data.empty()) {
      st.m = Tensor::zeros(p.shape);
      st.v = Tensor::zeros(p.shape);
    }
    for (int64_t i = 0; i < p.numel(); ++i) {
      double gi = g.data[i];
      st.m.data[i] = b1_ * st.m.data[i] + (1 - b1_) * gi;
      st.v.data[i] = b2_ * st.v.data[i] + (1 - b2_) * gi * gi;
      double mhat = st.m.data[i] / bc1;
      double vhat = st.v.data[i] / bc2;
      p.data[i] -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay * p.data[i]);
    }
  }
}

double warmup_lr(double base_lr, double factor, int64_t step, int64_t warmup_iters) {
  double t = warmup_iters <= 0
                 ? 1.0
                 : std::min(1.0, static_cast<double>(step) / static_cast<double>(warmup_iters));
  return base_lr * (factor + (1.0 - factor) * t);
}

// ---------------------------------------------------------------------------
// batch scheduling

BatchScheduler::BatchScheduler(ScheduleKind kind, const PartialDataset& data, int batch_size,
                               uint64_t seed)
    : kind_(kind), data_(data), batch_size_(batch_size), rng_(mix_seed(seed, "scheduler")) {
  check_config(batch_size_ >= 1, "batch size must be >= 1");
  int64_t n = static_cast<int64_t>(data.samples.size());
  check_config(n > 0, "empty dataset");
  steps_per_epoch_ = (n + batch_size_ - 1) / batch_size_;
  if (kind_ == ScheduleKind::self_training) {
    for (const auto& s : data.samples)
      check_config(s.available(TaskId::det) && s.available(TaskId::sem) && s.available(TaskId::driv),
                   "self_training schedule requires a fully labeled (merged) dataset");
  }
  if (kind_ == ScheduleKind::self_training || kind_ == ScheduleKind::zeroing_loss) {
    order_.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order_[static_cast<size_t>(i)] = i;
    rng_.shuffle(order_);
  } else {
    for (TaskId t : kAllTasks) {
      pools_[static_cast<size_t>(t)] = data.indices_with(t);
      counts_[static_cast<size_t>(t)] = static_cast<int>(pools_[static_cast<size_t>(t)].size());
      rng_.shuffle(pools_[static_cast<size_t>(t)]);
    }
    if (kind_ == ScheduleKind::round_robin)
      for (TaskId t : kAllTasks)
        check_config(!pools_[static_cast<size_t>(t)].empty(),
                     std::string("round_robin: empty pool for task ") + task_name(t));
    if (kind_ == ScheduleKind::uniform_sample || kind_ == ScheduleKind::weighted_sample)
      check_config(counts_[0] + counts_[1] + counts_[2] > 0, "sampler: no labeled images");
  }
}

std::vector<BatchItem> BatchScheduler::homogeneous_batch(TaskId t) {
  auto& pool = pools_[static_cast<size_t>(t)];
  auto& cur = pool_cursor_[static_cast<size_t>(t)];
  std::vector<BatchItem> out;
  std::array<bool, 3> mask{false, false, false};
  mask[static_cast<size_t>(t)] = true;
  for (int i = 0; i < batch_size_; ++i) {
    if (cur >= pool.size()) {
      rng_.shuffle(pool);
      cur = 0;
    }
    out.push_back({pool[cur++], mask});
  }
  return out;
}

std::vector<BatchItem> BatchScheduler::next() {
  std::vector<BatchItem> out;
  switch (kind_) {
    case ScheduleKind::self_training:
    case ScheduleKind::zeroing_loss: {
      for (int i = 0; i < batch_size_ && cursor_ < order_.size(); ++i) {
        int idx = order_[cursor_++];
        const auto& s = data_.samples[static_cast<size_t>(idx)];
        std::array<bool, 3> mask =
            kind_ == ScheduleKind::self_training ? std::array<bool, 3>{true, true, true}
                                                 : s.availability;
        out.push_back({idx, mask});
      }
      if (cursor_ >= order_.size()) {
        rng_.shuffle(order_);
        cursor_ = 0;
      }
      break;
    }
    case ScheduleKind::round_robin: {
      TaskId t = kAllTasks[static_cast<size_t>(step_ % 3)];
      out = homogeneous_batch(t);
      break;
    }
    case ScheduleKind::uniform_sample: {
      std::vector<TaskId> candidates;
      for (TaskId t : kAllTasks)
        if (!pools_[static_cast<size_t>(t)].empty()) candidates.push_back(t);
      TaskId t = candidates[static_cast<size_t>(
          rng_.uniform_int(0, static_cast<int64_t>(candidates.size()) - 1))];
      out = homogeneous_batch(t);
      break;
    }
    case ScheduleKind::weighted_sample: {
      // task probability proportional to its labeled-image count
      double total = counts_[0] + counts_[1] + counts_[2];
      double u = rng_.uniform() * total;
      TaskId t = TaskId::det;
      if (u < counts_[0]) {
        t = TaskId::det;
      } else if (u < counts_[0] + counts_[1]) {
        t = TaskId::sem;
      } else {
        t = TaskId::driv;
      }
      out = homogeneous_batch(t);
      break;
    }
  }
  ++step_;
  return out;
}

// ---------------------------------------------------------------------------
// stages

namespace {

Var mean_of(Tape& tape, const std::vector<Var>& vars) {
  if (vars.empty()) return tape.constant(Tensor::scalar(0.0));
  Var acc = vars[0];
  for (size_t i = 1; i < vars.size(); ++i) acc = add(acc, vars[i]);
  return scale(acc, 1.0 / static_cast<double>(vars.size()));
}

void write_step_log(std::ostream* os, const StepLog& l) {
  if (!os) return;
  (*os) << "{\"stage\":\"" << l.stage << "\",\"step\":" << l.step << ",\"lr\":" << l.lr
        << ",\"l_det\":" << l.l_det << ",\"l_sem\":" << l.l_sem << ",\"l_driv\":" << l.l_driv
        << ",\"total\":" << l.total << "}\n";
}

}  // namespace

StageResult run_stage(MultiTaskModel& model, const PartialDataset& data, const StageConfig& cfg,
                      ScheduleKind schedule, const TrainOptions& opts) {
  check_config(static_cast<bool>(cfg.trainable), "run_stage: trainable set not specified");
  auto trainable = freeze_text_encoder(cfg.trainable);

  // stage invariants on the trainable set
  if (cfg.stage == "adapt") {
    for (const auto& name : model.params.names())
      check_invariant(!trainable(name) || name.rfind("fpn.", 0) == 0 || name.rfind("lang.", 0) == 0,
                      "adapt stage may only train the adapter/language modules, got " + name);
  } else if (cfg.stage == "finetune") {
    for (const auto& name : model.params.names())
      check_invariant(trainable(name) == (name.rfind("text_encoder.", 0) != 0),
                      "finetune stage must train everything except the text encoder, got " + name);
  }

  StageResult result;
  result.freeze.frozen_names = model.names_matching(
      [&](const std::string& n) { return !trainable(n); });
  result.freeze.digest_before = subset_digest(model.params, result.freeze.frozen_names);
  if (cfg.epochs <= 0) {
    result.freeze.digest_after = result.freeze.digest_before;
    return result;
  }

  BatchScheduler scheduler(schedule, data, opts.batch_size, opts.seed);
  int64_t total_steps = cfg.epochs * scheduler.steps_per_epoch();
  int64_t warmup_eff = std::min<int64_t>(cfg.warmup_iters, std::max<int64_t>(1, total_steps / 10));
  AdamW opt;

  for (int64_t step = 0; step < total_steps; ++step) {
    std::vector<BatchItem> batch = scheduler.next();
    Tape tape;
    Ctx ctx(tape, model.params, trainable);
    std::array<std::vector<Var>, 3> task_losses;
    for (const BatchItem& item : batch) {
      const ImageSample& s = data.samples[static_cast<size_t>(item.index)];
      MultiTaskModel::Forward fwd = model.forward(ctx, s.image);
      for (TaskId t : kAllTasks) {
        if (!model.tasks.count(t)) continue;
        if (item.loss_mask[static_cast<size_t>(t)] && s.available(t))
          task_losses[static_cast<size_t>(t)].push_back(model.loss_for(fwd, s, t));
      }
    }
    Var l_det = mean_of(tape, task_losses[0]);
    Var l_sem = mean_of(tape, task_losses[1]);
    Var l_driv = mean_of(tape, task_losses[2]);
    Var total = total_loss(l_det, l_sem, l_driv, opts.weights);
    tape.backward(total);

    std::map<std::string, Tensor> grads;
    for (const auto& [name, var] : ctx.leaves())
      if (trainable(name)) grads[name] = tape.grad_of(var);

    if (opts.grad_clip_norm > 0) {
      double norm_sq = 0;
      for (const auto& [name, g] : grads)
        for (double v : g.data) norm_sq += v * v;
      double norm = std::sqrt(norm_sq);
      if (norm > opts.grad_clip_norm) {
        double scale_factor = opts.grad_clip_norm / norm;
        for (auto& [name, g] : grads)
          for (double& v : g.data) v *= scale_factor;
      }
    }

    double lr = warmup_lr(cfg.learning_rate, cfg.warmup_factor, step, warmup_eff);
    opt.step(model.params, grads, lr, cfg.weight_decay);

    StepLog log{cfg.stage, step,          lr,
                V(l_det).data[0],  V(l_sem).data[0], V(l_driv).data[0],
                V(total).data[0]};
    write_step_log(opts.step_log, log);
    result.log.push_back(log);
  }
  result.steps = total_steps;
  result.freeze.digest_after = subset_digest(model.params, result.freeze.frozen_names);
  check_invariant(result.freeze.digest_after == result.freeze.digest_before,
                  "frozen tensors drifted during stage " + cfg.stage);
  return result;
}

ParadigmResult run_paradigm(MultiTaskModel& model, const PartialDataset& data, Paradigm paradigm,
                            const ParadigmOptions& opts) {
  ParadigmResult result;
  auto run = [&](const std::string& stage, int epochs, double lr,
                 std::function<bool(const std::string&)> trainable_set) {
    StageConfig cfg;
    cfg.stage = stage;
    cfg.epochs = epochs;
    cfg.learning_rate = lr;
    cfg.weight_decay = opts.weight_decay;
    cfg.warmup_iters = opts.warmup_iters;
    cfg.warmup_factor = opts.warmup_factor;
    cfg.trainable = std::move(trainable_set);
    TrainOptions topts = opts.train;
    topts.seed = mix_seed(opts.train.seed, stage);
    StageResult sr = run_stage(model, data, cfg, opts.schedule, topts);
    result.total_steps += sr.steps;
    result.stages.push_back(std::move(sr));
  };

  if (paradigm == Paradigm::pretrain_finetune) {
    run("finetune", opts.budget.adapt_epochs + opts.budget.finetune_epochs, opts.finetune_lr,
        model.trainable_finetune());
  } else {
    run("adapt", opts.budget.adapt_epochs, opts.adapt_lr, model.trainable_adapt());
    run("finetune", opts.budget.finetune_epochs, opts.finetune_lr, model.trainable_finetune());
  }
  return result;
}

// ---------------------------------------------------------------------------
// toy pretraining registry

namespace {

Tensor crop_hwc(const Tensor& img, int64_t y0, int64_t x0, int64_t size) {
  Tensor out({size, size, 3});
  int64_t w = img.dim(1);
  for (int64_t y = 0; y < size; ++y)
    for (int64_t x = 0; x < size; ++x)
      for (int64_t c = 0; c < 3; ++c)
        out.data[static_cast<size_t>((y * size + x) * 3 + c)] =
            img.data[static_cast<size_t>(((y0 + y) * w + (x0 + x)) * 3 + c)];
  return out;
}

int majority_class(const IntMask& mask, int64_t y0, int64_t x0, int64_t size, int num_classes) {
  std::vector<int64_t> votes(static_cast<size_t>(num_classes), 0);
  for (int64_t y = 0; y < size; ++y)
    for (int64_t x = 0; x < size; ++x) ++votes[static_cast<size_t>(mask.at(y0 + y, x0 + x))];
  return static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
}

std::map<std::string, Tensor> backbone_subset(const ParamStore& ps) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, t] : ps.map())
    if (name.rfind("backbone.", 0) == 0) out.emplace(name, t);
  return out;
}

}  // namespace

PretrainResult toy_pretrain(PretrainKind kind, uint64_t seed, const SceneSpec& spec,
                            const VisionConfig& vision, const PretrainOptions& opts) {
  PretrainResult result;
  result.stage_tag = std::string("pretrain:") + pretrain_kind_name(kind);
  ParamStore ps;
  Rng init_rng(mix_seed(seed, "model"));
  build_backbone(ps, vision, init_rng);
  if (kind == PretrainKind::random) {
    result.backbone = backbone_subset(ps);
    return result;
  }

  SceneSpec pspec = spec;
  pspec.rng_seed = mix_seed(spec.rng_seed, "pretrain_data");
  std::vector<ImageSample> scenes;
  for (int i = 0; i < opts.num_scenes; ++i) scenes.push_back(generate_scene(pspec, i));
  Rng rng(mix_seed(seed, "pretrain"));
  AdamW opt;
  int num_sem = static_cast<int>(spec.semantic_classes.size());
  constexpr int64_t kCrop = 32;

  if (kind == PretrainKind::supervised_toy) {
    build_linear(ps, "pretrain.cls", vision.stage_channels[3], num_sem, init_rng);
    for (int step = 0; step < opts.steps; ++step) {
      Tape tape;
      Ctx ctx(tape, ps, train_all());
      std::vector<Var> losses;
      for (int b = 0; b < opts.batch_images; ++b) {
        const ImageSample& s = scenes[static_cast<size_t>(
            rng.uniform_int(0, static_cast<int64_t>(scenes.size()) - 1))];
        int64_t y0 = rng.uniform_int(0, spec.height - kCrop);
        int64_t x0 = rng.uniform_int(0, spec.width - kCrop);
        int label = majority_class(s.semantic_mask, y0, x0, kCrop, num_sem);
        Var img = tape.constant(hwc_to_chw(crop_hwc(s.image, y0, x0, kCrop)));
        FeatureHierarchy h = backbone_forward(ctx, vision, img);
        Var logits = dense(ctx, "pretrain.cls", global_avg_pool(h.x5));
        losses.push_back(cross_entropy_mean(logits, {label}));
      }
      Var total = mean_of(tape, losses);
      tape.backward(total);
      std::map<std::string, Tensor> grads;
      for (const auto& [name, var] : ctx.leaves()) grads[name] = tape.grad_of(var);
      opt.step(ps, grads, opts.learning_rate, 0.0);
      result.losses.push_back(V(total).data[0]);
    }
  } else {  // contrastive_toy: InfoNCE over two random crops per image
    build_attention_pool(ps, vision, init_rng);
    for (int step = 0; step < opts.steps; ++step) {
      Tape tape;
      Ctx ctx(tape, ps, train_all());
      int B = opts.batch_images;
      Var u{}, v{};
      for (int b = 0; b < B; ++b) {
        const ImageSample& s = scenes[static_cast<size_t>(
            rng.uniform_int(0, static_cast<int64_t>(scenes.size()) - 1))];
        Var embs[2];
        for (int view = 0; view < 2; ++view) {
          int64_t y0 = rng.uniform_int(0, spec.height - kCrop);
          int64_t x0 = rng.uniform_int(0, spec.width - kCrop);
          Var img = tape.constant(hwc_to_chw(crop_hwc(s.image, y0, x0, kCrop)));
          FeatureHierarchy h = backbone_forward(ctx, vision, img);
          PooledFeature pf = attention_pool(ctx, vision, chw_to_tokens(h.x5));
          embs[view] = pf.global;
        }
        u = (b == 0) ? embs[0] : concat_rows(u, embs[0]);
        v = (b == 0) ? embs[1] : concat_rows(v, embs[1]);
      }
      Var logits = scale(matmul(u, transpose(v)), 1.0 / opts.temperature);
      std::vector<int> diag(static_cast<size_t>(B));
      for (int i = 0; i < B; ++i) diag[static_cast<size_t>(i)] = i;
      Var loss = scale(add(cross_entropy_mean(logits, diag),
                           cross_entropy_mean(transpose(logits), diag)),
                       0.5);
      tape.backward(loss);
      std::map<std::string, Tensor> grads;
      for (const auto& [name, var] : ctx.leaves()) grads[name] = tape.grad_of(var);
      opt.step(ps, grads, opts.learning_rate, 0.0);
      result.losses.push_back(V(loss).data[0]);
    }
  }
  result.backbone = backbone_subset(ps);
  return result;
}

}  // namespace mtl
