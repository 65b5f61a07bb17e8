#include "mtl/multitask.h"

#include <algorithm>
#include <cmath>

#include "mtl/checkpoint.h"
#include "mtl/error.h"

namespace mtl {

namespace {

std::string seg_prefix(TaskId t) { return std::string("seg_head.") + task_name(t); }

}  // namespace

MultiTaskModel MultiTaskModel::build(const ModelConfig& cfg, const SceneSpec& spec, uint64_t seed,
                                     std::set<TaskId> tasks) {
  spec.validate();
  MultiTaskModel m;
  m.cfg = cfg;
  m.spec = spec;
  m.tasks = std::move(tasks);
  Rng rng(mix_seed(seed, "model"));
  build_backbone(m.params, cfg.vision, rng);
  build_fpn(m.params, cfg.vision, rng);
  for (TaskId t : {TaskId::sem, TaskId::driv})
    if (m.tasks.count(t))
      build_seg_head(m.params, seg_prefix(t), cfg.vision, cfg.heads, m.num_classes(t), rng);
  if (m.tasks.count(TaskId::det))
    build_det_head(m.params, "det_head", cfg.vision, cfg.heads, m.num_classes(TaskId::det), rng);

  if (cfg.language.enabled && cfg.language.prompt_mode != PromptMode::none) {
    build_text_encoder(m.params, cfg.language);
    if (!cfg.language.encoder_checkpoint.empty()) {
      LoadedCheckpoint ck = load_checkpoint(cfg.language.encoder_checkpoint);
      ParamStore sub;
      for (const auto& name : m.params.names_with_prefix("text_encoder."))
        sub.add(name, m.params.at(name).shape);
      LoadReport rep = load_into(sub, ck);
      check_config(!rep.loaded.empty(),
                   "encoder checkpoint has no text_encoder tensors: " +
                       cfg.language.encoder_checkpoint);
      for (const auto& name : rep.loaded) m.params.at(name).data = sub.at(name).data;
    }
    PromptMode mode = cfg.language.prompt_mode;
    if (mode == PromptMode::learned || mode == PromptMode::naive_fusion) {
      for (TaskId t : m.tasks)
        build_prompt_context(m.params, cfg.language, task_name(t), rng);
    }
    if (mode == PromptMode::naive_fusion) {
      int64_t rows = 0;
      for (TaskId t : m.tasks) rows += m.num_classes(t);
      check_config(cfg.language.text_dim == cfg.vision.fpn_channels,
                   "naive_fusion requires text_dim == fpn_channels");
      build_naive_fusion(m.params, cfg.vision.fpn_channels, rows, rng);
    } else {
      build_l2v(m.params, cfg.language, cfg.vision.fpn_channels, rng);
    }
  }
  return m;
}

namespace {

// All tasks' class text features stacked row-wise, in task order det,sem,driv.
Var stacked_text_features(Ctx& ctx, const MultiTaskModel& m) {
  const LanguageConfig& lc = m.cfg.language;
  Var rows{};
  bool first = true;
  for (TaskId t : kAllTasks) {
    if (!m.tasks.count(t)) continue;
    const auto& names = class_vocabulary(m.spec, t);
    Var f{};
    switch (lc.prompt_mode) {
      case PromptMode::handcrafted:
        f = handcrafted_prompt_features(ctx, lc, lc.templates.at(0), names);
        break;
      case PromptMode::ensemble:
        f = ensemble_prompt_features(ctx, lc, lc.templates, names);
        break;
      case PromptMode::learned:
      case PromptMode::naive_fusion:
        f = task_prompt_features(ctx, lc, task_name(t), names);
        break;
      case PromptMode::none:
        check_model(false, "stacked_text_features called with prompt mode none");
    }
    rows = first ? f : concat_rows(rows, f);
    first = false;
  }
  return rows;
}

}  // namespace

MultiTaskModel::Forward MultiTaskModel::forward(Ctx& ctx, const Tensor& image_hwc) const {
  Tensor chw = hwc_to_chw(image_hwc);
  Var img = ctx.tape.constant(std::move(chw));
  FeatureHierarchy h = backbone_forward(ctx, cfg.vision, img);
  PyramidFeatures pyr = fpn_forward(ctx, cfg.vision, h);

  if (cfg.language.enabled && cfg.language.prompt_mode != PromptMode::none) {
    auto memo = ctx.memo.find("text_features");
    Var text;
    if (memo != ctx.memo.end()) {
      text = memo->second;
    } else {
      text = stacked_text_features(ctx, *this);
      ctx.memo.emplace("text_features", text);
    }
    int64_t h5 = V(pyr.p5).dim(1), w5 = V(pyr.p5).dim(2);
    Var z5 = chw_to_tokens(pyr.p5);
    Var adapted = (cfg.language.prompt_mode == PromptMode::naive_fusion)
                      ? naive_prompt_fusion(ctx, text, z5)
                      : l2v_adapt(ctx, cfg.language, text, z5);
    pyr.p5 = tokens_to_chw(adapted, h5, w5);
  }

  Forward out;
  out.pyr = pyr;
  if (tasks.count(TaskId::sem))
    out.sem = seg_head_forward(ctx, seg_prefix(TaskId::sem), cfg.vision, cfg.heads, pyr,
                               num_classes(TaskId::sem));
  if (tasks.count(TaskId::driv))
    out.driv = seg_head_forward(ctx, seg_prefix(TaskId::driv), cfg.vision, cfg.heads, pyr,
                                num_classes(TaskId::driv));
  if (tasks.count(TaskId::det))
    out.det = det_head_forward(ctx, "det_head", cfg.vision, cfg.heads, pyr);
  return out;
}

Var MultiTaskModel::loss_for(const Forward& fwd, const ImageSample& sample,
                             TaskId task) const {
  check_model(sample.available(task), std::string("loss_for: sample lacks ") + task_name(task));
  switch (task) {
    case TaskId::det:
      return det_loss(*fwd.det, sample.boxes, spec.height, spec.width, num_classes(TaskId::det));
    case TaskId::sem:
      return seg_loss(*fwd.sem, sample.semantic_mask, kIgnoreIndex);
    case TaskId::driv:
      return seg_loss(*fwd.driv, sample.drivable_mask, kIgnoreIndex);
  }
  throw ModelError("loss_for: bad task");
}

std::function<bool(const std::string&)> MultiTaskModel::trainable_adapt() const {
  // FPN adapter, plus LV-Adapter / prompts / text projection / fusion when
  // language guidance is on
  return freeze_text_encoder([](const std::string& n) {
    return n.rfind("fpn.", 0) == 0 || n.rfind("lang.", 0) == 0;
  });
}

std::function<bool(const std::string&)> MultiTaskModel::trainable_finetune() const {
  return freeze_text_encoder([](const std::string&) { return true; });
}

std::vector<std::string> MultiTaskModel::names_matching(
    const std::function<bool(const std::string&)>& pred) const {
  std::vector<std::string> out;
  for (const auto& name : params.names())
    if (pred(name)) out.push_back(name);
  return out;
}

// ---------------------------------------------------------------------------
// inference

SegInference infer_seg(const SegPrediction& pred, int num_classes) {
  const Tensor& cl = V(pred.class_logits);
  const Tensor& ml = V(pred.mask_logits);
  int64_t Q = cl.dim(0), P = ml.dim(1);
  int K = num_classes;
  // per-query class softmax with the no-object column dropped
  std::vector<double> cls(static_cast<size_t>(Q) * static_cast<size_t>(K));
  for (int64_t q = 0; q < Q; ++q) {
    double mx = cl.at(q, 0);
    for (int64_t j = 1; j <= K; ++j) mx = std::max(mx, cl.at(q, j));
    double z = 0;
    for (int64_t j = 0; j <= K; ++j) z += std::exp(cl.at(q, j) - mx);
    for (int j = 0; j < K; ++j)
      cls[static_cast<size_t>(q) * static_cast<size_t>(K) + static_cast<size_t>(j)] =
          std::exp(cl.at(q, j) - mx) / z;
  }
  int64_t h4 = pred.h4, w4 = pred.w4;
  IntMask small(h4, w4);
  std::vector<double> small_scores(static_cast<size_t>(h4 * w4));
  for (int64_t p = 0; p < P; ++p) {
    double best = -1, total = 0;
    int best_c = 0;
    for (int c = 0; c < K; ++c) {
      double s = 0;
      for (int64_t q = 0; q < Q; ++q) {
        double sig = 1.0 / (1.0 + std::exp(-ml.at(q, p)));
        s += cls[static_cast<size_t>(q) * static_cast<size_t>(K) + static_cast<size_t>(c)] * sig;
      }
      total += s;
      if (s > best) {
        best = s;
        best_c = c;
      }
    }
    small.data[static_cast<size_t>(p)] = best_c;
    // posterior maximum of the normalized mixture, matching the loss
    small_scores[static_cast<size_t>(p)] = total > 0 ? best / total : 0.0;
  }
  SegInference out;
  out.labels = IntMask(h4 * 4, w4 * 4);
  out.scores.assign(static_cast<size_t>(h4 * 4 * w4 * 4), 0.0);
  for (int64_t y = 0; y < h4 * 4; ++y)
    for (int64_t x = 0; x < w4 * 4; ++x) {
      int64_t sp = (y / 4) * w4 + (x / 4);
      out.labels.at(y, x) = small.data[static_cast<size_t>(sp)];
      out.scores[static_cast<size_t>(y * w4 * 4 + x)] = small_scores[static_cast<size_t>(sp)];
    }
  return out;
}

std::vector<ScoredBox> infer_det(const DetPrediction& pred, int64_t image_h, int64_t image_w) {
  const Tensor& boxes = V(pred.boxes);
  const Tensor& logits = V(pred.class_logits);
  int64_t R = boxes.dim(0);
  int K = static_cast<int>(logits.dim(1)) - 1;
  std::vector<ScoredBox> out;
  for (int64_t r = 0; r < R; ++r) {
    double mx = logits.at(r, 0);
    for (int j = 1; j <= K; ++j) mx = std::max(mx, logits.at(r, j));
    double z = 0;
    for (int j = 0; j <= K; ++j) z += std::exp(logits.at(r, j) - mx);
    double best = -1;
    int best_c = 0;
    for (int j = 0; j < K; ++j) {
      double p = std::exp(logits.at(r, j) - mx) / z;
      if (p > best) {
        best = p;
        best_c = j;
      }
    }
    std::array<double, 4> xy = cxcywh_to_xyxy(
        {boxes.at(r, 0) * static_cast<double>(image_w), boxes.at(r, 1) * static_cast<double>(image_h),
         boxes.at(r, 2) * static_cast<double>(image_w), boxes.at(r, 3) * static_cast<double>(image_h)});
    xy[0] = std::clamp(xy[0], 0.0, static_cast<double>(image_w));
    xy[1] = std::clamp(xy[1], 0.0, static_cast<double>(image_h));
    xy[2] = std::clamp(xy[2], 0.0, static_cast<double>(image_w));
    xy[3] = std::clamp(xy[3], 0.0, static_cast<double>(image_h));
    if (xy[2] <= xy[0] || xy[3] <= xy[1]) continue;  // degenerate after clipping
    out.push_back({xy, best, best_c});
  }
  return out;
}

std::optional<double> EvalResult::mean_over_tasks() const {
  if (!sem.miou || !driv.miou || !det.map) return std::nullopt;
  return (*sem.miou + *driv.miou + *det.map) / 3.0;
}

EvalResult evaluate_model(const MultiTaskModel& model, const PartialDataset& data) {
  ConfusionMatrix cm_sem(model.num_classes(TaskId::sem));
  ConfusionMatrix cm_driv(model.num_classes(TaskId::driv));
  DetEvalAccumulator det_acc(model.num_classes(TaskId::det));
  for (const ImageSample& s : data.samples) {
    Tape tape;
    Ctx ctx(tape, const_cast<ParamStore&>(model.params), train_none());
    MultiTaskModel::Forward fwd = model.forward(ctx, s.image);
    if (fwd.sem && s.available(TaskId::sem)) {
      SegInference inf = infer_seg(*fwd.sem, model.num_classes(TaskId::sem));
      cm_sem.add(inf.labels, s.semantic_mask, kIgnoreIndex);
    }
    if (fwd.driv && s.available(TaskId::driv)) {
      SegInference inf = infer_seg(*fwd.driv, model.num_classes(TaskId::driv));
      cm_driv.add(inf.labels, s.drivable_mask, kIgnoreIndex);
    }
    if (fwd.det && s.available(TaskId::det)) {
      det_acc.add_image(infer_det(*fwd.det, model.spec.height, model.spec.width), s.boxes);
    }
  }
  EvalResult out;
  out.sem = seg_metrics(cm_sem);
  out.driv = seg_metrics(cm_driv);
  out.det = det_metrics(det_acc);
  return out;
}

}  // namespace mtl
