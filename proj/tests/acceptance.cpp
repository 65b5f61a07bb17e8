// Acceptance suite: one pass/fail line per criterion.
//
// Criterion 10 is directional and reported, not gated; every other criterion
// gates the exit code. Run with --only N to execute a single criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mtl/checkpoint.h"
#include "mtl/config.h"
#include "mtl/dataset_io.h"
#include "mtl/pipeline.h"

using namespace mtl;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  bool gated = true;
  std::string detail;
};

std::string g_workdir;

// -- shared tiny configuration (fast criteria) -------------------------------

SceneSpec tiny_scene(uint64_t seed) {
  SceneSpec spec = SceneSpec::desk_default(seed);
  spec.height = 32;
  spec.width = 32;
  spec.num_objects_range = {1, 2};
  return spec;
}

ModelConfig tiny_model(bool language) {
  ModelConfig cfg;
  cfg.vision.stage_channels = {4, 8, 12, 16};
  cfg.vision.blocks_per_stage = 1;
  cfg.vision.gn_groups = 2;
  cfg.vision.fpn_channels = 8;
  cfg.vision.pool_heads = 2;
  cfg.heads.seg_queries = 6;
  cfg.heads.seg_decoder_layers = 1;
  cfg.heads.seg_heads = 2;
  cfg.heads.det_proposals = 6;
  cfg.heads.det_stages = 2;
  cfg.heads.det_hidden = 16;
  cfg.heads.det_pool_grid = 2;
  cfg.heads.det_dyn_mid = 4;
  cfg.language.enabled = language;
  cfg.language.prompt_mode = PromptMode::learned;
  cfg.language.text_dim = 8;
  cfg.language.text_layers = 1;
  cfg.language.text_heads = 2;
  cfg.language.l2v_layers = 1;
  cfg.language.l2v_heads = 2;
  cfg.language.context_length = 4;
  return cfg;
}

PartialDataset tiny_dataset(const SceneSpec& spec, int n) {
  PartialDataset ds;
  ds.spec = spec;
  for (int i = 0; i < n; ++i) ds.samples.push_back(generate_scene(spec, i));
  return ds;
}

// ---------------------------------------------------------------------------
// 1. Freeze integrity

Outcome criterion1() {
  SceneSpec spec = tiny_scene(101);
  ModelConfig cfg = tiny_model(true);
  PartialDataset ds = tiny_dataset(spec, 8);
  MultiTaskModel model = MultiTaskModel::build(cfg, spec, 7);

  auto group = [&](const std::string& prefix) {
    return model.params.names_with_prefix(prefix);
  };
  std::vector<std::pair<std::string, std::vector<std::string>>> frozen_groups{
      {"backbone", group("backbone.")},
      {"seg head (sem)", group("seg_head.sem")},
      {"seg head (driv)", group("seg_head.driv")},
      {"det head", group("det_head.")},
      {"text encoder", group("text_encoder.")}};
  std::vector<std::pair<std::string, std::vector<std::string>>> moving_groups{
      {"fpn", group("fpn.")},
      {"lv-adapter", group("lang.l2v.")},
      {"text projection", group("lang.proj.")},
      {"prompt contexts", group("lang.prompt.")}};

  std::map<std::string, std::string> before;
  for (const auto& [name, names] : frozen_groups) before[name] = subset_digest(model.params, names);
  for (const auto& [name, names] : moving_groups) before[name] = subset_digest(model.params, names);

  StageConfig stage;
  stage.stage = "adapt";
  stage.epochs = 3;  // 3 * ceil(8/2) = 12 steps
  stage.learning_rate = 2.5e-4;
  stage.trainable = model.trainable_adapt();
  TrainOptions opts;
  opts.batch_size = 2;
  opts.seed = 3;
  StageResult sr = run_stage(model, ds, stage, ScheduleKind::zeroing_loss, opts);

  Outcome out;
  std::ostringstream msg;
  if (sr.steps < 10) {
    out.pass = false;
    msg << "only " << sr.steps << " steps; ";
  }
  for (const auto& l : sr.log)
    if (!(l.total > 0)) {
      out.pass = false;
      msg << "zero loss at step " << l.step << "; ";
    }
  for (const auto& [name, names] : frozen_groups) {
    if (subset_digest(model.params, names) != before[name]) {
      out.pass = false;
      msg << name << " drifted; ";
    }
  }
  for (const auto& [name, names] : moving_groups) {
    if (subset_digest(model.params, names) == before[name]) {
      out.pass = false;
      msg << name << " did not move; ";
    }
  }
  if (out.pass)
    msg << sr.steps << " adapt steps: backbone/heads/text-encoder bit-identical, "
        << "fpn+lv-adapter+prompts updated";
  out.detail = msg.str();
  return out;
}

// ---------------------------------------------------------------------------
// 2. Step parity

Outcome criterion2() {
  SceneSpec spec = tiny_scene(102);
  ModelConfig cfg = tiny_model(false);
  PartialDataset ds = tiny_dataset(spec, 8);

  ParadigmOptions opts;
  opts.budget = {1, 35};
  opts.schedule = ScheduleKind::zeroing_loss;
  opts.train.batch_size = 2;
  opts.train.seed = 11;

  MultiTaskModel m1 = MultiTaskModel::build(cfg, spec, 5);
  ParadigmResult paf = run_paradigm(m1, ds, Paradigm::pretrain_adapt_finetune, opts);
  ParadigmOptions pf_opts = opts;
  pf_opts.budget = {0, 36};
  MultiTaskModel m2 = MultiTaskModel::build(cfg, spec, 5);
  ParadigmResult pf = run_paradigm(m2, ds, Paradigm::pretrain_finetune, pf_opts);

  Outcome out;
  out.pass = paf.total_steps == pf.total_steps;
  std::ostringstream msg;
  msg << "pretrain_adapt_finetune(1+35): " << paf.total_steps
      << " steps, pretrain_finetune(36): " << pf.total_steps << " steps";
  out.detail = msg.str();
  return out;
}

// ---------------------------------------------------------------------------
// 3. Gradient correctness

Outcome criterion3() {
  SceneSpec spec = tiny_scene(103);
  ModelConfig cfg = tiny_model(true);
  MultiTaskModel model = MultiTaskModel::build(cfg, spec, 13);
  ImageSample sample = generate_scene(spec, 0);

  auto loss_value = [&](std::map<std::string, Tensor>* grads) {
    Tape tape;
    Ctx ctx(tape, model.params, grads ? model.trainable_finetune() : train_none());
    MultiTaskModel::Forward fwd = model.forward(ctx, sample.image);
    Var total = total_loss(model.loss_for(fwd, sample, TaskId::det),
                           model.loss_for(fwd, sample, TaskId::sem),
                           model.loss_for(fwd, sample, TaskId::driv), LossWeights{});
    if (grads) {
      tape.backward(total);
      for (const auto& [name, var] : ctx.leaves()) (*grads)[name] = tape.grad_of(var);
    }
    return V(total).data[0];
  };
  std::map<std::string, Tensor> grads;
  loss_value(&grads);

  struct Group {
    const char* label;
    std::vector<std::string> prefixes;
  };
  std::vector<Group> groups{{"backbone", {"backbone."}},
                            {"fpn", {"fpn."}},
                            {"seg heads", {"seg_head.sem", "seg_head.driv"}},
                            {"det head", {"det_head."}},
                            {"l2v adapter", {"lang.l2v.", "lang.proj."}},
                            {"prompt contexts", {"lang.prompt."}}};
  Outcome out;
  std::ostringstream msg;
  Rng probe_rng(31);
  for (const Group& g : groups) {
    std::vector<std::string> names;
    for (const auto& p : g.prefixes)
      for (const auto& n : model.params.names_with_prefix(p)) names.push_back(n);
    int failures = 0;
    double worst = 0;
    const int kProbes = 22;
    for (int i = 0; i < kProbes; ++i) {
      const std::string& name = names[static_cast<size_t>(
          probe_rng.uniform_int(0, static_cast<int64_t>(names.size()) - 1))];
      Tensor& t = model.params.at(name);
      int64_t idx = probe_rng.uniform_int(0, t.numel() - 1);
      double fd = central_difference(t, idx, 1e-6, [&]() { return loss_value(nullptr); });
      double an = grads.at(name).data[idx];
      double err = std::fabs(fd - an) / std::max({std::fabs(fd), std::fabs(an), 1e-5});
      worst = std::max(worst, err);
      if (!(err < 1e-3)) ++failures;
    }
    if (failures > 0) {
      out.pass = false;
      msg << g.label << ": " << failures << "/" << kProbes << " probes failed; ";
    } else {
      msg << g.label << " max rel err " << worst << "; ";
    }
  }
  out.detail = msg.str();
  return out;
}

// ---------------------------------------------------------------------------
// 4. Normalization suite

Outcome criterion4() {
  SceneSpec spec = tiny_scene(104);
  LanguageConfig lc = tiny_model(true).language;
  ParamStore ps;
  build_text_encoder(ps, lc);
  Rng rng(3);
  build_prompt_context(ps, lc, "sem", rng);

  Outcome out;
  double worst = 0;
  auto check_rows = [&](Var rows) {
    const Tensor& t = V(rows);
    for (int64_t i = 0; i < t.dim(0); ++i) {
      double ss = 0;
      for (int64_t j = 0; j < t.dim(1); ++j) ss += t.at(i, j) * t.at(i, j);
      worst = std::max(worst, std::fabs(std::sqrt(ss) - 1.0));
    }
  };
  Tape tape;
  Ctx ctx(tape, ps, train_none());
  const auto& names = spec.semantic_classes;
  check_rows(handcrafted_prompt_features(ctx, lc, "a photo of a [CLASS].", names));
  check_rows(ensemble_prompt_features(
      ctx, lc, {"a photo of a [CLASS].", "there is a [CLASS] in the scene."}, names));
  check_rows(task_prompt_features(ctx, lc, "sem", names));

  VisionConfig vc = tiny_model(false).vision;
  ParamStore pool_ps;
  Rng pr(5);
  build_attention_pool(pool_ps, vc, pr);
  Rng xr(7);
  Tensor tokens({6, vc.stage_channels[3]});
  for (double& v : tokens.data) v = xr.normal();
  Tape tape2;
  Ctx ctx2(tape2, pool_ps, train_none());
  PooledFeature pf = attention_pool(ctx2, vc, tape2.leaf(tokens, false));
  check_rows(pf.global);
  check_rows(pf.spatial);

  out.pass = worst < 1e-6;
  std::ostringstream msg;
  msg << "worst |row norm - 1| = " << worst << " across three prompt paths and attention_pool";
  out.detail = msg.str();
  return out;
}

// ---------------------------------------------------------------------------
// 5. Pseudo-label thresholds

Outcome criterion5() {
  SceneSpec spec = tiny_scene(105);
  ModelConfig cfg = tiny_model(false);
  PseudoLabelConfig pcfg;

  // an overconfident detection teacher (so some boxes clear the threshold)
  // and lightly trained segmentation teachers
  std::vector<TeacherModel> teachers;
  for (TaskId t : kAllTasks) {
    TeacherTrainConfig tcfg;
    tcfg.batch_size = 2;
    tcfg.seed = 17;
    PartialDataset subset;
    subset.spec = spec;
    int n = 4;
    if (t == TaskId::det) {
      tcfg.epochs = 150;
      tcfg.learning_rate = 1e-3;
      n = 3;
    } else {
      tcfg.epochs = 2;
    }
    for (int i = 0; i < n; ++i) subset.samples.push_back(generate_scene(spec, 200 + i));
    teachers.push_back(train_teacher(t, cfg, subset, tcfg));
  }

  // 50 unlabeled images
  PartialDataset unlabeled;
  unlabeled.spec = spec;
  for (int i = 0; i < 50; ++i) {
    ImageSample s = generate_scene(spec, 300 + i);
    s.boxes.clear();
    s.semantic_mask = IntMask();
    s.drivable_mask = IntMask();
    s.availability = {false, false, false};
    unlabeled.samples.push_back(std::move(s));
  }

  Outcome out;
  std::ostringstream msg;
  int64_t boxes_emitted = 0, boxes_below = 0, ignored = 0, kept_below = 0;
  for (const auto& s : unlabeled.samples) {
    PseudoBoxes pb = pseudo_boxes(teachers[0], s.image, pcfg);
    // audit the emitted set against the raw score dump
    size_t expect = 0;
    for (const auto& r : pb.raw)
      if (r.score >= pcfg.box_score_threshold) ++expect;
    if (expect != pb.boxes.size()) {
      out.pass = false;
      msg << "box filter mismatch; ";
    }
    boxes_emitted += static_cast<int64_t>(pb.boxes.size());
    for (const auto& r : pb.raw)
      if (r.score < pcfg.box_score_threshold)
        for (const auto& b : pb.boxes)
          if (b.x1 == r.box[0] && b.y1 == r.box[1] && b.x2 == r.box[2] && b.y2 == r.box[3] &&
              b.class_index == r.class_index)
            ++boxes_below;
    for (TaskId t : {TaskId::sem, TaskId::driv}) {
      PseudoMask pm = pseudo_mask(teachers[static_cast<size_t>(t)], s.image, pcfg);
      for (size_t i = 0; i < pm.mask.data.size(); ++i) {
        bool is_ignored = pm.mask.data[i] == pcfg.ignore_index;
        if (is_ignored) ++ignored;
        if (!is_ignored && pm.raw_scores[i] < pcfg.mask_score_threshold) ++kept_below;
      }
    }
  }
  MergedDataset merged =
      merge_labels(unlabeled, teachers[0], teachers[1], teachers[2], pcfg);
  int64_t not_available = 0;
  for (const auto& s : merged.data.samples)
    for (TaskId t : kAllTasks)
      if (!s.available(t)) ++not_available;

  if (boxes_below != 0) out.pass = false;
  if (kept_below != 0) out.pass = false;
  if (not_available != 0) out.pass = false;
  msg << boxes_emitted << " pseudo boxes (0 below 0.5 by raw-dump audit), " << kept_below
      << " kept mask pixels below 0.3, " << ignored << " ignored pixels, "
      << (not_available == 0 ? "merged availability 100%" : "merge left gaps");
  out.detail = msg.str();
  return out;
}

// ---------------------------------------------------------------------------
// 6. Scheduler properties

Outcome criterion6() {
  Outcome out;
  std::ostringstream msg;
  SceneSpec spec = tiny_scene(106);

  // exact periodicity over 300 steps
  {
    PartialDataset ds;
    ds.spec = spec;
    auto push = [&](std::array<bool, 3> avail, int n) {
      for (int i = 0; i < n; ++i) {
        ImageSample s;
        s.availability = avail;
        ds.samples.push_back(std::move(s));
      }
    };
    push({true, false, false}, 4);
    push({false, true, false}, 4);
    push({false, false, true}, 4);
    BatchScheduler sched(ScheduleKind::round_robin, ds, 2, 9);
    for (int step = 0; step < 300; ++step) {
      TaskId want = kAllTasks[static_cast<size_t>(step % 3)];
      auto batch = sched.next();
      for (const auto& item : batch)
        if (!item.loss_mask[static_cast<size_t>(want)] ||
            item.loss_mask[static_cast<size_t>(kAllTasks[static_cast<size_t>((step + 1) % 3)])]) {
          out.pass = false;
          msg << "round-robin broke periodicity at step " << step << "; ";
          step = 300;
          break;
        }
    }
    if (out.pass) msg << "round-robin exactly periodic over 300 steps; ";
  }

  // zeroing loss: unlabeled task heads receive exactly zero gradient
  {
    ModelConfig cfg = tiny_model(false);
    MultiTaskModel model = MultiTaskModel::build(cfg, spec, 19);
    ImageSample s = generate_scene(spec, 0);
    s.boxes.clear();
    s.drivable_mask = IntMask();
    s.availability = {false, true, false};  // sem only
    Tape tape;
    Ctx ctx(tape, model.params, model.trainable_finetune());
    MultiTaskModel::Forward fwd = model.forward(ctx, s.image);
    Var zero = tape.constant(Tensor::scalar(0.0));
    Var total = total_loss(zero, model.loss_for(fwd, s, TaskId::sem), zero, LossWeights{});
    tape.backward(total);
    bool clean = true;
    for (const auto& [name, var] : ctx.leaves())
      if (name.rfind("det_head.", 0) == 0 || name.rfind("seg_head.driv", 0) == 0)
        for (double g : tape.grad_of(var).data) clean = clean && g == 0.0;
    if (!clean) {
      out.pass = false;
      msg << "unlabeled-task gradients nonzero; ";
    } else {
      msg << "zeroing-loss gradients exactly zero for unlabeled heads; ";
    }
  }

  // weighted sampler frequencies at the 20:10:7 ratio
  {
    PartialDataset ds;
    ds.spec = spec;
    auto push = [&](std::array<bool, 3> avail, int n) {
      for (int i = 0; i < n; ++i) {
        ImageSample s;
        s.availability = avail;
        ds.samples.push_back(std::move(s));
      }
    };
    push({true, false, false}, 100);   // det
    push({false, true, false}, 70);    // sem
    push({false, false, true}, 200);   // driv
    BatchScheduler sched(ScheduleKind::weighted_sample, ds, 1, 23);
    const int kDraws = 10000;
    std::array<int64_t, 3> hits{0, 0, 0};
    for (int i = 0; i < kDraws; ++i) {
      auto batch = sched.next();
      for (size_t t = 0; t < 3; ++t)
        if (batch[0].loss_mask[t]) ++hits[t];
    }
    // (det, sem, driv) = (10, 7, 20)/37 = (0.270, 0.189, 0.541)
    std::array<double, 3> expect{10.0 / 37.0, 7.0 / 37.0, 20.0 / 37.0};
    for (size_t t = 0; t < 3; ++t) {
      double sigma = std::sqrt(expect[t] * (1 - expect[t]) / kDraws);
      double freq = static_cast<double>(hits[t]) / kDraws;
      if (std::fabs(freq - expect[t]) > 3 * sigma) {
        out.pass = false;
        msg << "sampler freq for task " << t << " off: " << freq << " vs " << expect[t] << "; ";
      }
    }
    if (out.pass)
      msg << "weighted sampler within 3 sigma of (0.541, 0.270, 0.189) over 10k draws";
  }
  out.detail = msg.str();
  return out;
}

// ---------------------------------------------------------------------------
// 7. Metric oracles

namespace c7 {

double ap_oracle(const DetEvalAccumulator& acc, int cls, double thr) {
  struct P {
    double score;
    size_t im, pi;
  };
  std::vector<P> ranked;
  int64_t num_gt = 0;
  for (size_t im = 0; im < acc.images.size(); ++im) {
    for (const auto& g : acc.images[im].gts)
      if (g.class_index == cls) ++num_gt;
    for (size_t pi = 0; pi < acc.images[im].preds.size(); ++pi)
      if (acc.images[im].preds[pi].class_index == cls)
        ranked.push_back({acc.images[im].preds[pi].score, im, pi});
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const P& a, const P& b) { return a.score > b.score; });
  std::vector<std::vector<char>> used(acc.images.size());
  for (size_t im = 0; im < acc.images.size(); ++im) used[im].assign(acc.images[im].gts.size(), 0);
  std::vector<double> prec, rec;
  int64_t tp = 0, fp = 0;
  for (const auto& r : ranked) {
    const auto& img = acc.images[r.im];
    const auto& p = img.preds[r.pi];
    double best = 0;
    int bg = -1;
    for (size_t g = 0; g < img.gts.size(); ++g) {
      if (img.gts[g].class_index != cls || used[r.im][g]) continue;
      double iou = box_iou(p.box, {img.gts[g].x1, img.gts[g].y1, img.gts[g].x2, img.gts[g].y2});
      if (iou > best) {
        best = iou;
        bg = static_cast<int>(g);
      }
    }
    if (bg >= 0 && best >= thr) {
      used[r.im][static_cast<size_t>(bg)] = 1;
      ++tp;
    } else {
      ++fp;
    }
    prec.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    rec.push_back(num_gt ? static_cast<double>(tp) / static_cast<double>(num_gt) : 0.0);
  }
  double ap = 0;
  for (int ri = 0; ri <= 100; ++ri) {
    double r = ri / 100.0;
    double best = 0;
    for (size_t i = 0; i < prec.size(); ++i)
      if (rec[i] >= r) best = std::max(best, prec[i]);
    ap += best;
  }
  return ap / 101.0;
}

}  // namespace c7

Outcome criterion7() {
  Outcome out;
  std::ostringstream msg;

  // hand-computed 2x2 case
  IntMask gt(2, 2), pred(2, 2);
  gt.at(0, 0) = 0;
  gt.at(0, 1) = 0;
  gt.at(1, 0) = 1;
  gt.at(1, 1) = 1;
  pred.at(0, 0) = 0;
  pred.at(0, 1) = 1;
  pred.at(1, 0) = 1;
  pred.at(1, 1) = 1;
  ConfusionMatrix cm(2);
  cm.add(pred, gt, kIgnoreIndex);
  SegMetrics m = seg_metrics(cm);
  bool miou_ok = m.miou && *m.miou == (1.0 / 2.0 + 2.0 / 3.0) / 2.0 &&
                 std::fabs(*m.miou - 7.0 / 12.0) < 1e-15;
  bool pacc_ok = m.pacc && *m.pacc == 3.0 / 4.0;
  if (!miou_ok || !pacc_ok) {
    out.pass = false;
    msg << "2x2 case mismatch (miou=" << (m.miou ? *m.miou : -1)
        << " pacc=" << (m.pacc ? *m.pacc : -1) << "); ";
  } else {
    msg << "2x2 case: mIoU = 7/12, pACC = 3/4 exactly; ";
  }

  // AP vs brute force on random small instances
  Rng rng(37);
  int checked = 0, mismatches = 0;
  for (int trial = 0; trial < 60; ++trial) {
    DetEvalAccumulator acc(2);
    int images = static_cast<int>(rng.uniform_int(1, 2));
    std::array<bool, 2> has_gt{false, false};
    for (int im = 0; im < images; ++im) {
      std::vector<BoxAnnotation> gts;
      std::vector<ScoredBox> preds;
      int ng = static_cast<int>(rng.uniform_int(1, 3));
      int np = static_cast<int>(rng.uniform_int(0, 4));
      for (int g = 0; g < ng; ++g) {
        double x1 = rng.uniform(0, 40), y1 = rng.uniform(0, 40);
        int cls = static_cast<int>(rng.uniform_int(0, 1));
        has_gt[static_cast<size_t>(cls)] = true;
        gts.push_back({x1, y1, x1 + rng.uniform(4, 20), y1 + rng.uniform(4, 20), cls});
      }
      for (int p = 0; p < np; ++p) {
        double x1 = rng.uniform(0, 40), y1 = rng.uniform(0, 40);
        preds.push_back({{x1, y1, x1 + rng.uniform(4, 20), y1 + rng.uniform(4, 20)},
                         rng.uniform(0.05, 1.0),
                         static_cast<int>(rng.uniform_int(0, 1))});
      }
      acc.add_image(preds, gts);
    }
    for (double thr : {0.5, 0.75}) {
      auto ap = average_precision(acc, thr);
      for (int c = 0; c < 2; ++c) {
        if (!has_gt[static_cast<size_t>(c)]) continue;
        ++checked;
        if (*ap[static_cast<size_t>(c)] != c7::ap_oracle(acc, c, thr)) ++mismatches;
      }
    }
  }
  if (mismatches > 0) {
    out.pass = false;
    msg << mismatches << "/" << checked << " AP instances diverge from brute force";
  } else {
    msg << "AP equals brute-force PR evaluation on " << checked << " small instances";
  }
  out.detail = msg.str();
  return out;
}

// ---------------------------------------------------------------------------
// 8. Attention oracles

Outcome criterion8() {
  Outcome out;
  std::ostringstream msg;
  double worst_pool = 0, worst_l2v = 0, worst_single = 0;

  // attention_pool vs dense oracle, identity projections, single head
  {
    VisionConfig vc = tiny_model(false).vision;
    vc.pool_heads = 1;
    int64_t C = vc.stage_channels[3];
    ParamStore ps;
    Rng rng(41);
    build_attention_pool(ps, vc, rng);
    for (const char* nm : {"pool.attn.q.w", "pool.attn.k.w", "pool.attn.v.w", "pool.attn.o.w"}) {
      Tensor& w = ps.at(nm);
      for (double& v : w.data) v = 0.0;
      for (int64_t i = 0; i < C; ++i) w.at(i, i) = 1.0;
    }
    for (const char* nm : {"pool.attn.q.b", "pool.attn.k.b", "pool.attn.v.b", "pool.attn.o.b"})
      for (double& v : ps.at(nm).data) v = 0.0;
    Rng xr(43);
    int64_t T = 4;
    Tensor tokens({T, C});
    for (double& v : tokens.data) v = xr.normal() * 0.5;
    Tape tape;
    Ctx ctx(tape, ps, train_none());
    PooledFeature pf = attention_pool(ctx, vc, tape.leaf(tokens, false));

    std::vector<std::vector<double>> seq(static_cast<size_t>(T + 1),
                                         std::vector<double>(static_cast<size_t>(C), 0.0));
    for (int64_t j = 0; j < C; ++j) {
      double mean = 0;
      for (int64_t i = 0; i < T; ++i) mean += tokens.at(i, j);
      seq[0][static_cast<size_t>(j)] = mean / static_cast<double>(T);
    }
    for (int64_t i = 0; i < T; ++i)
      for (int64_t j = 0; j < C; ++j)
        seq[static_cast<size_t>(i + 1)][static_cast<size_t>(j)] = tokens.at(i, j);
    const Tensor& got = V(pf.prenorm);
    for (int64_t i = 0; i <= T; ++i) {
      std::vector<double> scores(static_cast<size_t>(T + 1));
      double mx = -1e300;
      for (int64_t j = 0; j <= T; ++j) {
        double dot = 0;
        for (int64_t c = 0; c < C; ++c)
          dot += seq[static_cast<size_t>(i)][static_cast<size_t>(c)] *
                 seq[static_cast<size_t>(j)][static_cast<size_t>(c)];
        scores[static_cast<size_t>(j)] = dot / std::sqrt(static_cast<double>(C));
        mx = std::max(mx, scores[static_cast<size_t>(j)]);
      }
      double z = 0;
      for (double& s : scores) {
        s = std::exp(s - mx);
        z += s;
      }
      for (int64_t c = 0; c < C; ++c) {
        double mix = 0;
        for (int64_t j = 0; j <= T; ++j)
          mix += scores[static_cast<size_t>(j)] / z *
                 seq[static_cast<size_t>(j)][static_cast<size_t>(c)];
        worst_pool = std::max(
            worst_pool,
            std::fabs(got.at(i, c) - (seq[static_cast<size_t>(i)][static_cast<size_t>(c)] + mix)));
      }
    }
  }

  // single-layer l2v vs from-scratch cross-attention
  {
    LanguageConfig lc = tiny_model(true).language;
    lc.l2v_layers = 1;
    int64_t C = 8;
    ParamStore ps;
    build_text_encoder(ps, lc);
    Rng rng(47);
    build_l2v(ps, lc, C, rng);
    Rng xr(53);
    Tensor text({4, lc.text_dim}), z5({6, C});
    for (double& v : text.data) v = xr.normal() * 0.7;
    for (double& v : z5.data) v = xr.normal() * 0.7;
    Tape tape;
    Ctx ctx(tape, ps, train_none());
    Var adapted = l2v_adapt(ctx, lc, tape.leaf(text, false), tape.leaf(z5, false));

    // plain recomputation
    auto linear_p = [&](const std::vector<std::vector<double>>& x, const Tensor& w,
                        const Tensor& b) {
      std::vector<std::vector<double>> y(x.size(),
                                         std::vector<double>(static_cast<size_t>(w.dim(0))));
      for (size_t i = 0; i < x.size(); ++i)
        for (int64_t o = 0; o < w.dim(0); ++o) {
          double acc = b.data[static_cast<size_t>(o)];
          for (int64_t p = 0; p < w.dim(1); ++p) acc += x[i][static_cast<size_t>(p)] * w.at(o, p);
          y[i][static_cast<size_t>(o)] = acc;
        }
      return y;
    };
    auto ln_p = [&](const std::vector<std::vector<double>>& x, const Tensor& g, const Tensor& b) {
      auto y = x;
      size_t d = x[0].size();
      for (size_t i = 0; i < x.size(); ++i) {
        double mu = 0;
        for (double v : x[i]) mu += v;
        mu /= static_cast<double>(d);
        double var = 0;
        for (double v : x[i]) var += (v - mu) * (v - mu);
        var /= static_cast<double>(d);
        double inv = 1.0 / std::sqrt(var + 1e-5);
        for (size_t j = 0; j < d; ++j) y[i][j] = (x[i][j] - mu) * inv * g.data[j] + b.data[j];
      }
      return y;
    };
    auto tensor_rows = [&](const Tensor& t) {
      std::vector<std::vector<double>> m(static_cast<size_t>(t.dim(0)),
                                         std::vector<double>(static_cast<size_t>(t.dim(1))));
      for (int64_t i = 0; i < t.dim(0); ++i)
        for (int64_t j = 0; j < t.dim(1); ++j) m[static_cast<size_t>(i)][static_cast<size_t>(j)] = t.at(i, j);
      return m;
    };
    auto kv = linear_p(tensor_rows(text), ps.at("lang.proj.w"), ps.at("lang.proj.b"));
    auto x = tensor_rows(z5);
    std::string p = "lang.l2v.layer0";
    auto n1 = ln_p(x, ps.at(p + ".ln1.g"), ps.at(p + ".ln1.beta"));
    // attention with heads
    auto q = linear_p(n1, ps.at(p + ".attn.q.w"), ps.at(p + ".attn.q.b"));
    auto k = linear_p(kv, ps.at(p + ".attn.k.w"), ps.at(p + ".attn.k.b"));
    auto v = linear_p(kv, ps.at(p + ".attn.v.w"), ps.at(p + ".attn.v.b"));
    size_t heads = static_cast<size_t>(lc.l2v_heads), hd = q[0].size() / heads;
    std::vector<std::vector<double>> mixed(q.size(), std::vector<double>(q[0].size(), 0.0));
    for (size_t h = 0; h < heads; ++h) {
      size_t off = h * hd;
      for (size_t i = 0; i < q.size(); ++i) {
        std::vector<double> scores(k.size());
        double mx = -1e300;
        for (size_t j = 0; j < k.size(); ++j) {
          double dot = 0;
          for (size_t c = 0; c < hd; ++c) dot += q[i][off + c] * k[j][off + c];
          scores[j] = dot / std::sqrt(static_cast<double>(hd));
          mx = std::max(mx, scores[j]);
        }
        double z = 0;
        for (double& s : scores) {
          s = std::exp(s - mx);
          z += s;
        }
        for (size_t j = 0; j < k.size(); ++j)
          for (size_t c = 0; c < hd; ++c) mixed[i][off + c] += scores[j] / z * v[j][off + c];
      }
    }
    auto attn_out = linear_p(mixed, ps.at(p + ".attn.o.w"), ps.at(p + ".attn.o.b"));
    for (size_t i = 0; i < x.size(); ++i)
      for (size_t j = 0; j < x[0].size(); ++j) x[i][j] += attn_out[i][j];
    auto n2 = ln_p(x, ps.at(p + ".ln2.g"), ps.at(p + ".ln2.beta"));
    auto h1 = linear_p(n2, ps.at(p + ".ffn.fc1.w"), ps.at(p + ".ffn.fc1.b"));
    for (auto& row : h1)
      for (double& vv : row) vv = std::max(0.0, vv);
    auto h2 = linear_p(h1, ps.at(p + ".ffn.fc2.w"), ps.at(p + ".ffn.fc2.b"));
    for (size_t i = 0; i < x.size(); ++i)
      for (size_t j = 0; j < x[0].size(); ++j) x[i][j] += h2[i][j];
    const Tensor& got = V(adapted);
    for (int64_t i = 0; i < got.dim(0); ++i)
      for (int64_t j = 0; j < got.dim(1); ++j)
        worst_l2v = std::max(worst_l2v,
                             std::fabs(got.at(i, j) - x[static_cast<size_t>(i)][static_cast<size_t>(j)]));
  }

  // N=1 cross-attention: every output row equals the single value row
  {
    ParamStore ps;
    Rng rng(59);
    build_attention(ps, "xa", 8, rng);
    Tensor& ow = ps.at("xa.o.w");
    for (double& v : ow.data) v = 0.0;
    for (int64_t i = 0; i < 8; ++i) ow.at(i, i) = 1.0;
    for (double& v : ps.at("xa.o.b").data) v = 0.0;
    Rng xr(61);
    Tensor q({5, 8}), kv({1, 8});
    for (double& v : q.data) v = xr.normal();
    for (double& v : kv.data) v = xr.normal();
    Tape tape;
    Ctx ctx(tape, ps, train_none());
    Var outv = multihead_attention(ctx, "xa", tape.leaf(q, false), tape.leaf(kv, false), 2);
    Var vproj = dense(ctx, "xa.v", tape.leaf(kv, false));
    for (int64_t i = 0; i < 5; ++i)
      for (int64_t j = 0; j < 8; ++j)
        worst_single = std::max(worst_single, std::fabs(V(outv).at(i, j) - V(vproj).at(0, j)));
  }

  Outcome out2;
  out2.pass = worst_pool < 1e-6 && worst_l2v < 1e-6 && worst_single < 1e-12;
  std::ostringstream m2;
  m2 << "attention_pool abs err " << worst_pool << ", l2v abs err " << worst_l2v
     << ", single-key abs err " << worst_single;
  out2.detail = m2.str();
  (void)out;
  (void)msg;
  return out2;
}

// ---------------------------------------------------------------------------
// 9. Eq. 1 linearity

Outcome criterion9() {
  SceneSpec spec = tiny_scene(109);
  ModelConfig cfg = tiny_model(false);
  MultiTaskModel model = MultiTaskModel::build(cfg, spec, 29);
  ImageSample sample = generate_scene(spec, 1);

  auto grads_with = [&](double alpha_sem) {
    Tape tape;
    Ctx ctx(tape, model.params, model.trainable_finetune());
    MultiTaskModel::Forward fwd = model.forward(ctx, sample.image);
    LossWeights w;
    w.sem = alpha_sem;
    Var total = total_loss(model.loss_for(fwd, sample, TaskId::det),
                           model.loss_for(fwd, sample, TaskId::sem),
                           model.loss_for(fwd, sample, TaskId::driv), w);
    tape.backward(total);
    std::map<std::string, Tensor> g;
    for (const auto& [name, var] : ctx.leaves())
      if (name.rfind("seg_head.sem", 0) == 0) g[name] = tape.grad_of(var);
    return g;
  };
  auto g1 = grads_with(0.7);
  auto g2 = grads_with(1.4);
  Outcome out;
  int64_t checked = 0;
  for (const auto& [name, t1] : g1) {
    const Tensor& t2 = g2.at(name);
    for (int64_t i = 0; i < t1.numel(); ++i) {
      ++checked;
      if (t2.data[i] != 2.0 * t1.data[i]) {
        out.pass = false;
        out.detail = "entry " + name + "[" + std::to_string(i) + "] not exactly doubled";
        return out;
      }
    }
  }
  out.detail = "doubling alpha_sem doubled " + std::to_string(checked) +
               " seg-head gradient entries fp-exactly";
  return out;
}

// ---------------------------------------------------------------------------
// 10. Directional desk-scale experiment (soft)

Outcome criterion10() {
  Outcome out;
  out.gated = false;
  std::string dir = g_workdir + "/c10";
  fs::create_directories(dir);

  // desk defaults: 64x64 scenes, disjoint_normal at the 20:10:7 ratio. The
  // finetune rate is desk-calibrated: hot enough that direct finetuning can
  // churn the pretrained backbone while the heads are still random, which is
  // the failure mode the adapt stage addresses.
  ExperimentConfig cfg;
  cfg.budget = {1, 15};
  cfg.finetune_lr = 3e-4;
  cfg.model.heads.det_proposals = 24;
  cfg.teacher.epochs = 20;
  cfg.teacher.learning_rate = 5e-4;
  cfg.pretrain.steps = 400;
  cfg.pretrain.num_scenes = 16;

  generate_datasets(cfg, dir + "/data");
  pretrain_to_file(cfg, PretrainKind::contrastive_toy, 0, dir + "/pre.ckpt");
  teach(cfg, dir + "/data", dir + "/pre.ckpt", dir + "/data");

  const std::vector<uint64_t> seeds{0, 1, 2, 3, 4};
  auto mean_score = [&](const ExperimentConfig& c, Paradigm p, uint64_t seed,
                        const std::string& tag) {
    RunOutcome r = run_pipeline(c, p, dir + "/data", dir + "/pre.ckpt", seed,
                                dir + "/" + tag + "_s" + std::to_string(seed));
    return r.eval;
  };

  double paf_sum = 0, pf_sum = 0, learned_sum = 0, hand_sum = 0;
  for (uint64_t s : seeds) {
    paf_sum += mean_score(cfg, Paradigm::pretrain_adapt_finetune, s, "paf").mean_over_tasks().value_or(0);
    pf_sum += mean_score(cfg, Paradigm::pretrain_finetune, s, "pf").mean_over_tasks().value_or(0);
  }
  ExperimentConfig learned_cfg = cfg;
  learned_cfg.model.language.enabled = true;
  learned_cfg.model.language.prompt_mode = PromptMode::learned;
  ExperimentConfig hand_cfg = cfg;
  hand_cfg.model.language.enabled = true;
  hand_cfg.model.language.prompt_mode = PromptMode::handcrafted;
  for (uint64_t s : seeds) {
    learned_sum +=
        mean_score(learned_cfg, Paradigm::pretrain_adapt_finetune, s, "learned").sem.miou.value_or(0);
    hand_sum +=
        mean_score(hand_cfg, Paradigm::pretrain_adapt_finetune, s, "hand").sem.miou.value_or(0);
  }
  double n = static_cast<double>(seeds.size());
  bool paradigm_dir = paf_sum / n >= pf_sum / n;
  bool prompt_dir = learned_sum / n >= hand_sum / n;
  out.pass = paradigm_dir && prompt_dir;
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "mean-over-tasks: adapt-finetune %.4f vs finetune %.4f (%s); "
                "mIoU-SS: learned %.4f vs handcrafted %.4f (%s)",
                paf_sum / n, pf_sum / n, paradigm_dir ? "expected direction" : "reversed",
                learned_sum / n, hand_sum / n, prompt_dir ? "expected direction" : "reversed");
  out.detail = buf;
  return out;
}

// ---------------------------------------------------------------------------
// 11. Reproducibility

Outcome criterion11() {
  std::string dir = g_workdir + "/c11";
  fs::create_directories(dir);

  ExperimentConfig cfg;
  cfg.scene = tiny_scene(111);
  cfg.train_images = 12;
  cfg.val_images = 6;
  cfg.setting = {SettingKind::disjoint_balance, {4, 4, 4}};
  cfg.model = tiny_model(true);
  cfg.budget = {1, 2};
  cfg.pretrain.steps = 20;
  cfg.pretrain.num_scenes = 6;
  cfg.teacher.epochs = 1;

  generate_datasets(cfg, dir + "/data");
  pretrain_to_file(cfg, PretrainKind::contrastive_toy, 0, dir + "/pre.ckpt");
  teach(cfg, dir + "/data", dir + "/pre.ckpt", dir + "/data");
  RunOutcome a = run_pipeline(cfg, Paradigm::pretrain_adapt_finetune, dir + "/data",
                              dir + "/pre.ckpt", 0, dir + "/runA");
  RunOutcome b = run_pipeline(cfg, Paradigm::pretrain_adapt_finetune, dir + "/data",
                              dir + "/pre.ckpt", 0, dir + "/runB");
  Outcome out;
  bool metrics_same = read_file(a.metrics_path) == read_file(b.metrics_path);
  bool ckpt_same = read_file(a.final_checkpoint) == read_file(b.final_checkpoint);
  out.pass = metrics_same && ckpt_same;
  out.detail = std::string("metrics files ") + (metrics_same ? "bit-identical" : "DIFFER") +
               ", final checkpoints " + (ckpt_same ? "bit-identical" : "DIFFER");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  for (int i = 1; i < argc; ++i)
    if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) only = std::atoi(argv[i + 1]);

  g_workdir = (fs::temp_directory_path() / "mtl_acceptance").string();
  fs::remove_all(g_workdir);
  fs::create_directories(g_workdir);

  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> fn;
  };
  std::vector<Criterion> criteria{
      {1, "freeze integrity", criterion1},
      {2, "step parity", criterion2},
      {3, "gradient correctness", criterion3},
      {4, "normalization suite", criterion4},
      {5, "pseudo-label thresholds", criterion5},
      {6, "scheduler properties", criterion6},
      {7, "metric oracles", criterion7},
      {8, "attention oracles", criterion8},
      {9, "loss-weight linearity", criterion9},
      {10, "directional desk-scale experiment (soft)", criterion10},
      {11, "reproducibility", criterion11},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    if (only != 0 && c.id != only) continue;
    auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.fn();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const char* tag = o.pass ? "PASS" : (o.gated ? "FAIL" : "REPORT");
    std::printf("[%s] criterion %2d (%s): %s [%.1fs]\n", tag, c.id, c.name, o.detail.c_str(),
                secs);
    std::fflush(stdout);
    if (!o.pass && o.gated) ++failures;
  }
  if (failures > 0) {
    std::printf("%d gated criteria failed\n", failures);
    return 1;
  }
  std::printf("all gated criteria passed\n");
  return 0;
}
