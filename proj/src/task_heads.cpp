#include "mtl/task_heads.h"

#include <cmath>
#include <limits>

#include "mtl/error.h"

namespace mtl {

// ---------------------------------------------------------------------------
// segmentation head

void build_seg_head(ParamStore& ps, const std::string& prefix, const VisionConfig& vcfg,
                    const HeadConfig& hcfg, int num_classes, Rng& rng) {
  int64_t c = vcfg.fpn_channels;
  for (int i = 5; i >= 2; --i) {
    build_conv(ps, prefix + ".pix" + std::to_string(i), c, c, 3, rng);
    build_gn(ps, prefix + ".pix" + std::to_string(i) + "_gn", c);
  }
  init_normal(ps.add(prefix + ".queries", {hcfg.seg_queries, c}), rng, 0.5);
  for (int l = 0; l < hcfg.seg_decoder_layers; ++l)
    build_decoder_layer(ps, prefix + ".dec" + std::to_string(l), c, 4 * c, rng);
  build_layer_norm(ps, prefix + ".dec_ln", c);
  build_ffn(ps, prefix + ".mask_mlp", c, c, rng);
  build_linear(ps, prefix + ".cls", c, num_classes + 1, rng);
}

SegPrediction seg_head_forward(Ctx& ctx, const std::string& prefix, const VisionConfig& vcfg,
                               const HeadConfig& hcfg, const PyramidFeatures& pyr,
                               int num_classes) {
  int g = vcfg.gn_groups;
  // pixel decoder: P5 -> P2 by upsample-add, 3x3 conv at each level
  Var y = relu(gn(ctx, prefix + ".pix5_gn", conv(ctx, prefix + ".pix5", pyr.p5, 1, 1), g));
  std::array<Var, 3> lower{pyr.p4, pyr.p3, pyr.p2};
  for (int i = 0; i < 3; ++i) {
    std::string p = prefix + ".pix" + std::to_string(4 - i);
    Var fused = add(upsample_nearest2x(y), lower[static_cast<size_t>(i)]);
    y = relu(gn(ctx, p + "_gn", conv(ctx, p, fused, 1, 1), g));
  }
  SegPrediction out;
  out.pixel_embeddings = y;
  out.h4 = V(y).dim(1);
  out.w4 = V(y).dim(2);

  // transformer decoder over flattened P5
  Var kv = chw_to_tokens(pyr.p5);
  Var q = ctx.p(prefix + ".queries");
  for (int l = 0; l < hcfg.seg_decoder_layers; ++l)
    q = decoder_layer(ctx, prefix + ".dec" + std::to_string(l), q, kv, hcfg.seg_heads);
  q = layer_norm(ctx, prefix + ".dec_ln", q);

  out.mask_embeddings = ffn(ctx, prefix + ".mask_mlp", q);
  out.class_logits = dense(ctx, prefix + ".cls", q);
  check_model(V(out.class_logits).dim(1) == num_classes + 1, "seg head class count mismatch");
  Var pix_tokens = chw_to_tokens(out.pixel_embeddings);
  out.mask_logits = matmul(out.mask_embeddings, transpose(pix_tokens));
  return out;
}

Var seg_pixel_scores(const SegPrediction& pred, int num_classes) {
  Var cls = softmax_rows(pred.class_logits);          // (Q, K+1)
  Var cls_k = slice_cols(cls, 0, num_classes);        // drop no-object
  Var m = sigmoid(pred.mask_logits);                  // (Q, P)
  return matmul(transpose(cls_k), m);                 // (K, P)
}

Var seg_loss(const SegPrediction& pred, const IntMask& mask, int ignore_index) {
  check_model(mask.h == pred.h4 * 4 && mask.w == pred.w4 * 4,
              "seg_loss: mask resolution does not match predictions");
  std::vector<int> labels(static_cast<size_t>(pred.h4 * pred.w4));
  for (int64_t y = 0; y < pred.h4; ++y)
    for (int64_t x = 0; x < pred.w4; ++x)
      labels[static_cast<size_t>(y * pred.w4 + x)] = mask.at(y * 4, x * 4);
  int num_classes = static_cast<int>(V(pred.class_logits).dim(1)) - 1;
  Var scores = seg_pixel_scores(pred, num_classes);
  return seg_pixel_nll(scores, labels, ignore_index);
}

// ---------------------------------------------------------------------------
// detection head

namespace {

double logit(double p) { return std::log(p / (1.0 - p)); }

std::string stage_p(const std::string& prefix, int s) {
  return prefix + ".st" + std::to_string(s);
}

// FPN level for a box, by its pixel scale (smaller boxes pool from finer levels).
int level_for_box(double w_norm, double h_norm, int64_t image_h, int64_t image_w) {
  double s = std::sqrt(std::max(1e-12, w_norm * h_norm) * static_cast<double>(image_h) *
                       static_cast<double>(image_w));
  if (s < 16) return 0;  // P2
  if (s < 32) return 1;  // P3
  if (s < 64) return 2;  // P4
  return 3;              // P5
}

}  // namespace

void build_det_head(ParamStore& ps, const std::string& prefix, const VisionConfig& vcfg,
                    const HeadConfig& hcfg, int num_classes, Rng& rng) {
  int64_t c = vcfg.fpn_channels, d = hcfg.det_hidden, m = hcfg.det_dyn_mid;
  int64_t grid2 = static_cast<int64_t>(hcfg.det_pool_grid) * hcfg.det_pool_grid;
  // raw proposal boxes pass through a sigmoid, so w,h stay positive under any
  // optimizer trajectory
  Tensor& raw = ps.add(prefix + ".pboxes", {hcfg.det_proposals, 4});
  for (int64_t r = 0; r < hcfg.det_proposals; ++r) {
    raw.at(r, 0) = quantize_f32(logit(rng.uniform(0.30, 0.70)));
    raw.at(r, 1) = quantize_f32(logit(rng.uniform(0.30, 0.70)));
    raw.at(r, 2) = quantize_f32(logit(rng.uniform(0.35, 0.75)));
    raw.at(r, 3) = quantize_f32(logit(rng.uniform(0.35, 0.75)));
  }
  init_normal(ps.add(prefix + ".pfeat", {hcfg.det_proposals, d}), rng, 0.5);
  for (int s = 0; s < hcfg.det_stages; ++s) {
    std::string sp = stage_p(prefix, s);
    build_linear(ps, sp + ".dyn", d, c * m + m * c, rng);
    build_layer_norm(ps, sp + ".n1", m);
    build_layer_norm(ps, sp + ".n2", c);
    build_linear(ps, sp + ".obj", grid2 * c, d, rng);
    build_layer_norm(ps, sp + ".obj_ln", d);
    build_linear(ps, sp + ".cls", d, num_classes + 1, rng);
    // zero-initialized refinement: the cascade starts as the identity on boxes
    build_linear_zero(ps, sp + ".delta", d, 4);
  }
}

DetPrediction det_head_forward(Ctx& ctx, const std::string& prefix, const VisionConfig& vcfg,
                               const HeadConfig& hcfg, const PyramidFeatures& pyr) {
  check_model(hcfg.det_stages >= 1, "det head needs at least one cascade stage");
  int64_t c = vcfg.fpn_channels, m = hcfg.det_dyn_mid;
  int R = hcfg.det_proposals, S = hcfg.det_pool_grid;
  int64_t grid2 = static_cast<int64_t>(S) * S;
  int64_t image_h = V(pyr.p2).dim(1) * 4, image_w = V(pyr.p2).dim(2) * 4;
  std::array<Var, 4> levels{pyr.p2, pyr.p3, pyr.p4, pyr.p5};

  Var boxes = sigmoid(ctx.p(prefix + ".pboxes"));  // (R,4) cxcywh in (0,1)
  Var feats = ctx.p(prefix + ".pfeat");            // (R,d)
  Var cls_logits{};
  for (int s = 0; s < hcfg.det_stages; ++s) {
    std::string sp = stage_p(prefix, s);
    Var dyn_all = dense(ctx, sp + ".dyn", feats);  // (R, c*m + m*c)
    Var obj{};
    for (int r = 0; r < R; ++r) {
      Var box_r = slice_rows(boxes, r, 1);
      const Tensor& bv = V(box_r);
      int lvl = level_for_box(bv.data[2], bv.data[3], image_h, image_w);
      Var pooled = region_pool(levels[static_cast<size_t>(lvl)], box_r, S);  // (S^2, c)
      Var wvec = slice_rows(dyn_all, r, 1);
      Var w1 = reshape(slice_cols(wvec, 0, c * m), {c, m});
      Var w2 = reshape(slice_cols(wvec, c * m, m * c), {m, c});
      Var t1 = relu(layer_norm(ctx, sp + ".n1", matmul(pooled, w1)));
      Var t2 = relu(layer_norm(ctx, sp + ".n2", matmul(t1, w2)));
      Var obj_r = relu(layer_norm(ctx, sp + ".obj_ln",
                                  dense(ctx, sp + ".obj", reshape(t2, {1, grid2 * c}))));
      obj = (r == 0) ? obj_r : concat_rows(obj, obj_r);
    }
    cls_logits = dense(ctx, sp + ".cls", obj);
    Var deltas = dense(ctx, sp + ".delta", obj);
    // decode: centers shift by delta * size, sizes scale by exp(delta)
    Var cx = slice_cols(boxes, 0, 1), cy = slice_cols(boxes, 1, 1);
    Var bw = slice_cols(boxes, 2, 1), bh = slice_cols(boxes, 3, 1);
    Var dx = slice_cols(deltas, 0, 1), dy = slice_cols(deltas, 1, 1);
    Var dw = slice_cols(deltas, 2, 1), dh = slice_cols(deltas, 3, 1);
    Var ncx = add(cx, mul(dx, bw));
    Var ncy = add(cy, mul(dy, bh));
    Var nw = mul(bw, mtl::exp(dw));
    Var nh = mul(bh, mtl::exp(dh));
    boxes = concat_cols(concat_cols(ncx, ncy), concat_cols(nw, nh));
    feats = obj;
  }
  return DetPrediction{boxes, cls_logits};
}

// ---------------------------------------------------------------------------
// matching and losses

std::vector<int> hungarian(const std::vector<std::vector<double>>& cost) {
  int n = static_cast<int>(cost.size());
  if (n == 0) return {};
  int m = static_cast<int>(cost[0].size());
  check_model(n <= m, "hungarian: more rows than columns");
  const double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<size_t>(n) + 1, 0.0), v(static_cast<size_t>(m) + 1, 0.0);
  std::vector<int> p(static_cast<size_t>(m) + 1, 0), way(static_cast<size_t>(m) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(m) + 1, kInf);
    std::vector<char> used(static_cast<size_t>(m) + 1, 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      int i0 = p[static_cast<size_t>(j0)], j1 = -1;
      double delta = kInf;
      for (int j = 1; j <= m; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        double cur = cost[static_cast<size_t>(i0) - 1][static_cast<size_t>(j) - 1] -
                     u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      int j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> ans(static_cast<size_t>(n), -1);
  for (int j = 1; j <= m; ++j)
    if (p[static_cast<size_t>(j)] > 0) ans[static_cast<size_t>(p[static_cast<size_t>(j)]) - 1] = j - 1;
  return ans;
}

double det_match_cost(const std::array<double, 4>& pred_cxcywh, const double* class_probs,
                      int gt_class, const std::array<double, 4>& gt_cxcywh) {
  double l1 = 0;
  for (int i = 0; i < 4; ++i) l1 += std::fabs(pred_cxcywh[static_cast<size_t>(i)] -
                                              gt_cxcywh[static_cast<size_t>(i)]);
  double giou = box_giou(cxcywh_to_xyxy(pred_cxcywh), cxcywh_to_xyxy(gt_cxcywh));
  return -std::log(class_probs[gt_class] + 1e-12) + 5.0 * l1 + 2.0 * (1.0 - giou);
}

Var giou_pair(Var pred_cxcywh_row, const std::array<double, 4>& gt_cxcywh) {
  check_model(V(pred_cxcywh_row).numel() == 4, "giou_pair: pred must have 4 entries");
  auto g = cxcywh_to_xyxy(gt_cxcywh);
  Var cx = slice_cols(pred_cxcywh_row, 0, 1), cy = slice_cols(pred_cxcywh_row, 1, 1);
  Var w = slice_cols(pred_cxcywh_row, 2, 1), h = slice_cols(pred_cxcywh_row, 3, 1);
  Var px1 = sub(cx, scale(w, 0.5)), px2 = add(cx, scale(w, 0.5));
  Var py1 = sub(cy, scale(h, 0.5)), py2 = add(cy, scale(h, 0.5));
  Var iw = relu(sub(min_const(px2, g[2]), max_const(px1, g[0])));
  Var ih = relu(sub(min_const(py2, g[3]), max_const(py1, g[1])));
  Var inter = mul(iw, ih);
  Var area_p = mul(sub(px2, px1), sub(py2, py1));
  double area_g = (g[2] - g[0]) * (g[3] - g[1]);
  Var uni = sub(add_const(area_p, area_g), inter);
  Var iou = div(inter, uni);
  Var ew = sub(max_const(px2, g[2]), min_const(px1, g[0]));
  Var eh = sub(max_const(py2, g[3]), min_const(py1, g[1]));
  Var enclose = mul(ew, eh);
  Var giou = sub(iou, div(sub(enclose, uni), enclose));
  return sum_all(giou);
}

Var det_loss(const DetPrediction& pred, const std::vector<BoxAnnotation>& gts,
             int64_t image_h, int64_t image_w, int num_classes) {
  const Tensor& logits_v = V(pred.class_logits);
  const Tensor& boxes_v = V(pred.boxes);
  int R = static_cast<int>(logits_v.dim(0));
  int K = static_cast<int>(logits_v.dim(1)) - 1;
  check_model(K == num_classes, "det_loss: class count mismatch");
  int G = static_cast<int>(gts.size());
  Tape* tape = pred.class_logits.tape;

  std::vector<int> targets(static_cast<size_t>(R), K);  // default no-object
  std::vector<std::array<double, 4>> gt_cxcywh(static_cast<size_t>(G));
  for (int g = 0; g < G; ++g) {
    const auto& b = gts[static_cast<size_t>(g)];
    gt_cxcywh[static_cast<size_t>(g)] =
        xyxy_to_cxcywh({b.x1 / static_cast<double>(image_w), b.y1 / static_cast<double>(image_h),
                        b.x2 / static_cast<double>(image_w), b.y2 / static_cast<double>(image_h)});
  }

  std::vector<int> assignment;
  if (G > 0) {
    check_model(G <= R, "det_loss: more ground-truth boxes than proposals");
    // class probabilities (values only; matching is not differentiated)
    std::vector<std::vector<double>> probs(static_cast<size_t>(R),
                                           std::vector<double>(static_cast<size_t>(K) + 1));
    for (int r = 0; r < R; ++r) {
      double mx = logits_v.at(r, 0);
      for (int j = 1; j <= K; ++j) mx = std::max(mx, logits_v.at(r, j));
      double z = 0;
      for (int j = 0; j <= K; ++j) {
        probs[static_cast<size_t>(r)][static_cast<size_t>(j)] = std::exp(logits_v.at(r, j) - mx);
        z += probs[static_cast<size_t>(r)][static_cast<size_t>(j)];
      }
      for (int j = 0; j <= K; ++j) probs[static_cast<size_t>(r)][static_cast<size_t>(j)] /= z;
    }
    std::vector<std::vector<double>> cost(static_cast<size_t>(G),
                                          std::vector<double>(static_cast<size_t>(R)));
    for (int g = 0; g < G; ++g) {
      for (int r = 0; r < R; ++r) {
        std::array<double, 4> pb{boxes_v.at(r, 0), boxes_v.at(r, 1), boxes_v.at(r, 2),
                                 boxes_v.at(r, 3)};
        cost[static_cast<size_t>(g)][static_cast<size_t>(r)] =
            det_match_cost(pb, probs[static_cast<size_t>(r)].data(),
                           gts[static_cast<size_t>(g)].class_index, gt_cxcywh[static_cast<size_t>(g)]);
      }
    }
    assignment = hungarian(cost);
    for (int g = 0; g < G; ++g)
      targets[static_cast<size_t>(assignment[static_cast<size_t>(g)])] =
          gts[static_cast<size_t>(g)].class_index;
  }

  Var loss = cross_entropy_mean(pred.class_logits, targets);
  if (G > 0) {
    Var box_terms{};
    for (int g = 0; g < G; ++g) {
      int r = assignment[static_cast<size_t>(g)];
      Var prow = slice_rows(pred.boxes, r, 1);
      Tensor gt_t({1, 4});
      for (int i = 0; i < 4; ++i) gt_t.data[static_cast<size_t>(i)] = gt_cxcywh[static_cast<size_t>(g)][static_cast<size_t>(i)];
      Var l1 = sum_all(mtl::abs(sub(prow, tape->constant(gt_t))));
      Var giou = giou_pair(prow, gt_cxcywh[static_cast<size_t>(g)]);
      Var term = add(scale(l1, 5.0), scale(add_const(scale(giou, -1.0), 1.0), 2.0));
      box_terms = (g == 0) ? term : add(box_terms, term);
    }
    loss = add(loss, scale(box_terms, 1.0 / static_cast<double>(G)));
  }
  return loss;
}

Var total_loss(Var l_det, Var l_sem, Var l_driv, const LossWeights& w) {
  check_model(w.det >= 0 && w.sem >= 0 && w.driv >= 0 && std::isfinite(w.det) &&
                  std::isfinite(w.sem) && std::isfinite(w.driv),
              "total_loss: weights must be finite and nonnegative");
  double ld = V(l_det).data[0], ls = V(l_sem).data[0], lv = V(l_driv).data[0];
  if (!std::isfinite(ld) || !std::isfinite(ls) || !std::isfinite(lv))
    throw TrainingAbort("non-finite task loss: det=" + std::to_string(ld) +
                        " sem=" + std::to_string(ls) + " driv=" + std::to_string(lv));
  return add(add(scale(l_det, w.det), scale(l_sem, w.sem)), scale(l_driv, w.driv));
}

}  // namespace mtl
