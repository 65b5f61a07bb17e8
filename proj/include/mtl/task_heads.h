#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mtl/boxes.h"
#include "mtl/model_core.h"
#include "mtl/synthetic.h"

namespace mtl {

struct HeadConfig {
  int seg_queries = 20;
  int seg_decoder_layers = 2;
  int seg_heads = 4;
  int det_proposals = 50;
  int det_stages = 2;
  int64_t det_hidden = 64;
  int det_pool_grid = 3;
  int64_t det_dyn_mid = 8;
};

// Query-based mask-classification prediction. mask_logits[q] is the inner
// product of mask_embeddings[q] with each pixel embedding.
struct SegPrediction {
  Var pixel_embeddings;  // (C, H/4, W/4)
  Var mask_embeddings;   // (Q, C)
  Var class_logits;      // (Q, num_classes + 1), last slot = no-object
  Var mask_logits;       // (Q, H/4 * W/4)
  int64_t h4 = 0, w4 = 0;
};

struct DetPrediction {
  Var boxes;         // (R, 4) normalized (cx, cy, w, h)
  Var class_logits;  // (R, num_classes + 1)
};

struct LossWeights {
  double det = 1.0, sem = 0.7, driv = 0.7;
};

void build_seg_head(ParamStore& ps, const std::string& prefix, const VisionConfig& vcfg,
                    const HeadConfig& hcfg, int num_classes, Rng& rng);
SegPrediction seg_head_forward(Ctx& ctx, const std::string& prefix, const VisionConfig& vcfg,
                               const HeadConfig& hcfg, const PyramidFeatures& pyr,
                               int num_classes);

void build_det_head(ParamStore& ps, const std::string& prefix, const VisionConfig& vcfg,
                    const HeadConfig& hcfg, int num_classes, Rng& rng);
DetPrediction det_head_forward(Ctx& ctx, const std::string& prefix, const VisionConfig& vcfg,
                               const HeadConfig& hcfg, const PyramidFeatures& pyr);

// Per-pixel mixture NLL over a ground-truth mask (full resolution; the op
// downsamples to stride 4 by nearest neighbor). All-ignored masks yield a
// constant 0 with no gradient.
Var seg_loss(const SegPrediction& pred, const IntMask& mask, int ignore_index);

// The (K,P) mixture score field used by both seg_loss and pseudo-mask
// confidence: softmax over classes (no-object dropped) weighted by
// sigmoid(mask logits), summed over queries.
Var seg_pixel_scores(const SegPrediction& pred, int num_classes);

// Set-prediction loss: optimal one-to-one matching on
// (-log p_class + 5*L1 + 2*(1-gIoU)), matched proposals pay class and box
// terms, unmatched pay the no-object class. GT boxes are pixel xyxy.
Var det_loss(const DetPrediction& pred, const std::vector<BoxAnnotation>& gts,
             int64_t image_h, int64_t image_w, int num_classes);

// Eq-style weighted multi-task total. Throws TrainingAbort on non-finite
// inputs.
Var total_loss(Var l_det, Var l_sem, Var l_driv, const LossWeights& w);

// Optimal assignment for a GxR cost matrix (G <= R): returns, per row, the
// assigned column, minimizing total cost. Exposed for the oracle tests.
std::vector<int> hungarian(const std::vector<std::vector<double>>& cost);

// Matching cost actually used by det_loss, exposed for tests.
double det_match_cost(const std::array<double, 4>& pred_cxcywh, const double* class_probs,
                      int gt_class, const std::array<double, 4>& gt_cxcywh);

// Differentiable gIoU between a predicted box var (1,4) cxcywh and a fixed
// ground-truth cxcywh box.
Var giou_pair(Var pred_cxcywh_row, const std::array<double, 4>& gt_cxcywh);

}  // namespace mtl
