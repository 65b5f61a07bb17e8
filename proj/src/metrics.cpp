#include "mtl/metrics.h"

#include <algorithm>
#include <cmath>

#include "mtl/error.h"

namespace mtl {

void ConfusionMatrix::add(const IntMask& pred, const IntMask& gt, int ignore_index) {
  check_model(pred.h == gt.h && pred.w == gt.w, "confusion: shape mismatch");
  for (size_t i = 0; i < gt.data.size(); ++i) {
    int g = gt.data[i];
    if (g == ignore_index) continue;
    int p = pred.data[i];
    check_model(g >= 0 && g < num_classes && p >= 0 && p < num_classes,
                "confusion: class index out of range");
    at(g, p) += 1;
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  check_model(num_classes == other.num_classes, "confusion: merge class mismatch");
  for (size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
}

SegMetrics seg_metrics(const ConfusionMatrix& cm) {
  SegMetrics out;
  int k = cm.num_classes;
  out.per_class_iou.assign(static_cast<size_t>(k), std::nullopt);
  int64_t total = 0, correct = 0;
  for (int g = 0; g < k; ++g)
    for (int p = 0; p < k; ++p) {
      total += cm.at(g, p);
      if (g == p) correct += cm.at(g, p);
    }
  if (total == 0) return out;  // undefined, not zero
  out.pacc = static_cast<double>(correct) / static_cast<double>(total);
  double iou_sum = 0;
  int present = 0;
  for (int c = 0; c < k; ++c) {
    int64_t gt_c = 0, pred_c = 0;
    for (int j = 0; j < k; ++j) {
      gt_c += cm.at(c, j);
      pred_c += cm.at(j, c);
    }
    int64_t tp = cm.at(c, c);
    int64_t uni = gt_c + pred_c - tp;
    if (uni == 0) continue;  // absent from both GT and prediction
    double iou = static_cast<double>(tp) / static_cast<double>(uni);
    out.per_class_iou[static_cast<size_t>(c)] = iou;
    iou_sum += iou;
    ++present;
  }
  if (present > 0) out.miou = iou_sum / present;
  return out;
}

void DetEvalAccumulator::merge(const DetEvalAccumulator& other) {
  check_model(num_classes == other.num_classes, "det eval: merge class mismatch");
  images.insert(images.end(), other.images.begin(), other.images.end());
}

namespace {

// 101-point interpolated AP from a ranked TP/FP sequence.
double interpolated_ap(const std::vector<char>& tp_flags, int64_t num_gt) {
  std::vector<double> precision, recall;
  int64_t tp = 0, fp = 0;
  for (char f : tp_flags) {
    if (f) ++tp;
    else ++fp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
  }
  // running max of precision from the right
  for (int64_t i = static_cast<int64_t>(precision.size()) - 2; i >= 0; --i)
    precision[static_cast<size_t>(i)] =
        std::max(precision[static_cast<size_t>(i)], precision[static_cast<size_t>(i) + 1]);
  double ap = 0;
  size_t idx = 0;
  for (int r = 0; r <= 100; ++r) {
    double rec = static_cast<double>(r) / 100.0;
    while (idx < recall.size() && recall[idx] < rec) ++idx;
    ap += idx < precision.size() ? precision[idx] : 0.0;
  }
  return ap / 101.0;
}

}  // namespace

std::vector<std::optional<double>> average_precision(const DetEvalAccumulator& acc,
                                                     double iou_threshold) {
  int k = acc.num_classes;
  std::vector<std::optional<double>> out(static_cast<size_t>(k), std::nullopt);
  for (int c = 0; c < k; ++c) {
    struct Ranked {
      double score;
      size_t image;
      size_t pred_index;
    };
    std::vector<Ranked> ranked;
    int64_t num_gt = 0;
    for (size_t im = 0; im < acc.images.size(); ++im) {
      for (const auto& g : acc.images[im].gts)
        if (g.class_index == c) ++num_gt;
      for (size_t pi = 0; pi < acc.images[im].preds.size(); ++pi)
        if (acc.images[im].preds[pi].class_index == c)
          ranked.push_back({acc.images[im].preds[pi].score, im, pi});
    }
    if (num_gt == 0) continue;  // class absent from ground truth: excluded from the mean
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const Ranked& a, const Ranked& b) { return a.score > b.score; });
    // greedy matching of each ranked prediction to an unmatched GT with IoU >= t
    std::vector<std::vector<char>> gt_used(acc.images.size());
    for (size_t im = 0; im < acc.images.size(); ++im)
      gt_used[im].assign(acc.images[im].gts.size(), 0);
    std::vector<char> tp_flags;
    for (const auto& r : ranked) {
      const auto& img = acc.images[r.image];
      const ScoredBox& p = img.preds[r.pred_index];
      double best_iou = 0;
      int best_g = -1;
      for (size_t g = 0; g < img.gts.size(); ++g) {
        if (img.gts[g].class_index != c || gt_used[r.image][g]) continue;
        double iou = box_iou(p.box, {img.gts[g].x1, img.gts[g].y1, img.gts[g].x2, img.gts[g].y2});
        if (iou > best_iou) {
          best_iou = iou;
          best_g = static_cast<int>(g);
        }
      }
      if (best_g >= 0 && best_iou >= iou_threshold) {
        gt_used[r.image][static_cast<size_t>(best_g)] = 1;
        tp_flags.push_back(1);
      } else {
        tp_flags.push_back(0);
      }
    }
    out[static_cast<size_t>(c)] = interpolated_ap(tp_flags, num_gt);
  }
  return out;
}

std::optional<double> mean_average_precision(const DetEvalAccumulator& acc,
                                             double iou_threshold) {
  auto per_class = average_precision(acc, iou_threshold);
  double sum = 0;
  int n = 0;
  for (const auto& ap : per_class)
    if (ap) {
      sum += *ap;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / n;
}

DetMetrics det_metrics(const DetEvalAccumulator& acc) {
  DetMetrics out;
  double sum = 0;
  int n = 0;
  for (int i = 0; i <= 9; ++i) {
    double thr = 0.5 + 0.05 * i;
    auto m = mean_average_precision(acc, thr);
    if (!m) return out;  // no ground truth anywhere
    sum += *m;
    ++n;
    if (i == 0) out.ap50 = *m;
    if (i == 5) out.ap75 = *m;
  }
  out.map = sum / n;
  return out;
}

}  // namespace mtl
