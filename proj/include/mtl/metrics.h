#pragma once

#include <array>
#include <optional>
#include <vector>

#include "mtl/boxes.h"
#include "mtl/synthetic.h"

namespace mtl {

// K x K pixel counts (row = ground truth, col = prediction); pixels whose
// ground truth equals the ignore index are excluded. Mergeable for sharded
// evaluation.
struct ConfusionMatrix {
  int num_classes = 0;
  std::vector<int64_t> counts;

  explicit ConfusionMatrix(int k = 0)
      : num_classes(k), counts(static_cast<size_t>(k) * static_cast<size_t>(k), 0) {}
  int64_t& at(int gt, int pred) {
    return counts[static_cast<size_t>(gt) * static_cast<size_t>(num_classes) +
                  static_cast<size_t>(pred)];
  }
  int64_t at(int gt, int pred) const {
    return counts[static_cast<size_t>(gt) * static_cast<size_t>(num_classes) +
                  static_cast<size_t>(pred)];
  }
  void add(const IntMask& pred, const IntMask& gt, int ignore_index);
  void merge(const ConfusionMatrix& other);
};

// Undefined metrics (e.g. fully ignored ground truth) are reported as an
// absent optional, never as 0.
struct SegMetrics {
  std::optional<double> miou;
  std::optional<double> pacc;
  std::vector<std::optional<double>> per_class_iou;
};

SegMetrics seg_metrics(const ConfusionMatrix& cm);

struct ScoredBox {
  std::array<double, 4> box;  // pixel xyxy
  double score;
  int class_index;
};

// Collects per-image detections and ground truth for COCO-style evaluation.
struct DetEvalAccumulator {
  int num_classes = 0;
  struct Image {
    std::vector<ScoredBox> preds;
    std::vector<BoxAnnotation> gts;
  };
  std::vector<Image> images;

  explicit DetEvalAccumulator(int k = 0) : num_classes(k) {}
  void add_image(std::vector<ScoredBox> preds, std::vector<BoxAnnotation> gts) {
    images.push_back({std::move(preds), std::move(gts)});
  }
  void merge(const DetEvalAccumulator& other);
};

struct DetMetrics {
  std::optional<double> map;   // IoU 0.50:0.05:0.95
  std::optional<double> ap50;
  std::optional<double> ap75;
};

// Greedy score-ranked matching, 101-point interpolated AP, averaged over
// classes with at least one ground-truth box.
std::vector<std::optional<double>> average_precision(const DetEvalAccumulator& acc,
                                                     double iou_threshold);
std::optional<double> mean_average_precision(const DetEvalAccumulator& acc,
                                             double iou_threshold);
DetMetrics det_metrics(const DetEvalAccumulator& acc);

}  // namespace mtl
