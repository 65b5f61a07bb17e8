#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "mtl/metrics.h"
#include "mtl/rng.h"

using namespace mtl;

namespace {

// Independent AP oracle: same greedy matching by explicit loops, interpolation
// computed naively per recall point.
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
  REQUIRE(num_gt > 0);
  std::stable_sort(ranked.begin(), ranked.end(), [](const P& a, const P& b) { return a.score > b.score; });
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
    rec.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
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

}  // namespace

TEST_CASE("hand-computed 2x2 confusion case: mIoU 7/12, pACC 3/4") {
  // gt=[[0,0],[1,1]], pred=[[0,1],[1,1]]
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
  REQUIRE(m.miou.has_value());
  REQUIRE(m.pacc.has_value());
  // IoU0 = 1/2, IoU1 = 2/3; identical arithmetic to the hand computation
  CHECK(*m.per_class_iou[0] == 1.0 / 2.0);
  CHECK(*m.per_class_iou[1] == 2.0 / 3.0);
  CHECK(*m.miou == (1.0 / 2.0 + 2.0 / 3.0) / 2.0);
  CHECK(std::fabs(*m.miou - 7.0 / 12.0) < 1e-15);
  CHECK(*m.pacc == 3.0 / 4.0);
}

TEST_CASE("perfect prediction gives mIoU 1 and diagonal confusion") {
  Rng rng(1);
  IntMask gt(8, 8);
  for (auto& v : gt.data) v = static_cast<int32_t>(rng.uniform_int(0, 3));
  ConfusionMatrix cm(4);
  cm.add(gt, gt, kIgnoreIndex);
  for (int g = 0; g < 4; ++g)
    for (int p = 0; p < 4; ++p)
      if (g != p) CHECK(cm.at(g, p) == 0);
  SegMetrics m = seg_metrics(cm);
  CHECK(*m.miou == 1.0);
  CHECK(*m.pacc == 1.0);
}

TEST_CASE("all-ignored ground truth reports undefined metrics, not zero") {
  IntMask gt(4, 4, kIgnoreIndex), pred(4, 4, 0);
  ConfusionMatrix cm(3);
  cm.add(pred, gt, kIgnoreIndex);
  SegMetrics m = seg_metrics(cm);
  CHECK(!m.miou.has_value());
  CHECK(!m.pacc.has_value());
}

TEST_CASE("classes absent from GT and prediction are excluded from the mean") {
  IntMask gt(2, 2, 0), pred(2, 2, 0);
  ConfusionMatrix cm(5);
  cm.add(pred, gt, kIgnoreIndex);
  SegMetrics m = seg_metrics(cm);
  CHECK(*m.miou == 1.0);  // only class 0 present
  for (int c = 1; c < 5; ++c) CHECK(!m.per_class_iou[static_cast<size_t>(c)].has_value());
}

TEST_CASE("confusion accumulators merge associatively") {
  Rng rng(2);
  ConfusionMatrix all(4), a(4), b(4);
  for (int i = 0; i < 6; ++i) {
    IntMask gt(4, 4), pred(4, 4);
    for (auto& v : gt.data) v = static_cast<int32_t>(rng.uniform_int(0, 3));
    for (auto& v : pred.data) v = static_cast<int32_t>(rng.uniform_int(0, 3));
    all.add(pred, gt, kIgnoreIndex);
    (i % 2 == 0 ? a : b).add(pred, gt, kIgnoreIndex);
  }
  a.merge(b);
  CHECK(a.counts == all.counts);
}

TEST_CASE("relabeling a wrong pixel to correct never decreases mIoU") {
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    IntMask gt(6, 6), pred(6, 6);
    for (auto& v : gt.data) v = static_cast<int32_t>(rng.uniform_int(0, 2));
    for (auto& v : pred.data) v = static_cast<int32_t>(rng.uniform_int(0, 2));
    ConfusionMatrix cm(3);
    cm.add(pred, gt, kIgnoreIndex);
    double before = seg_metrics(cm).miou.value();
    // fix the first wrong pixel
    for (size_t i = 0; i < gt.data.size(); ++i) {
      if (pred.data[i] != gt.data[i]) {
        pred.data[i] = gt.data[i];
        break;
      }
    }
    ConfusionMatrix cm2(3);
    cm2.add(pred, gt, kIgnoreIndex);
    CHECK(seg_metrics(cm2).miou.value() >= before - 1e-12);
  }
}

TEST_CASE("exact detections with unique scores give AP 1 at every threshold") {
  DetEvalAccumulator acc(3);
  Rng rng(4);
  for (int im = 0; im < 4; ++im) {
    std::vector<BoxAnnotation> gts;
    std::vector<ScoredBox> preds;
    for (int g = 0; g < 3; ++g) {
      double x1 = rng.uniform(0, 30), y1 = rng.uniform(0, 30);
      double x2 = x1 + rng.uniform(5, 20), y2 = y1 + rng.uniform(5, 20);
      int cls = static_cast<int>(rng.uniform_int(0, 2));
      gts.push_back({x1, y1, x2, y2, cls});
      preds.push_back({{x1, y1, x2, y2}, 0.9 - 0.07 * (im * 3 + g), cls});
    }
    acc.add_image(preds, gts);
  }
  DetMetrics m = det_metrics(acc);
  CHECK(*m.map == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(*m.ap50 == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(*m.ap75 == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("zero predictions with nonzero GT give AP 0") {
  DetEvalAccumulator acc(2);
  acc.add_image({}, {{2, 2, 10, 10, 0}});
  auto ap = mean_average_precision(acc, 0.5);
  CHECK(*ap == 0.0);
}

TEST_CASE("spec PR scenario: two GT recalled at full precision gives AP50 = 1") {
  // 1 image, 2 GT of one class, 3 predictions with IoUs (1.0, 0.6, 0.4),
  // descending scores
  DetEvalAccumulator acc(1);
  std::vector<BoxAnnotation> gts{{0, 0, 10, 10, 0}, {20, 0, 30, 10, 0}};
  std::vector<ScoredBox> preds;
  preds.push_back({{0, 0, 10, 10}, 0.9, 0});      // IoU 1.0 with GT0
  preds.push_back({{20, 0, 30, 16.6667}, 0.8, 0});  // IoU ~0.6 with GT1
  preds.push_back({{0, 0, 10, 25}, 0.7, 0});      // IoU 0.4 with GT0 (already used)
  acc.add_image(preds, gts);
  auto ap = average_precision(acc, 0.5);
  CHECK(*ap[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(*ap[0] == doctest::Approx(ap_oracle(acc, 0, 0.5)).epsilon(1e-12));
}

TEST_CASE("AP equals the brute-force PR oracle on random small instances") {
  Rng rng(5);
  for (int trial = 0; trial < 40; ++trial) {
    DetEvalAccumulator acc(2);
    int images = static_cast<int>(rng.uniform_int(1, 3));
    bool has_gt[2] = {false, false};
    for (int im = 0; im < images; ++im) {
      std::vector<BoxAnnotation> gts;
      std::vector<ScoredBox> preds;
      int ng = static_cast<int>(rng.uniform_int(1, 3));
      int np = static_cast<int>(rng.uniform_int(0, 4));
      for (int g = 0; g < ng; ++g) {
        double x1 = rng.uniform(0, 40), y1 = rng.uniform(0, 40);
        int cls = static_cast<int>(rng.uniform_int(0, 1));
        has_gt[cls] = true;
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
        if (!has_gt[c]) {
          CHECK(!ap[static_cast<size_t>(c)].has_value());
          continue;
        }
        CHECK(*ap[static_cast<size_t>(c)] == doctest::Approx(ap_oracle(acc, c, thr)).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("adding a correct prediction never decreases AP") {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    DetEvalAccumulator acc(1);
    std::vector<BoxAnnotation> gts;
    std::vector<ScoredBox> preds;
    for (int g = 0; g < 3; ++g) {
      double x1 = rng.uniform(0, 40), y1 = rng.uniform(0, 40);
      gts.push_back({x1, y1, x1 + rng.uniform(5, 15), y1 + rng.uniform(5, 15), 0});
    }
    for (int p = 0; p < 2; ++p) {
      double x1 = rng.uniform(0, 40), y1 = rng.uniform(0, 40);
      preds.push_back({{x1, y1, x1 + rng.uniform(5, 15), y1 + rng.uniform(5, 15)},
                       rng.uniform(0.1, 0.8), 0});
    }
    acc.add_image(preds, gts);
    double before = mean_average_precision(acc, 0.5).value();
    // add an exact match for GT0 with a new, higher score
    DetEvalAccumulator acc2 = acc;
    acc2.images[0].preds.push_back({{gts[0].x1, gts[0].y1, gts[0].x2, gts[0].y2}, 0.95, 0});
    double after = mean_average_precision(acc2, 0.5).value();
    CHECK(after >= before - 1e-12);
  }
}

TEST_CASE("metrics are invariant to image iteration order") {
  Rng rng(7);
  DetEvalAccumulator fwd(2), rev(2);
  std::vector<DetEvalAccumulator::Image> imgs;
  for (int im = 0; im < 5; ++im) {
    DetEvalAccumulator::Image img;
    for (int g = 0; g < 2; ++g) {
      double x1 = rng.uniform(0, 40), y1 = rng.uniform(0, 40);
      img.gts.push_back({x1, y1, x1 + rng.uniform(5, 15), y1 + rng.uniform(5, 15),
                         static_cast<int>(rng.uniform_int(0, 1))});
    }
    for (int p = 0; p < 3; ++p) {
      double x1 = rng.uniform(0, 40), y1 = rng.uniform(0, 40);
      img.preds.push_back({{x1, y1, x1 + rng.uniform(5, 15), y1 + rng.uniform(5, 15)},
                           rng.uniform(0.05, 1.0),
                           static_cast<int>(rng.uniform_int(0, 1))});
    }
    imgs.push_back(img);
  }
  for (const auto& im : imgs) fwd.add_image(im.preds, im.gts);
  for (auto it = imgs.rbegin(); it != imgs.rend(); ++it) rev.add_image(it->preds, it->gts);
  DetMetrics a = det_metrics(fwd), b = det_metrics(rev);
  CHECK(*a.map == doctest::Approx(*b.map).epsilon(1e-12));
  CHECK(*a.ap50 == doctest::Approx(*b.ap50).epsilon(1e-12));
}

TEST_CASE("ap50 bounds map and all metrics stay in range") {
  Rng rng(8);
  DetEvalAccumulator acc(2);
  for (int im = 0; im < 4; ++im) {
    std::vector<BoxAnnotation> gts;
    std::vector<ScoredBox> preds;
    for (int g = 0; g < 2; ++g) {
      double x1 = rng.uniform(0, 40), y1 = rng.uniform(0, 40);
      int cls = static_cast<int>(rng.uniform_int(0, 1));
      gts.push_back({x1, y1, x1 + 12, y1 + 12, cls});
      preds.push_back({{x1 + rng.uniform(0, 6), y1 + rng.uniform(0, 6), x1 + 12, y1 + 12},
                       rng.uniform(0.1, 1.0), cls});
    }
    acc.add_image(preds, gts);
  }
  DetMetrics m = det_metrics(acc);
  CHECK(*m.ap50 >= *m.map);
  CHECK(*m.map >= 0.0);
  CHECK(*m.ap50 <= 1.0);
  CHECK(*m.ap75 <= 1.0);
}
