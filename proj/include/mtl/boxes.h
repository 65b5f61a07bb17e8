#pragma once

#include <algorithm>
#include <array>
#include <cmath>

namespace mtl {

// Plain box helpers (doubles, no autodiff). Boxes are (x1,y1,x2,y2) unless
// suffixed otherwise; cxcywh boxes are center/size.

inline std::array<double, 4> cxcywh_to_xyxy(const std::array<double, 4>& b) {
  return {b[0] - 0.5 * b[2], b[1] - 0.5 * b[3], b[0] + 0.5 * b[2], b[1] + 0.5 * b[3]};
}

inline std::array<double, 4> xyxy_to_cxcywh(const std::array<double, 4>& b) {
  return {0.5 * (b[0] + b[2]), 0.5 * (b[1] + b[3]), b[2] - b[0], b[3] - b[1]};
}

inline double box_area(const std::array<double, 4>& b) {
  return std::max(0.0, b[2] - b[0]) * std::max(0.0, b[3] - b[1]);
}

inline double box_iou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  double ix = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
  double iy = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
  double inter = ix * iy;
  double uni = box_area(a) + box_area(b) - inter;
  return uni <= 0 ? 0.0 : inter / uni;
}

inline double box_giou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  double ix = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
  double iy = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
  double inter = ix * iy;
  double uni = box_area(a) + box_area(b) - inter;
  double iou = uni <= 0 ? 0.0 : inter / uni;
  double ex = std::max(a[2], b[2]) - std::min(a[0], b[0]);
  double ey = std::max(a[3], b[3]) - std::min(a[1], b[1]);
  double enclose = ex * ey;
  return enclose <= 0 ? iou : iou - (enclose - uni) / enclose;
}

}  // namespace mtl
