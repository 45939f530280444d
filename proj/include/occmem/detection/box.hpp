#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <vector>

#include "occmem/core/error.hpp"

namespace occmem::det {

// Axis-aligned box in continuous pixel coordinates; label 0 is background.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  double score = 1.0;
  int label = 1;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double cx() const { return x1 + 0.5 * width(); }
  double cy() const { return y1 + 0.5 * height(); }
  bool valid() const { return x2 > x1 && y2 > y1; }

  friend bool operator==(const Box&, const Box&) = default;
};

using BoxSet = std::vector<Box>;

inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

// (dx, dy, dw, dh) offsets of `box` relative to `anchor`.
using Delta = std::array<double, 4>;

inline Delta encode(const Box& box, const Box& anchor) {
  return {(box.cx() - anchor.cx()) / anchor.width(),
          (box.cy() - anchor.cy()) / anchor.height(),
          std::log(box.width() / anchor.width()),
          std::log(box.height() / anchor.height())};
}

// Largest log-scale accepted when decoding; keeps exp() finite for wild
// predictions early in training.
inline constexpr double kMaxLogScale = 4.135166556742356;  // log(1000 / 16)

inline Box decode(const Delta& d, const Box& anchor) {
  const double dw = std::min(d[2], kMaxLogScale);
  const double dh = std::min(d[3], kMaxLogScale);
  const double cx = anchor.cx() + d[0] * anchor.width();
  const double cy = anchor.cy() + d[1] * anchor.height();
  const double w = anchor.width() * std::exp(dw);
  const double h = anchor.height() * std::exp(dh);
  Box b = anchor;
  b.x1 = cx - 0.5 * w;
  b.x2 = cx + 0.5 * w;
  b.y1 = cy - 0.5 * h;
  b.y2 = cy + 0.5 * h;
  return b;
}

inline Box clip(Box b, double width, double height) {
  b.x1 = std::clamp(b.x1, 0.0, width);
  b.x2 = std::clamp(b.x2, 0.0, width);
  b.y1 = std::clamp(b.y1, 0.0, height);
  b.y2 = std::clamp(b.y2, 0.0, height);
  return b;
}

inline Box flip_horizontal(Box b, double width) {
  const double x1 = width - b.x2;
  b.x2 = width - b.x1;
  b.x1 = x1;
  return b;
}

// Indices of `boxes` ordered by descending score; ties keep input order.
inline std::vector<int> order_by_score(const BoxSet& boxes) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return boxes[a].score > boxes[b].score; });
  return order;
}

// Greedy non-maximum suppression, applied within each label. Output is in
// descending score order.
inline BoxSet nms(const BoxSet& boxes, double iou_threshold) {
  OCCMEM_CHECK(iou_threshold > 0 && iou_threshold < 1,
               "nms threshold must be in (0,1), got ", iou_threshold);
  BoxSet kept;
  kept.reserve(boxes.size());
  for (int i : order_by_score(boxes)) {
    const Box& cand = boxes[i];
    bool keep = true;
    for (const Box& k : kept) {
      if (k.label == cand.label && iou(k, cand) > iou_threshold) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(cand);
  }
  return kept;
}

}  // namespace occmem::det
