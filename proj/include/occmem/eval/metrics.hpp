#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "occmem/core/image.hpp"
#include "occmem/data/synth.hpp"
#include "occmem/detection/box.hpp"
#include "occmem/nn/tensor.hpp"

namespace occmem::eval {

using det::Box;
using det::BoxSet;
using json = nlohmann::json;

using det::iou;

// Per detection (in global score order): whether it matched a GT. Each
// detection takes the best-overlapping still-unmatched GT of its frame with
// IoU >= thr. `gt_hit` (optional) receives the matched flags per frame.
inline std::vector<std::pair<double, bool>> match_detections(
    const std::vector<BoxSet>& dets, const std::vector<BoxSet>& gts, double iou_thr,
    std::vector<std::vector<bool>>* gt_hit = nullptr) {
  OCCMEM_CHECK(dets.size() == gts.size(), "detections and ground truth cover different frames");
  struct Ref {
    double score;
    std::size_t frame, idx;
  };
  std::vector<Ref> order;
  for (std::size_t f = 0; f < dets.size(); ++f)
    for (std::size_t i = 0; i < dets[f].size(); ++i) order.push_back({dets[f][i].score, f, i});
  std::stable_sort(order.begin(), order.end(),
                   [](const Ref& a, const Ref& b) { return a.score > b.score; });
  std::vector<std::vector<bool>> used(gts.size());
  for (std::size_t f = 0; f < gts.size(); ++f) used[f].assign(gts[f].size(), false);
  std::vector<std::pair<double, bool>> out;
  for (const Ref& r : order) {
    const Box& d = dets[r.frame][r.idx];
    double best = -1;
    int bi = -1;
    for (std::size_t g = 0; g < gts[r.frame].size(); ++g) {
      if (used[r.frame][g]) continue;
      const double o = iou(d, gts[r.frame][g]);
      if (o >= iou_thr && o > best) {
        best = o;
        bi = static_cast<int>(g);
      }
    }
    if (bi >= 0) used[r.frame][bi] = true;
    out.push_back({r.score, bi >= 0});
  }
  if (gt_hit) *gt_hit = std::move(used);
  return out;
}

// All-points interpolated AP for a single class; nullopt without GT.
inline std::optional<double> average_precision(const std::vector<BoxSet>& dets,
                                               const std::vector<BoxSet>& gts,
                                               double iou_thr = 0.5) {
  std::size_t total = 0;
  for (const auto& g : gts) total += g.size();
  if (total == 0) return std::nullopt;
  const auto matches = match_detections(dets, gts, iou_thr);
  std::vector<double> prec, rec;
  double tp = 0;
  for (std::size_t k = 0; k < matches.size(); ++k) {
    tp += matches[k].second;
    prec.push_back(tp / static_cast<double>(k + 1));
    rec.push_back(tp / static_cast<double>(total));
  }
  for (int k = static_cast<int>(prec.size()) - 2; k >= 0; --k)
    prec[k] = std::max(prec[k], prec[k + 1]);
  double ap = 0, prev_r = 0;
  for (std::size_t k = 0; k < prec.size(); ++k) {
    ap += (rec[k] - prev_r) * prec[k];
    prev_r = rec[k];
  }
  return ap;
}

inline std::vector<BoxSet> filter_label(const std::vector<BoxSet>& frames, int label) {
  std::vector<BoxSet> out(frames.size());
  for (std::size_t f = 0; f < frames.size(); ++f)
    for (const Box& b : frames[f])
      if (b.label == label) out[f].push_back(b);
  return out;
}

struct MapResult {
  std::vector<std::optional<double>> per_class;  // index = label - 1
  double map = 0;
  std::vector<std::string> warnings;
};

inline MapResult mean_average_precision(const std::vector<BoxSet>& dets,
                                        const std::vector<BoxSet>& gts, int num_classes,
                                        double iou_thr = 0.5) {
  MapResult r;
  double sum = 0;
  int counted = 0;
  for (int c = 1; c <= num_classes; ++c) {
    auto ap = average_precision(filter_label(dets, c), filter_label(gts, c), iou_thr);
    r.per_class.push_back(ap);
    if (ap) {
      sum += *ap;
      ++counted;
    } else {
      r.warnings.push_back("class " + std::to_string(c - 1) +
                           " has no ground truth; excluded from mAP");
    }
  }
  r.map = counted ? sum / counted : 0.0;
  return r;
}

struct RecallSplit {
  std::optional<double> occluded;
  std::optional<double> visible;
};

// Recall over GT flagged occluded (and, separately, visible). A GT counts as
// found when a same-class detection with score >= score_thr overlaps it.
inline RecallSplit occlusion_recall(const std::vector<BoxSet>& dets,
                                    const std::vector<synth::FrameAnnotation>& anns,
                                    double iou_thr = 0.5, double score_thr = 0.5) {
  OCCMEM_CHECK(dets.size() == anns.size(), "detections and annotations cover different frames");
  std::vector<BoxSet> kept(dets.size()), gts(anns.size());
  for (std::size_t f = 0; f < dets.size(); ++f) {
    for (const Box& b : dets[f])
      if (b.score >= score_thr) kept[f].push_back(b);
    gts[f] = synth::gt_boxes(anns[f].objects);
  }
  int occ = 0, occ_hit = 0, vis = 0, vis_hit = 0;
  // class-aware: match each label separately
  int max_label = 0;
  for (const auto& g : gts)
    for (const Box& b : g) max_label = std::max(max_label, b.label);
  std::vector<std::vector<bool>> found(gts.size());
  for (std::size_t f = 0; f < gts.size(); ++f) found[f].assign(gts[f].size(), false);
  for (int c = 1; c <= max_label; ++c) {
    std::vector<std::vector<bool>> hit;
    match_detections(filter_label(kept, c), filter_label(gts, c), iou_thr, &hit);
    for (std::size_t f = 0; f < gts.size(); ++f) {
      std::size_t k = 0;
      for (std::size_t g = 0; g < gts[f].size(); ++g)
        if (gts[f][g].label == c) found[f][g] = hit[f][k++];
    }
  }
  for (std::size_t f = 0; f < gts.size(); ++f)
    for (std::size_t g = 0; g < gts[f].size(); ++g) {
      if (anns[f].objects[g].occluded) {
        ++occ;
        occ_hit += found[f][g];
      } else {
        ++vis;
        vis_hit += found[f][g];
      }
    }
  RecallSplit r;
  if (occ) r.occluded = static_cast<double>(occ_hit) / occ;
  if (vis) r.visible = static_cast<double>(vis_hit) / vis;
  return r;
}

inline std::optional<double> occluded_recall(const std::vector<BoxSet>& dets,
                                             const std::vector<synth::FrameAnnotation>& anns,
                                             double iou_thr = 0.5, double score_thr = 0.5) {
  return occlusion_recall(dets, anns, iou_thr, score_thr).occluded;
}

// Mean over the cells of `box` (image coords) of the channel L2 norm.
// Cells are those whose centres fall inside the box; a box smaller than a
// cell uses the cell holding its centre.
template <typename T>
double region_norm(const nn::Tensor<T>& m, const Box& box, int stride) {
  const int h = m.h(), w = m.w();
  auto cell_norm = [&](int y, int x) {
    double s = 0;
    for (int c = 0; c < m.c(); ++c) s += static_cast<double>(m.at(0, c, y, x)) * m.at(0, c, y, x);
    return std::sqrt(s);
  };
  double sum = 0;
  int count = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double cx = (x + 0.5) * stride, cy = (y + 0.5) * stride;
      if (cx >= box.x1 && cx < box.x2 && cy >= box.y1 && cy < box.y2) {
        sum += cell_norm(y, x);
        ++count;
      }
    }
  if (count) return sum / count;
  const int x = std::clamp(static_cast<int>(box.cx() / stride), 0, w - 1);
  const int y = std::clamp(static_cast<int>(box.cy() / stride), 0, h - 1);
  return cell_norm(y, x);
}

// Memory strength inside the object's box, frame by frame, relative to the
// occlusion-onset frame. Zero memory gives zeros.
template <typename T>
std::vector<double> memory_persistence(const std::vector<nn::Tensor<T>>& trace,
                                       const std::vector<Box>& boxes, int onset, int stride) {
  OCCMEM_CHECK(trace.size() == boxes.size(), "trace and boxes cover different frames");
  OCCMEM_CHECK(onset >= 0 && onset < static_cast<int>(trace.size()), "onset outside the trace");
  std::vector<double> raw;
  for (std::size_t t = 0; t < trace.size(); ++t) raw.push_back(region_norm(trace[t], boxes[t], stride));
  const double ref = raw[onset];
  std::vector<double> out;
  for (double v : raw) out.push_back(ref > 0 ? v / ref : 0.0);
  return out;
}

// (object index, first occluded frame) for each object that becomes occluded
// after having been visible.
inline std::vector<std::pair<int, int>> occlusion_onsets(
    const std::vector<synth::FrameAnnotation>& anns) {
  std::vector<std::pair<int, int>> out;
  if (anns.empty()) return out;
  const std::size_t n = anns[0].objects.size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 1; t < anns.size(); ++t)
      if (anns[t].objects[i].occluded && !anns[t - 1].objects[i].occluded) {
        out.push_back({static_cast<int>(i), static_cast<int>(t)});
        break;
      }
  return out;
}

// Channel L2 norm per cell, min-max scaled to 0..255, nearest-neighbour
// upscaled to width x height. Constant memory maps to black.
template <typename T>
Image memory_heatmap(const nn::Tensor<T>& m, int width, int height) {
  const int h = m.h(), w = m.w();
  std::vector<double> norms(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int c = 0; c < m.c(); ++c) s += static_cast<double>(m.at(0, c, y, x)) * m.at(0, c, y, x);
      norms[static_cast<std::size_t>(y) * w + x] = std::sqrt(s);
    }
  const auto [lo, hi] = std::minmax_element(norms.begin(), norms.end());
  const double range = *hi - *lo;
  Image img(width, height, 1);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const int cy = std::min(h - 1, static_cast<int>(static_cast<long>(y) * h / height));
      const int cx = std::min(w - 1, static_cast<int>(static_cast<long>(x) * w / width));
      const double v = range > 0 ? (norms[static_cast<std::size_t>(cy) * w + cx] - *lo) / range : 0.0;
      img.at(x, y, 0) = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  return img;
}

struct Track {
  std::vector<std::pair<int, Box>> boxes;  // (frame, box)
  int last_frame() const { return boxes.back().first; }
};

// Greedy frame-to-frame IoU association. A track that goes unmatched for
// more than `max_gap` consecutive frames is closed.
inline std::vector<Track> link_tracks(const std::vector<BoxSet>& frames, double iou_thr = 0.3,
                                      int max_gap = 2) {
  std::vector<Track> tracks;
  std::vector<int> active;
  for (int t = 0; t < static_cast<int>(frames.size()); ++t) {
    std::vector<int> still;
    for (int k : active)
      if (t - tracks[k].last_frame() - 1 <= max_gap) still.push_back(k);
    active = std::move(still);
    struct Pair {
      double o;
      int track, det;
    };
    std::vector<Pair> pairs;
    for (int k : active)
      for (int d = 0; d < static_cast<int>(frames[t].size()); ++d) {
        const double o = iou(tracks[k].boxes.back().second, frames[t][d]);
        if (o >= iou_thr) pairs.push_back({o, k, d});
      }
    std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.o > b.o; });
    std::vector<bool> det_used(frames[t].size(), false);
    std::vector<int> track_used;
    for (const Pair& p : pairs) {
      if (det_used[p.det] ||
          std::find(track_used.begin(), track_used.end(), p.track) != track_used.end())
        continue;
      det_used[p.det] = true;
      track_used.push_back(p.track);
      tracks[p.track].boxes.push_back({t, frames[t][p.det]});
    }
    for (int d = 0; d < static_cast<int>(frames[t].size()); ++d)
      if (!det_used[d]) {
        tracks.push_back(Track{{{t, frames[t][d]}}});
        active.push_back(static_cast<int>(tracks.size()) - 1);
      }
  }
  return tracks;
}

struct EvalReport {
  std::vector<std::optional<double>> per_class_ap;
  double map = 0;
  std::optional<double> occluded_recall;
  std::optional<double> visible_recall;
  // per sequence, per occlusion event
  std::vector<std::vector<double>> persistence;
  std::vector<int> persistence_onsets;
  double iou_threshold = 0.5;
  double score_threshold = 0.5;
  std::vector<std::string> warnings;

  // mean persistence `offset` frames after onset, over events long enough
  std::optional<double> mean_persistence_at(int offset) const {
    double s = 0;
    int n = 0;
    for (std::size_t i = 0; i < persistence.size(); ++i) {
      const int t = persistence_onsets[i] + offset;
      if (t < static_cast<int>(persistence[i].size())) {
        s += persistence[i][t];
        ++n;
      }
    }
    if (!n) return std::nullopt;
    return s / n;
  }

  json to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    json ap = json::array();
    for (const auto& a : per_class_ap) ap.push_back(opt(a));
    json curves = json::array();
    for (std::size_t i = 0; i < persistence.size(); ++i)
      curves.push_back({{"onset", persistence_onsets[i]}, {"curve", persistence[i]}});
    return {{"per_class_ap", ap},
            {"map", map},
            {"occluded_recall", opt(occluded_recall)},
            {"visible_recall", opt(visible_recall)},
            {"iou_threshold", iou_threshold},
            {"score_threshold", score_threshold},
            {"persistence", curves},
            {"persistence_at_20", opt(mean_persistence_at(20))},
            {"warnings", warnings}};
  }
};

}  // namespace occmem::eval
