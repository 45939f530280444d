#pragma once

// Region-based frame detector: backbone -> RPN -> ROI pooling ->
// classification + class-specific box regression. The same heads sit on top
// of the recurrent memory in the video detector, so everything below the
// backbone takes an arbitrary feature variable.

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "occmem/core/image.hpp"
#include "occmem/detection/box.hpp"
#include "occmem/nn/init.hpp"
#include "occmem/nn/ops.hpp"

namespace occmem::det {

using nn::ParamStore;
using nn::Rng;
using nn::Shape;
using nn::Tape;
using nn::Tensor;
using nn::Var;

struct DetectorConfig {
  int num_classes = 3;  // foreground classes; label 0 is background
  int channels = 64;    // backbone output channels C
  std::array<int, 3> stem_widths = {8, 16, 32};
  int rpn_hidden = 32;
  int head_hidden = 128;
  int stride = 8;
  std::vector<double> anchor_scales = {20.0, 34.0};
  std::vector<double> anchor_ratios = {0.5, 1.0, 2.0};  // height / width

  double rpn_nms = 0.7;
  int rpn_pre_nms = 300;
  int rpn_post_nms_train = 64;
  int rpn_post_nms_test = 32;
  int rpn_batch = 64;
  double rpn_pos_fraction = 0.5;
  double rpn_pos_iou = 0.7;
  double rpn_neg_iou = 0.3;

  int roi_out = 7;
  int rois_per_image = 32;
  double roi_fg_fraction = 0.25;
  double roi_fg_iou = 0.5;

  double nms_threshold = 0.3;
  double score_threshold = 0.05;
  int max_detections = 20;

  int num_anchors() const {
    return static_cast<int>(anchor_scales.size() * anchor_ratios.size());
  }
};

// Head regression targets are divided by these before the loss.
inline constexpr std::array<double, 4> kHeadDeltaStd = {0.1, 0.1, 0.2, 0.2};

// ---------------------------------------------------------------------------
// Anchors. Ordered (anchor type, y, x) to match the RPN output channel layout;
// anchor type a = scale_index * |ratios| + ratio_index. Each anchor has area
// scale^2 and height/width = ratio, centred on the cell centre
// ((x + 0.5) * stride, (y + 0.5) * stride).

inline BoxSet generate_anchors(int feat_h, int feat_w, int stride,
                               const std::vector<double>& scales,
                               const std::vector<double>& ratios) {
  OCCMEM_CHECK(!scales.empty() && !ratios.empty(), "anchor scales/ratios must be non-empty");
  BoxSet anchors;
  anchors.reserve(scales.size() * ratios.size() * feat_h * feat_w);
  for (double s : scales)
    for (double r : ratios) {
      const double w = s / std::sqrt(r);
      const double h = s * std::sqrt(r);
      for (int y = 0; y < feat_h; ++y)
        for (int x = 0; x < feat_w; ++x) {
          const double cx = (x + 0.5) * stride, cy = (y + 0.5) * stride;
          anchors.push_back(Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, 0.0, 1});
        }
    }
  return anchors;
}

// ---------------------------------------------------------------------------
// Parameters.

template <typename T>
ParamStore<T> init_detector_params(const DetectorConfig& cfg, Rng& rng) {
  ParamStore<T> p;
  auto conv = [&](const std::string& name, int cout, int cin, int k) {
    p.set(name + ".w", nn::he_normal<T>(Shape{cout, cin, k, k}, rng));
    p.set(name + ".b", Tensor<T>(Shape{cout, 1, 1, 1}));
  };
  const int c = cfg.channels;
  conv("backbone.conv1", cfg.stem_widths[0], 3, 3);
  conv("backbone.conv2", cfg.stem_widths[1], cfg.stem_widths[0], 3);
  conv("backbone.conv3", cfg.stem_widths[2], cfg.stem_widths[1], 3);
  conv("backbone.conv4", c, cfg.stem_widths[2], 3);
  conv("rpn.conv", cfg.rpn_hidden, c, 3);
  const int a = cfg.num_anchors();
  p.set("rpn.cls.w", nn::randn<T>(Shape{a, cfg.rpn_hidden, 1, 1}, rng, T(0.01)));
  p.set("rpn.cls.b", Tensor<T>(Shape{a, 1, 1, 1}));
  p.set("rpn.reg.w", nn::randn<T>(Shape{4 * a, cfg.rpn_hidden, 1, 1}, rng, T(0.01)));
  p.set("rpn.reg.b", Tensor<T>(Shape{4 * a, 1, 1, 1}));
  const int flat = c * cfg.roi_out * cfg.roi_out;
  p.set("head.fc.w", nn::he_normal<T>(Shape{cfg.head_hidden, flat, 1, 1}, rng));
  p.set("head.fc.b", Tensor<T>(Shape{cfg.head_hidden, 1, 1, 1}));
  const int k = cfg.num_classes + 1;
  p.set("head.cls.w", nn::randn<T>(Shape{k, cfg.head_hidden, 1, 1}, rng, T(0.01)));
  p.set("head.cls.b", Tensor<T>(Shape{k, 1, 1, 1}));
  p.set("head.reg.w", nn::randn<T>(Shape{4 * k, cfg.head_hidden, 1, 1}, rng, T(0.001)));
  p.set("head.reg.b", Tensor<T>(Shape{4 * k, 1, 1, 1}));
  return p;
}

// ---------------------------------------------------------------------------
// Forward pieces.

template <typename T>
Var<T> conv_block(Tape<T>& tape, const ParamStore<T>& p, const std::string& name, Var<T> x) {
  return nn::relu(nn::conv2d(x, tape.param(p, name + ".w"), tape.param(p, name + ".b"), 1, 1));
}

// Four 3x3 conv + ReLU blocks with 2x2 max pooling after the first three:
// overall stride 8.
template <typename T>
Var<T> backbone_forward(Tape<T>& tape, const ParamStore<T>& p, Var<T> image) {
  Var<T> x = conv_block(tape, p, "backbone.conv1", image);
  x = conv_block(tape, p, "backbone.conv2", nn::maxpool2x2(x));
  x = conv_block(tape, p, "backbone.conv3", nn::maxpool2x2(x));
  return conv_block(tape, p, "backbone.conv4", nn::maxpool2x2(x));
}

template <typename T>
struct RpnOutput {
  Var<T> objectness;  // (1, A, H, W) logits
  Var<T> deltas;      // (1, 4A, H, W), channel 4a + k
};

template <typename T>
RpnOutput<T> rpn_forward(Tape<T>& tape, const ParamStore<T>& p, Var<T> feature) {
  Var<T> h = conv_block(tape, p, "rpn.conv", feature);
  return {nn::conv2d(h, tape.param(p, "rpn.cls.w"), tape.param(p, "rpn.cls.b"), 1, 0),
          nn::conv2d(h, tape.param(p, "rpn.reg.w"), tape.param(p, "rpn.reg.b"), 1, 0)};
}

template <typename T>
Delta anchor_delta(const Tensor<T>& deltas, int anchor_index, int plane) {
  const int a = anchor_index / plane, cell = anchor_index % plane;
  Delta d;
  for (int k = 0; k < 4; ++k) d[k] = static_cast<double>(deltas[(4 * a + k) * plane + cell]);
  return d;
}

// Scores anchors, decodes and clips them, drops boxes with a side of 1 px or
// less, keeps the top pre_nms_k by objectness, applies NMS and truncates.
template <typename T>
BoxSet rpn_propose(const Tensor<T>& objectness, const Tensor<T>& deltas, const BoxSet& anchors,
                   double image_w, double image_h, int pre_nms_k, int post_nms_k,
                   double nms_iou) {
  const int plane = objectness.h() * objectness.w();
  OCCMEM_CHECK(anchors.size() == objectness.size(), "anchor count ", anchors.size(),
               " does not match objectness map ", objectness.shape());
  BoxSet cands;
  cands.reserve(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    Box b = clip(decode(anchor_delta(deltas, static_cast<int>(i), plane), anchors[i]), image_w,
                 image_h);
    if (b.width() <= 1.0 || b.height() <= 1.0) continue;
    b.score = 1.0 / (1.0 + std::exp(-static_cast<double>(objectness[i])));
    b.label = 1;
    cands.push_back(b);
  }
  auto order = order_by_score(cands);
  if (static_cast<int>(order.size()) > pre_nms_k) order.resize(pre_nms_k);
  BoxSet top;
  top.reserve(order.size());
  for (int i : order) top.push_back(cands[i]);
  BoxSet kept = nms(top, nms_iou);
  if (static_cast<int>(kept.size()) > post_nms_k) kept.resize(post_nms_k);
  return kept;
}

// Boxes in image pixels -> (R, C, out, out) pooled features.
template <typename T>
Var<T> roi_pool(Var<T> feature, const BoxSet& boxes, int out, int stride) {
  std::vector<T> rois;
  rois.reserve(boxes.size() * 4);
  const double s = 1.0 / stride;
  for (const Box& b : boxes) {
    rois.push_back(static_cast<T>(b.x1 * s));
    rois.push_back(static_cast<T>(b.y1 * s));
    rois.push_back(static_cast<T>(b.x2 * s));
    rois.push_back(static_cast<T>(b.y2 * s));
  }
  return nn::roi_pool(feature, rois, out);
}

template <typename T>
struct HeadOutput {
  Var<T> logits;  // (R, K+1, 1, 1)
  Var<T> deltas;  // (R, 4(K+1), 1, 1)
};

template <typename T>
HeadOutput<T> head_forward(Tape<T>& tape, const ParamStore<T>& p, Var<T> pooled) {
  const Shape s = pooled.shape();
  Var<T> flat = nn::reshape(pooled, Shape{s.n, s.c * s.h * s.w, 1, 1});
  Var<T> h = nn::relu(nn::linear(flat, tape.param(p, "head.fc.w"), tape.param(p, "head.fc.b")));
  return {nn::linear(h, tape.param(p, "head.cls.w"), tape.param(p, "head.cls.b")),
          nn::linear(h, tape.param(p, "head.reg.w"), tape.param(p, "head.reg.b"))};
}

inline std::vector<double> softmax_row(const double* row, int k) {
  std::vector<double> out(k);
  double mx = row[0];
  for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
  double z = 0;
  for (int j = 0; j < k; ++j) z += (out[j] = std::exp(row[j] - mx));
  for (auto& v : out) v /= z;
  return out;
}

// Per-ROI class probabilities (softmax) as doubles.
template <typename T>
std::vector<std::vector<double>> class_probabilities(const Tensor<T>& logits) {
  const int r = logits.n();
  const int k = static_cast<int>(logits.size() / r);
  std::vector<std::vector<double>> out;
  std::vector<double> row(k);
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < k; ++j) row[j] = static_cast<double>(logits[i * k + j]);
    out.push_back(softmax_row(row.data(), k));
  }
  return out;
}

// Final detections from head outputs on a set of proposals.
template <typename T>
BoxSet decode_detections(const Tensor<T>& logits, const Tensor<T>& deltas,
                         const BoxSet& proposals, const DetectorConfig& cfg, double image_w,
                         double image_h, double score_threshold) {
  const int k = cfg.num_classes + 1;
  const auto probs = class_probabilities(logits);
  BoxSet dets;
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    for (int c = 1; c < k; ++c) {
      const double score = probs[i][c];
      if (score < score_threshold) continue;
      Delta d;
      for (int j = 0; j < 4; ++j)
        d[j] = static_cast<double>(deltas[i * 4 * k + 4 * c + j]) * kHeadDeltaStd[j];
      Box b = clip(decode(d, proposals[i]), image_w, image_h);
      if (!b.valid()) continue;
      b.score = score;
      b.label = c;
      dets.push_back(b);
    }
  }
  BoxSet kept = nms(dets, cfg.nms_threshold);
  if (static_cast<int>(kept.size()) > cfg.max_detections) kept.resize(cfg.max_detections);
  return kept;
}

// Runs RPN + ROI head on a feature map (backbone output or memory) and
// returns detections. Uses the tape the feature lives on.
template <typename T>
BoxSet detect_on_feature(Tape<T>& tape, const ParamStore<T>& p, Var<T> feature,
                         const DetectorConfig& cfg, double image_w, double image_h,
                         double score_threshold) {
  const Shape fs = feature.shape();
  const BoxSet anchors =
      generate_anchors(fs.h, fs.w, cfg.stride, cfg.anchor_scales, cfg.anchor_ratios);
  RpnOutput<T> rpn = rpn_forward(tape, p, feature);
  BoxSet proposals = rpn_propose(rpn.objectness.value(), rpn.deltas.value(), anchors, image_w,
                                 image_h, cfg.rpn_pre_nms, cfg.rpn_post_nms_test, cfg.rpn_nms);
  if (proposals.empty()) return {};
  Var<T> pooled = roi_pool(feature, proposals, cfg.roi_out, cfg.stride);
  HeadOutput<T> head = head_forward(tape, p, pooled);
  return decode_detections(head.logits.value(), head.deltas.value(), proposals, cfg, image_w,
                           image_h, score_threshold);
}

template <typename T>
BoxSet detect_frame(const Image& image, const ParamStore<T>& p, const DetectorConfig& cfg) {
  Tape<T> tape(false);
  Var<T> feature = backbone_forward(tape, p, tape.constant(to_tensor<T>(image)));
  return detect_on_feature(tape, p, feature, cfg, image.width, image.height,
                           cfg.score_threshold);
}

// ---------------------------------------------------------------------------
// Training loss.

template <typename T>
struct LossBundle {
  Var<T> rpn_cls;
  Var<T> rpn_reg;
  Var<T> head_cls;
  Var<T> head_reg;

  Var<T> total() const { return nn::scalar_sum<T>({rpn_cls, rpn_reg, head_cls, head_reg}); }
};

namespace detail {

// Picks up to `count` entries of `pool` without replacement.
inline std::vector<int> sample_subset(std::vector<int> pool, int count, Rng& rng) {
  if (static_cast<int>(pool.size()) <= count) return pool;
  for (int i = 0; i < count; ++i) {
    const int j = nn::uniform_int(rng, i, static_cast<int>(pool.size()) - 1);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  return pool;
}

}  // namespace detail

// Anchor labels for RPN training: 1 positive, 0 negative, -1 ignored.
// Positive if IoU >= pos_iou with some GT box or if it is the best anchor for
// a GT box; negative if max IoU < neg_iou.
inline std::vector<int> label_anchors(const BoxSet& anchors, const BoxSet& gt,
                                      double pos_iou, double neg_iou,
                                      std::vector<int>* matched_gt = nullptr) {
  std::vector<int> labels(anchors.size(), 0);
  if (matched_gt) matched_gt->assign(anchors.size(), -1);
  if (gt.empty()) return labels;
  std::vector<double> best_for_gt(gt.size(), 0.0);
  std::vector<double> max_iou(anchors.size(), 0.0);
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(anchors[i], gt[g]);
      if (v > max_iou[i]) {
        max_iou[i] = v;
        if (matched_gt) (*matched_gt)[i] = static_cast<int>(g);
      }
      best_for_gt[g] = std::max(best_for_gt[g], v);
    }
  }
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    labels[i] = max_iou[i] >= pos_iou ? 1 : (max_iou[i] < neg_iou ? 0 : -1);
  }
  for (std::size_t g = 0; g < gt.size(); ++g) {
    if (best_for_gt[g] <= 0) continue;
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      if (iou(anchors[i], gt[g]) == best_for_gt[g]) {
        labels[i] = 1;
        if (matched_gt) (*matched_gt)[i] = static_cast<int>(g);
      }
    }
  }
  return labels;
}

// Full Faster R-CNN style loss on one feature map. `gt` boxes carry their
// class in `label` (>= 1). Proposal selection is not differentiable; pass
// `fixed_proposals` to pin it (gradient checks do this).
template <typename T>
LossBundle<T> detector_loss(Tape<T>& tape, const ParamStore<T>& p, Var<T> feature,
                            const BoxSet& gt, const DetectorConfig& cfg, double image_w,
                            double image_h, Rng& rng,
                            const BoxSet* fixed_proposals = nullptr) {
  for (const Box& g : gt) {
    OCCMEM_CHECK(g.valid() && g.label >= 1 && g.label <= cfg.num_classes,
                 "invalid ground-truth box");
  }
  const Shape fs = feature.shape();
  const int plane = fs.h * fs.w;
  const BoxSet anchors =
      generate_anchors(fs.h, fs.w, cfg.stride, cfg.anchor_scales, cfg.anchor_ratios);
  RpnOutput<T> rpn = rpn_forward(tape, p, feature);

  // RPN targets.
  std::vector<int> matched;
  const auto labels = label_anchors(anchors, gt, cfg.rpn_pos_iou, cfg.rpn_neg_iou, &matched);
  std::vector<int> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) pos.push_back(static_cast<int>(i));
    if (labels[i] == 0) neg.push_back(static_cast<int>(i));
  }
  pos = detail::sample_subset(pos, static_cast<int>(cfg.rpn_batch * cfg.rpn_pos_fraction), rng);
  neg = detail::sample_subset(neg, cfg.rpn_batch - static_cast<int>(pos.size()), rng);
  const std::size_t na = anchors.size();
  std::vector<T> obj_t(na, T(0)), obj_w(na, T(0));
  std::vector<T> reg_t(4 * na, T(0)), reg_w(4 * na, T(0));
  for (int i : pos) {
    obj_t[i] = T(1);
    obj_w[i] = T(1);
    const Delta d = encode(gt[matched[i]], anchors[i]);
    const int a = i / plane, cell = i % plane;
    for (int k = 0; k < 4; ++k) {
      reg_t[(4 * a + k) * plane + cell] = static_cast<T>(d[k]);
      reg_w[(4 * a + k) * plane + cell] = T(1);
    }
  }
  for (int i : neg) obj_w[i] = T(1);
  const T rpn_norm = static_cast<T>(std::max<std::size_t>(1, pos.size() + neg.size()));
  LossBundle<T> loss;
  loss.rpn_cls = nn::sigmoid_bce(rpn.objectness, obj_t, obj_w, rpn_norm);
  loss.rpn_reg = nn::smooth_l1(rpn.deltas, reg_t, reg_w, rpn_norm, T(1.0 / 9.0));

  // Proposals (no gradient through box coordinates) plus the GT boxes.
  BoxSet proposals =
      fixed_proposals ? *fixed_proposals
                      : rpn_propose(rpn.objectness.value(), rpn.deltas.value(), anchors, image_w,
                                    image_h, cfg.rpn_pre_nms, cfg.rpn_post_nms_train, cfg.rpn_nms);
  for (const Box& g : gt) proposals.push_back(g);

  std::vector<int> fg, bg;
  std::vector<int> roi_gt(proposals.size(), -1);
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    double best = 0;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(proposals[i], gt[g]);
      if (v > best) {
        best = v;
        roi_gt[i] = static_cast<int>(g);
      }
    }
    (best >= cfg.roi_fg_iou ? fg : bg).push_back(static_cast<int>(i));
  }
  fg = detail::sample_subset(fg, static_cast<int>(cfg.rois_per_image * cfg.roi_fg_fraction), rng);
  bg = detail::sample_subset(bg, cfg.rois_per_image - static_cast<int>(fg.size()), rng);
  BoxSet rois;
  std::vector<int> roi_labels;
  for (int i : fg) {
    rois.push_back(proposals[i]);
    roi_labels.push_back(gt[roi_gt[i]].label);
  }
  for (int i : bg) {
    rois.push_back(proposals[i]);
    roi_labels.push_back(0);
  }
  if (rois.empty()) {
    // Only possible with an empty proposal set and no GT; fall back to one
    // full-image background ROI so the head still sees a gradient.
    rois.push_back(Box{0, 0, image_w, image_h, 0.0, 0});
    roi_labels.push_back(0);
  }
  Var<T> pooled = roi_pool(feature, rois, cfg.roi_out, cfg.stride);
  HeadOutput<T> head = head_forward(tape, p, pooled);
  loss.head_cls = nn::softmax_cross_entropy(head.logits, roi_labels);
  const int k = cfg.num_classes + 1;
  const std::size_t nr = rois.size();
  std::vector<T> ht(nr * 4 * k, T(0)), hw(nr * 4 * k, T(0));
  for (std::size_t i = 0; i < fg.size(); ++i) {
    const Delta d = encode(gt[roi_gt[fg[i]]], rois[i]);
    const int c = roi_labels[i];
    for (int j = 0; j < 4; ++j) {
      ht[i * 4 * k + 4 * c + j] = static_cast<T>(d[j] / kHeadDeltaStd[j]);
      hw[i * 4 * k + 4 * c + j] = T(1);
    }
  }
  loss.head_reg = nn::smooth_l1(head.deltas, ht, hw, static_cast<T>(nr), T(1));
  return loss;
}

}  // namespace occmem::det
