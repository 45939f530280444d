#pragma once

#include <string>
#include <vector>

#include "occmem/core/error.hpp"
#include "occmem/core/image.hpp"
#include "occmem/detection/frame_detector.hpp"
#include "occmem/memory/cells.hpp"

namespace occmem::video {

using det::BoxSet;
using mem::CellKind;
using nn::ParamStore;
using nn::Shape;
using nn::Tape;
using nn::Tensor;
using nn::Var;

enum class Direction { forward, bidirectional };

inline const char* to_string(Direction d) {
  return d == Direction::forward ? "forward" : "bidirectional";
}

inline Direction parse_direction(const std::string& s) {
  if (s == "forward" || s == "unidirectional") return Direction::forward;
  if (s == "bidirectional") return Direction::bidirectional;
  throw ContractError("unknown direction '" + s + "'");
}

struct VideoConfig {
  det::DetectorConfig detector;
  CellKind cell = CellKind::none;
  Direction direction = Direction::forward;
  mem::CellConfig cell_cfg;

  void validate() const {
    OCCMEM_CHECK(cell_cfg.channels == detector.channels, "cell channels (", cell_cfg.channels,
                 ") must equal backbone channels (", detector.channels, ")");
    OCCMEM_CHECK(cell != CellKind::none || direction == Direction::forward,
                 "a bidirectional model needs a memory cell");
  }
};

inline const std::string kForwardCell = "cell.";
inline const std::string kBackwardCell = "cell_bwd.";

template <typename T>
void init_memory_params(ParamStore<T>& p, const VideoConfig& cfg, nn::Rng& rng) {
  mem::init_cell_params(p, kForwardCell, cfg.cell, cfg.cell_cfg, rng);
  if (cfg.direction == Direction::bidirectional) {
    mem::init_cell_params(p, kBackwardCell, cfg.cell, cfg.cell_cfg, rng);
    const int C = cfg.detector.channels;
    Tensor<T> w(Shape{C, 2 * C, 1, 1});
    nn::add_identity_kernel(w, 0, C, T(0.5));
    nn::add_identity_kernel(w, C, C, T(0.5));
    p.set("merge.w", std::move(w));
    p.set("merge.b", Tensor<T>(Shape{C, 1, 1, 1}));
  }
}

template <typename T>
ParamStore<T> init_video_params(const VideoConfig& cfg, nn::Rng& rng) {
  cfg.validate();
  ParamStore<T> p = det::init_detector_params<T>(cfg.detector, rng);
  init_memory_params(p, cfg, rng);
  return p;
}

// Copies every detector tensor and adds freshly initialised memory params.
template <typename T>
ParamStore<T> init_from_frame_detector(const ParamStore<T>& frame, const VideoConfig& cfg,
                                       nn::Rng& rng) {
  cfg.validate();
  nn::Rng shape_rng = nn::make_rng(0, 0);
  const ParamStore<T> reference = det::init_detector_params<T>(cfg.detector, shape_rng);
  ParamStore<T> p;
  for (const auto& [name, t] : reference) {
    if (!frame.contains(name)) throw ContractError("frame detector lacks '" + name + "'");
    if (!(frame.at(name).shape() == t.shape()))
      throw ContractError(detail::concat("shape of '", name, "' is ", frame.at(name).shape(),
                                         ", expected ", t.shape()));
    p.set(name, frame.at(name));
  }
  init_memory_params(p, cfg, rng);
  return p;
}

template <typename T>
Var<T> bidirectional_merge(Tape<T>& tape, const ParamStore<T>& p, Var<T> m_fwd, Var<T> m_bwd) {
  OCCMEM_CHECK(m_fwd.shape() == m_bwd.shape(), "merge needs matching memories");
  return nn::conv2d(nn::concat_channels(m_fwd, m_bwd), tape.param(p, "merge.w"),
                    tape.param(p, "merge.b"), 1, 0);
}

// One recurrent update; `f_prev` is only read by MatchTrans.
template <typename T>
Var<T> memory_step(Tape<T>& tape, const ParamStore<T>& p, const VideoConfig& cfg,
                   const std::string& prefix, Var<T> m_prev, Var<T> f_prev, Var<T> f) {
  return mem::cell_step(cfg.cell, tape, p, prefix, m_prev, f_prev, f, cfg.cell_cfg);
}

template <typename T>
struct VideoOutput {
  std::vector<BoxSet> detections;
  std::vector<mem::MemoryState<T>> memory;  // what the heads consumed
};

template <typename T>
Tensor<T> frame_features(const Image& img, const ParamStore<T>& p) {
  Tape<T> tape(false);
  return det::backbone_forward(tape, p, tape.constant(to_tensor<T>(img))).value();
}

// Inference over a whole clip. Forward models are causal; bidirectional
// models run a second cell over the reversed clip and merge per frame.
template <typename T>
VideoOutput<T> video_forward(const std::vector<Image>& frames, const ParamStore<T>& p,
                             const VideoConfig& cfg) {
  cfg.validate();
  OCCMEM_CHECK(!frames.empty(), "video_forward needs at least one frame");
  for (const auto& f : frames)
    OCCMEM_CHECK(f.width == frames[0].width && f.height == frames[0].height,
                 "all frames must share dims");
  const double W = frames[0].width, H = frames[0].height;
  const int n = static_cast<int>(frames.size());
  VideoOutput<T> out;

  auto detect = [&](const Tensor<T>& m) {
    Tape<T> tape(false);
    return det::detect_on_feature(tape, p, tape.constant(m), cfg.detector, W, H,
                                  cfg.detector.score_threshold);
  };
  auto run = [&](const std::string& prefix, const std::vector<Tensor<T>>& feats, bool reverse) {
    std::vector<Tensor<T>> ms(n);
    Tensor<T> m, fp;
    for (int k = 0; k < n; ++k) {
      const int t = reverse ? n - 1 - k : k;
      Tape<T> tape(false);
      Var<T> f = tape.constant(feats[t]);
      if (m.empty()) m = Tensor<T>(feats[t].shape());
      Var<T> fpv = fp.empty() ? Var<T>{} : tape.constant(fp);
      m = memory_step(tape, p, cfg, prefix, tape.constant(m), fpv, f).value();
      fp = feats[t];
      ms[t] = m;
    }
    return ms;
  };

  if (cfg.direction == Direction::forward) {
    Tensor<T> m, fp;
    for (int t = 0; t < n; ++t) {
      Tape<T> tape(false);
      Var<T> f = det::backbone_forward(tape, p, tape.constant(to_tensor<T>(frames[t])));
      if (m.empty()) m = Tensor<T>(f.shape());
      Var<T> fpv = fp.empty() ? Var<T>{} : tape.constant(fp);
      Var<T> mv = memory_step(tape, p, cfg, kForwardCell, tape.constant(m), fpv, f);
      out.detections.push_back(det::detect_on_feature(tape, p, mv, cfg.detector, W, H,
                                                      cfg.detector.score_threshold));
      fp = f.value();
      m = mv.value();
      out.memory.push_back({m, t + 1});
    }
    return out;
  }

  std::vector<Tensor<T>> feats;
  for (const auto& img : frames) feats.push_back(frame_features(img, p));
  auto mf = run(kForwardCell, feats, false);
  auto mb = run(kBackwardCell, feats, true);
  for (int t = 0; t < n; ++t) {
    Tape<T> tape(false);
    Tensor<T> m = bidirectional_merge(tape, p, tape.constant(mf[t]), tape.constant(mb[t])).value();
    out.detections.push_back(detect(m));
    out.memory.push_back({std::move(m), t + 1});
  }
  return out;
}

}  // namespace occmem::video
