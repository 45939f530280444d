#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "occmem/core/error.hpp"
#include "occmem/nn/graph.hpp"
#include "occmem/nn/init.hpp"
#include "occmem/nn/ops.hpp"
#include "occmem/nn/tape.hpp"

namespace occmem::mem {

using nn::ParamStore;
using nn::Shape;
using nn::Tape;
using nn::Tensor;
using nn::Var;

enum class CellKind { none, stmm, matchtrans, learned_align };

// sigmoid, or a ReLU clipped to [0, 1]
enum class GateKind { sigmoid, relu_norm };

struct CellConfig {
  int channels = 64;
  int levels = 3;
  GateKind gate = GateKind::sigmoid;
  int radius = 2;
  double temperature = 0.1;
  // update-gate bias at init; unset picks 3.0 for sigmoid, 0.9 for relu_norm
  std::optional<double> z_bias;
  double init_std = 0.01;
  double decoder_coarse_gain = 0.5;
  double decoder_skip_gain = 0.5;

  double update_bias() const {
    if (z_bias) return *z_bias;
    return gate == GateKind::sigmoid ? 3.0 : 0.9;
  }
};

inline const char* to_string(CellKind k) {
  switch (k) {
    case CellKind::none: return "none";
    case CellKind::stmm: return "stmm";
    case CellKind::matchtrans: return "matchtrans";
    case CellKind::learned_align: return "learned_align";
  }
  return "?";
}

inline CellKind parse_cell_kind(const std::string& s) {
  if (s == "none" || s == "frame") return CellKind::none;
  if (s == "stmm") return CellKind::stmm;
  if (s == "matchtrans" || s == "stmm+matchtrans") return CellKind::matchtrans;
  if (s == "learned_align") return CellKind::learned_align;
  throw ContractError("unknown cell kind '" + s + "'");
}

inline const char* to_string(GateKind g) { return g == GateKind::sigmoid ? "sigmoid" : "relu_norm"; }

inline GateKind parse_gate_kind(const std::string& s) {
  if (s == "sigmoid") return GateKind::sigmoid;
  if (s == "relu_norm") return GateKind::relu_norm;
  throw ContractError("unknown gate '" + s + "'");
}

// Memory at a module boundary: full resolution, same channels as the backbone.
template <typename T>
struct MemoryState {
  Tensor<T> M;
  int timestep = 0;
};

template <typename T>
MemoryState<T> zero_memory(Shape feature_shape) {
  return {Tensor<T>(feature_shape), 0};
}

template <typename T>
struct FeaturePyramid {
  std::vector<Var<T>> levels;
  std::vector<std::pair<int, int>> dims;  // (h, w)

  int size() const { return static_cast<int>(levels.size()); }
};

inline std::vector<std::pair<int, int>> pyramid_dims(int h, int w, int levels) {
  OCCMEM_CHECK(levels >= 1, "pyramid needs at least one level, got ", levels);
  OCCMEM_CHECK(h >= 1 && w >= 1, "empty input ", h, "x", w);
  std::vector<std::pair<int, int>> dims{{h, w}};
  for (int l = 1; l < levels; ++l) {
    auto [ph, pw] = dims.back();
    // pooling a unit axis would floor to zero
    OCCMEM_CHECK(ph >= 2 && pw >= 2, "input ", h, "x", w, " too small for ", levels,
                 " pyramid levels");
    dims.push_back({nn::kernels::pool_out_dim(ph), nn::kernels::pool_out_dim(pw)});
  }
  return dims;
}

template <typename T>
FeaturePyramid<T> build_pyramid(Var<T> x, int levels) {
  FeaturePyramid<T> p;
  p.dims = pyramid_dims(x.shape().h, x.shape().w, levels);
  p.levels.push_back(x);
  for (int l = 1; l < levels; ++l) p.levels.push_back(nn::maxpool2x2(p.levels.back()));
  return p;
}

template <typename T>
Var<T> gate(Var<T> x, GateKind kind) {
  if (kind == GateKind::sigmoid) return nn::sigmoid(x);
  // min(max(x, 0), 1) = relu(x) - relu(x - 1)
  return nn::add(nn::relu(x), nn::affine(nn::relu(nn::affine(x, T(1), T(-1))), T(-1), T(0)));
}

namespace detail {

template <typename T>
Var<T> P(Tape<T>& tape, const ParamStore<T>& p, const std::string& name) {
  OCCMEM_CHECK(p.contains(name), "missing parameter '", name, "'");
  return tape.param(p, name);
}

inline std::string dec_name(const std::string& prefix, int level) {
  return prefix + "dec" + std::to_string(level);
}

}  // namespace detail

template <typename T>
void init_stmm_params(ParamStore<T>& out, const std::string& prefix, const CellConfig& cfg,
                      nn::Rng& rng) {
  const int C = cfg.channels;
  const Shape k3{C, C, 3, 3};
  const T s = static_cast<T>(cfg.init_std);
  auto small = [&] { return nn::randn<T>(k3, rng, s); };
  out.set(prefix + "wz.w", small());
  out.set(prefix + "wz.b", Tensor<T>(Shape{C, 1, 1, 1}, static_cast<T>(cfg.update_bias())));
  out.set(prefix + "uz.w", small());
  out.set(prefix + "wr.w", small());
  out.set(prefix + "wr.b", Tensor<T>(Shape{C, 1, 1, 1}));
  out.set(prefix + "ur.w", small());
  Tensor<T> w = small();
  nn::add_identity_kernel(w, 0, C, T(1));
  out.set(prefix + "w.w", std::move(w));
  out.set(prefix + "w.b", Tensor<T>(Shape{C, 1, 1, 1}));
  out.set(prefix + "u.w", small());
}

// One 3x3 (2C -> C) conv per level above the coarsest. Input channels are
// [upsampled coarse, skip].
template <typename T>
void init_decoder_params(ParamStore<T>& out, const std::string& prefix, const CellConfig& cfg,
                         nn::Rng& rng) {
  const int C = cfg.channels;
  for (int l = 0; l + 1 < cfg.levels; ++l) {
    Tensor<T> w = nn::randn<T>(Shape{C, 2 * C, 3, 3}, rng, static_cast<T>(cfg.init_std));
    nn::add_identity_kernel(w, 0, C, static_cast<T>(cfg.decoder_coarse_gain));
    nn::add_identity_kernel(w, C, C, static_cast<T>(cfg.decoder_skip_gain));
    out.set(detail::dec_name(prefix, l) + ".w", std::move(w));
    out.set(detail::dec_name(prefix, l) + ".b", Tensor<T>(Shape{C, 1, 1, 1}));
  }
}

template <typename T>
void init_cell_params(ParamStore<T>& out, const std::string& prefix, CellKind kind,
                      const CellConfig& cfg, nn::Rng& rng) {
  if (kind == CellKind::none) return;
  init_stmm_params(out, prefix, cfg, rng);
  if (kind == CellKind::learned_align) init_decoder_params(out, prefix, cfg, rng);
}

template <typename T>
struct StmmOutput {
  Var<T> z, r, candidate, memory;
};

template <typename T>
StmmOutput<T> stmm_step_detailed(Tape<T>& tape, const ParamStore<T>& p, const std::string& prefix,
                                 Var<T> m_prev, Var<T> f, const CellConfig& cfg) {
  OCCMEM_CHECK(m_prev.shape() == f.shape(), "memory ", m_prev.shape(), " vs feature ",
               f.shape());
  using detail::P;
  auto conv = [&](Var<T> x, const std::string& w) { return nn::conv2d(x, P(tape, p, prefix + w), 1, 1); };
  auto convb = [&](Var<T> x, const std::string& w, const std::string& b) {
    return nn::conv2d(x, P(tape, p, prefix + w), P(tape, p, prefix + b), 1, 1);
  };
  StmmOutput<T> o;
  o.z = gate(nn::add(convb(f, "wz.w", "wz.b"), conv(m_prev, "uz.w")), cfg.gate);
  o.r = gate(nn::add(convb(f, "wr.w", "wr.b"), conv(m_prev, "ur.w")), cfg.gate);
  o.candidate = nn::relu(nn::add(convb(f, "w.w", "w.b"), conv(nn::mul(o.r, m_prev), "u.w")));
  o.memory = nn::lerp(m_prev, o.candidate, o.z);
  return o;
}

template <typename T>
Var<T> stmm_step(Tape<T>& tape, const ParamStore<T>& p, const std::string& prefix, Var<T> m_prev,
                 Var<T> f, const CellConfig& cfg) {
  return stmm_step_detailed(tape, p, prefix, m_prev, f, cfg).memory;
}

template <typename T>
Var<T> matchtrans_warp(Var<T> m_prev, Var<T> f_prev, Var<T> f_cur, int radius, T temperature,
                       nn::kernels::AffinityField<T>* field = nullptr) {
  OCCMEM_CHECK(m_prev.shape() == f_prev.shape() && f_prev.shape() == f_cur.shape(),
               "matchtrans inputs must share dims");
  OCCMEM_CHECK(radius >= 1, "matchtrans radius must be >= 1");
  return nn::matchtrans(m_prev, f_prev, f_cur, radius, temperature, field);
}

// Warps M_{t-1} with F_{t-1} -> F_t affinity, then runs the STMM update.
// Without a previous feature (first frame) the warp is skipped.
template <typename T>
Var<T> matchtrans_step(Tape<T>& tape, const ParamStore<T>& p, const std::string& prefix,
                       Var<T> m_prev, Var<T> f_prev, Var<T> f, const CellConfig& cfg) {
  Var<T> m = m_prev;
  if (f_prev.defined())
    m = matchtrans_warp(m_prev, f_prev, f, cfg.radius, static_cast<T>(cfg.temperature));
  return stmm_step(tape, p, prefix, m, f, cfg);
}

template <typename T>
Var<T> decode_upsample(Tape<T>& tape, const ParamStore<T>& p, const std::string& prefix,
                       Var<T> coarse, const FeaturePyramid<T>& skips) {
  const int L = skips.size();
  OCCMEM_CHECK(L >= 1, "empty skip pyramid");
  const auto [ch, cw] = skips.dims.back();
  OCCMEM_CHECK(coarse.shape().h == ch && coarse.shape().w == cw, "coarse ", coarse.shape(),
               " does not match coarsest skip ", ch, "x", cw);
  Var<T> x = coarse;
  for (int l = L - 2; l >= 0; --l) {
    Var<T> up = nn::upsample2x(x);
    const auto [sh, sw] = skips.dims[l];
    const int pad_b = up.shape().h - sh, pad_r = up.shape().w - sw;
    OCCMEM_CHECK(pad_b >= 0 && pad_b <= 1 && pad_r >= 0 && pad_r <= 1,
                 "cannot match upsampled ", up.shape(), " to skip ", sh, "x", sw);
    Var<T> skip = nn::zero_pad(skips.levels[l], pad_r, pad_b);
    const std::string n = detail::dec_name(prefix, l);
    Var<T> y = nn::conv2d(nn::concat_channels(up, skip), detail::P(tape, p, n + ".w"),
                          detail::P(tape, p, n + ".b"), 1, 1);
    x = nn::crop(nn::relu(y), sh, sw);
  }
  return x;
}

template <typename T>
Var<T> learned_align_step(Tape<T>& tape, const ParamStore<T>& p, const std::string& prefix,
                          Var<T> m_prev, Var<T> f, const CellConfig& cfg) {
  OCCMEM_CHECK(m_prev.shape() == f.shape(), "memory ", m_prev.shape(), " vs feature ",
               f.shape());
  FeaturePyramid<T> pm = build_pyramid(m_prev, cfg.levels);
  FeaturePyramid<T> pf = build_pyramid(f, cfg.levels);
  Var<T> coarse = stmm_step(tape, p, prefix, pm.levels.back(), pf.levels.back(), cfg);
  return decode_upsample(tape, p, prefix, coarse, pf);
}

// Dispatch on kind; `none` returns the feature unchanged.
template <typename T>
Var<T> cell_step(CellKind kind, Tape<T>& tape, const ParamStore<T>& p, const std::string& prefix,
                 Var<T> m_prev, Var<T> f_prev, Var<T> f, const CellConfig& cfg) {
  switch (kind) {
    case CellKind::none: return f;
    case CellKind::stmm: return stmm_step(tape, p, prefix, m_prev, f, cfg);
    case CellKind::matchtrans: return matchtrans_step(tape, p, prefix, m_prev, f_prev, f, cfg);
    case CellKind::learned_align: return learned_align_step(tape, p, prefix, m_prev, f, cfg);
  }
  throw ContractError("bad cell kind");
}

struct CellDelta {
  std::int64_t params = 0;
  std::int64_t rf_multiplier = 1;
};

// Extra parameters of an L-level decoder over L = 1, and how much wider the
// 3x3 recurrent conv sees when applied at the coarsest level.
inline CellDelta cell_param_delta(int channels, int levels) {
  OCCMEM_CHECK(channels >= 1 && levels >= 1, "need C, L >= 1");
  CellDelta d;
  for (int l = 1; l < levels; ++l)
    d.params += nn::count_parameters(nn::OpGraph({nn::GraphOp::conv(3, 2 * channels, channels)}));
  auto rf = [&](int l) {
    nn::OpGraph g;
    for (int i = 1; i < l; ++i) g.push(nn::GraphOp::pool(channels));
    g.push(nn::GraphOp::conv(3, channels, channels));
    return nn::receptive_field(g).receptive_field;
  };
  d.rf_multiplier = (rf(levels) - 1) / (rf(1) - 1);
  return d;
}

}  // namespace occmem::mem
