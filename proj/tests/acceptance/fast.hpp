#pragma once

// Criteria that need no training: property suite, scaling, reduction
// identity, determinism of the command-line pipeline.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>

#include "common.hpp"
#include "occmem/data/synth.hpp"
#include "occmem/detection/frame_detector.hpp"
#include "occmem/eval/metrics.hpp"
#include "occmem/memory/cells.hpp"
#include "occmem/nn/gradcheck.hpp"
#include "occmem/nn/graph.hpp"
#include "occmem/video/video_detector.hpp"

namespace acceptance {

using namespace occmem;
using nn::Rng;
using nn::Shape;
using nn::Tape;
using nn::Tensor;
using nn::Var;

inline Tensor<double> rnd(Shape s, Rng& rng) { return nn::randn<double>(s, rng); }

// ---------------------------------------------------------------------------
// 1. property suite

inline double worst_op_grad_error() {
  using Fn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;
  Rng rng = nn::make_rng(101, 0);
  double worst = 0;
  auto check = [&](Fn f, std::vector<Tensor<double>> in) {
    auto r = nn::grad_check(f, in);
    worst = std::max(worst, r.finite ? r.max_relative_error : std::numeric_limits<double>::infinity());
  };
  const auto x = rnd({1, 2, 5, 7}, rng);
  const auto p_conv = rnd({1, 3, 5, 7}, rng), p_stride = rnd({1, 3, 3, 4}, rng);
  check([&](Tape<double>&, const auto& in) { return nn::dot_const(nn::conv2d(in[0], in[1], in[2], 1, 1), p_conv); },
        {x, rnd({3, 2, 3, 3}, rng), rnd({3, 1, 1, 1}, rng)});
  check([&](Tape<double>&, const auto& in) { return nn::dot_const(nn::conv2d(in[0], in[1], 2, 1), p_stride); },
        {x, rnd({3, 2, 3, 3}, rng)});
  const auto p_pool = rnd({1, 2, 3, 4}, rng), p_up = rnd({1, 2, 10, 14}, rng), p_pad = rnd({1, 2, 6, 8}, rng);
  check([&](Tape<double>&, const auto& in) { return nn::dot_const(nn::maxpool2x2(in[0]), p_pool); }, {x});
  check([&](Tape<double>&, const auto& in) { return nn::dot_const(nn::upsample2x(in[0]), p_up); }, {x});
  check([&](Tape<double>&, const auto& in) { return nn::dot_const(nn::zero_pad(in[0], 1, 1), p_pad); }, {x});
  const auto p_crop = rnd({1, 2, 4, 5}, rng), p_cat = rnd({1, 5, 5, 7}, rng);
  check([&](Tape<double>&, const auto& in) { return nn::dot_const(nn::crop(in[0], 4, 5), p_crop); }, {x});
  check([&](Tape<double>&, const auto& in) { return nn::dot_const(nn::concat_channels(in[0], in[1]), p_cat); },
        {x, rnd({1, 3, 5, 7}, rng)});
  const Shape s{2, 3, 2, 2};
  const auto p_el = rnd(s, rng);
  check([&](Tape<double>&, const auto& in) {
    return nn::dot_const(nn::lerp(nn::relu(in[0]), nn::mul(in[0], in[1]), nn::sigmoid(in[2])), p_el);
  }, {rnd(s, rng), rnd(s, rng), rnd(s, rng)});
  std::vector<double> targets(24), weights(24);
  for (int i = 0; i < 24; ++i) {
    targets[i] = i % 3 == 0;
    weights[i] = i % 5 != 0;
  }
  check([&](Tape<double>&, const auto& in) {
    return nn::scalar_sum<double>({nn::sigmoid_bce(in[0], targets, weights, 7.0),
                                   nn::smooth_l1(in[1], targets, weights, 3.0, 1.0 / 9),
                                   nn::softmax_cross_entropy(nn::reshape(in[2], Shape{6, 4, 1, 1}), {0, 1, 2, 3, 0, 2})});
  }, {rnd(s, rng), rnd(s, rng), rnd(s, rng)});
  const std::vector<double> rois = {0.3, 0.2, 4.6, 5.1, 1.0, 1.0, 3.0, 2.5};
  const auto p_lin = rnd({2, 4, 1, 1}, rng);
  check([&](Tape<double>&, const auto& in) {
    auto flat = nn::reshape(nn::roi_pool(in[0], rois, 2), Shape{2, 12, 1, 1});
    return nn::dot_const(nn::relu(nn::linear(flat, in[1], in[2])), p_lin);
  }, {rnd({1, 3, 6, 6}, rng), rnd({4, 12, 1, 1}, rng), rnd({4, 1, 1, 1}, rng)});
  return worst;
}

inline nn::ParamStore<double> cell_store(mem::CellKind kind, const mem::CellConfig& cfg, std::uint64_t seed) {
  nn::ParamStore<double> p;
  Rng rng = nn::make_rng(seed, 0);
  mem::init_cell_params(p, "cell.", kind, cfg, rng);
  return p;
}

inline double worst_cell_grad_error() {
  double worst = 0;
  auto take = [&](const nn::GradCheckResult& r) {
    worst = std::max(worst, r.finite ? r.max_relative_error : std::numeric_limits<double>::infinity());
  };
  // relu and the clamp gate have kinks; a 1e-5 step straddles one now and then
  const nn::GradCheckOptions opt{1e-6};
  Rng rng = nn::make_rng(102, 0);
  for (auto gate : {mem::GateKind::sigmoid, mem::GateKind::relu_norm}) {
    mem::CellConfig cfg;
    cfg.channels = 2;
    cfg.gate = gate;
    cfg.init_std = 0.3;
    cfg.radius = 1;
    cfg.temperature = 0.5;
    for (auto kind : {mem::CellKind::stmm, mem::CellKind::matchtrans, mem::CellKind::learned_align}) {
      auto p = cell_store(kind, cfg, 103);
      const Shape s{1, 2, 7, 6};
      p.set("in.m", rnd(s, rng));
      p.set("in.fp", rnd(s, rng));
      p.set("in.f1", rnd(s, rng));
      p.set("in.f2", rnd(s, rng));
      const auto proj = rnd(s, rng);
      take(nn::grad_check_params(
          [&](Tape<double>& t, const nn::ParamStore<double>& ps) {
            Var<double> m1 = mem::cell_step(kind, t, ps, "cell.", t.param(ps, "in.m"), t.param(ps, "in.fp"),
                                            t.param(ps, "in.f1"), cfg);
            Var<double> m2 = mem::cell_step(kind, t, ps, "cell.", m1, t.param(ps, "in.f1"), t.param(ps, "in.f2"), cfg);
            return nn::dot_const(m2, proj);
          },
          p, opt));
    }
  }
  nn::ParamStore<double> merge;
  merge.set("merge.w", rnd({3, 6, 1, 1}, rng));
  merge.set("merge.b", rnd({3, 1, 1, 1}, rng));
  merge.set("in.a", rnd({1, 3, 3, 3}, rng));
  merge.set("in.b", rnd({1, 3, 3, 3}, rng));
  const auto proj = rnd({1, 3, 3, 3}, rng);
  take(nn::grad_check_params(
      [&](Tape<double>& t, const nn::ParamStore<double>& ps) {
        return nn::dot_const(video::bidirectional_merge(t, ps, t.param(ps, "in.a"), t.param(ps, "in.b")), proj);
      },
      merge));
  return worst;
}

inline det::BoxSet nms_oracle(det::BoxSet boxes, double thr) {
  det::BoxSet out;
  while (!boxes.empty()) {
    auto best = std::max_element(boxes.begin(), boxes.end(),
                                 [](const det::Box& a, const det::Box& b) { return a.score < b.score; });
    const det::Box keep = *best;
    out.push_back(keep);
    det::BoxSet rest;
    for (auto it = boxes.begin(); it != boxes.end(); ++it)
      if (it != best && !(it->label == keep.label && det::iou(*it, keep) > thr)) rest.push_back(*it);
    boxes = rest;
  }
  return out;
}

inline det::Box random_box(Rng& rng, double extent = 30) {
  const double x = nn::uniform(rng, 0, extent), y = nn::uniform(rng, 0, extent);
  return det::Box{x, y, x + nn::uniform(rng, 3, 15), y + nn::uniform(rng, 3, 15), nn::uniform01(rng),
                  nn::uniform_int(rng, 1, 2)};
}

inline int nms_mismatches(int cases) {
  Rng rng = nn::make_rng(104, 0);
  int bad = 0;
  for (int i = 0; i < cases; ++i) {
    det::BoxSet boxes;
    const int n = nn::uniform_int(rng, 0, 15);
    for (int k = 0; k < n; ++k) boxes.push_back(random_box(rng));
    const double thr = nn::uniform(rng, 0.1, 0.9);
    bad += !(det::nms(boxes, thr) == nms_oracle(boxes, thr));
  }
  return bad;
}

// PR curve re-derived one rank at a time, each prefix re-matched from scratch.
inline double ap_oracle(const std::vector<det::BoxSet>& dets, const std::vector<det::BoxSet>& gts, double thr) {
  struct D {
    double s;
    int f;
    det::Box b;
  };
  std::vector<D> all;
  for (int f = 0; f < static_cast<int>(dets.size()); ++f)
    for (const auto& b : dets[f]) all.push_back({b.score, f, b});
  for (std::size_t i = 1; i < all.size(); ++i)
    for (std::size_t j = i; j > 0 && all[j].s > all[j - 1].s; --j) std::swap(all[j], all[j - 1]);
  int total = 0;
  for (const auto& g : gts) total += static_cast<int>(g.size());
  const int n = static_cast<int>(all.size());
  std::vector<int> tp(n + 1, 0);
  for (int k = 1; k <= n; ++k) {
    std::vector<std::vector<bool>> used;
    for (const auto& g : gts) used.emplace_back(g.size(), false);
    for (int i = 0; i < k; ++i) {
      int best = -1;
      double bo = -1;
      for (int g = 0; g < static_cast<int>(gts[all[i].f].size()); ++g) {
        const double o = det::iou(all[i].b, gts[all[i].f][g]);
        if (!used[all[i].f][g] && o >= thr && o > bo) {
          bo = o;
          best = g;
        }
      }
      if (best >= 0) {
        used[all[i].f][best] = true;
        ++tp[k];
      }
    }
  }
  double ap = 0;
  for (int k = 1; k <= n; ++k) {
    if (tp[k] == tp[k - 1]) continue;
    double bp = 0;
    for (int j = k; j <= n; ++j) bp = std::max(bp, tp[j] / static_cast<double>(j));
    ap += bp;
  }
  return ap / total;
}

inline int ap_mismatches(int cases) {
  Rng rng = nn::make_rng(105, 0);
  int bad = 0;
  for (int trial = 0; trial < cases; ++trial) {
    const int frames = nn::uniform_int(rng, 1, 3);
    std::vector<det::BoxSet> dets(frames), gts(frames);
    const int ng = nn::uniform_int(rng, 1, 5), nd = nn::uniform_int(rng, 0, 10);
    for (int i = 0; i < ng; ++i) gts[nn::uniform_int(rng, 0, frames - 1)].push_back(random_box(rng));
    for (int i = 0; i < nd; ++i) {
      const int f = nn::uniform_int(rng, 0, frames - 1);
      det::Box b = random_box(rng);
      if (!gts[f].empty() && nn::uniform01(rng) < 0.6) {
        b = gts[f][nn::uniform_int(rng, 0, static_cast<int>(gts[f].size()) - 1)];
        const double j = nn::uniform(rng, -3, 3);
        b.x1 += j;
        b.x2 += j;
      }
      b.score = nn::uniform_int(rng, 1, 6) / 6.0;
      dets[f].push_back(b);
    }
    bad += std::fabs(*eval::average_precision(dets, gts, 0.5) - ap_oracle(dets, gts, 0.5)) > 1e-12;
  }
  return bad;
}

inline int matchtrans_violations(int cases) {
  Rng rng = nn::make_rng(106, 0);
  int bad = 0;
  for (int trial = 0; trial < cases; ++trial) {
    const int h = nn::uniform_int(rng, 2, 7), w = nn::uniform_int(rng, 2, 7);
    const int c = nn::uniform_int(rng, 1, 4), k = nn::uniform_int(rng, 1, 3);
    const Shape s{1, c, h, w};
    auto m = rnd(s, rng), fp = rnd(s, rng), fc = rnd(s, rng);
    nn::kernels::AffinityField<double> field;
    Tape<double> tape(false);
    auto out = mem::matchtrans_warp(tape.constant(m), tape.constant(fp), tape.constant(fc), k,
                                    0.1 + nn::uniform01(rng), &field).value();
    bool ok = true;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double sum = 0;
        for (int dy = -k; dy <= k; ++dy)
          for (int dx = -k; dx <= k; ++dx) {
            const double a = field.weight(y, x, dy, dx);
            const bool inside = y + dy >= 0 && y + dy < h && x + dx >= 0 && x + dx < w;
            ok = ok && a >= 0 && (inside || a == 0);
            sum += a;
          }
        ok = ok && std::fabs(sum - 1) < 1e-6;
        for (int ch = 0; ch < c; ++ch) {
          double lo = 1e300, hi = -1e300;
          for (int dy = -k; dy <= k; ++dy)
            for (int dx = -k; dx <= k; ++dx) {
              const int yy = y + dy, xx = x + dx;
              if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
              lo = std::min(lo, m.at(0, ch, yy, xx));
              hi = std::max(hi, m.at(0, ch, yy, xx));
            }
          ok = ok && out.at(0, ch, y, x) >= lo - 1e-12 && out.at(0, ch, y, x) <= hi + 1e-12;
        }
      }
    bad += !ok;
  }
  return bad;
}

inline int decode_shape_failures() {
  mem::CellConfig cfg;
  cfg.channels = 2;
  auto p = cell_store(mem::CellKind::learned_align, cfg, 107);
  Rng rng = nn::make_rng(108, 0);
  int bad = 0;
  for (int h = 4; h <= 33; ++h)
    for (int w = 4; w <= 33; ++w) {
      Tape<double> tape(false);
      auto pyr = mem::build_pyramid(tape.constant(rnd({1, 2, h, w}, rng)), 3);
      Var<double> coarse = tape.constant(rnd(pyr.levels.back().shape(), rng));
      bad += !(mem::decode_upsample(tape, p, "cell.", coarse, pyr).shape() == Shape{1, 2, h, w});
    }
  return bad;
}

inline bool single_level_is_stmm() {
  mem::CellConfig cfg;
  cfg.channels = 4;
  cfg.levels = 1;
  cfg.init_std = 0.3;
  auto p = cell_store(mem::CellKind::learned_align, cfg, 109);
  Rng rng = nn::make_rng(110, 0);
  bool same = true;
  for (int trial = 0; trial < 20; ++trial) {
    auto m = rnd({1, 4, 9, 7}, rng), f = rnd({1, 4, 9, 7}, rng);
    Tape<float> a(false), b(false);
    auto pf = p.cast<float>();
    same = same && mem::learned_align_step(a, pf, "cell.", a.constant(m.cast<float>()), a.constant(f.cast<float>()), cfg).value() ==
                       mem::stmm_step(b, pf, "cell.", b.constant(m.cast<float>()), b.constant(f.cast<float>()), cfg).value();
  }
  return same;
}

inline Result criterion1() {
  Timer t;
  const double op = worst_op_grad_error();
  const double cell = worst_cell_grad_error();
  const int nms_bad = nms_mismatches(1000);
  const int ap_bad = ap_mismatches(1000);
  const int mt_bad = matchtrans_violations(1000);
  const int dec_bad = decode_shape_failures();
  const bool ident = single_level_is_stmm();
  const double secs = t.seconds();
  Result r;
  r.pass = op < 1e-4 && cell < 1e-3 && nms_bad == 0 && ap_bad == 0 && mt_bad == 0 && dec_bad == 0 && ident &&
           secs < 600;
  r.detail = fmt("op grad err %.2e, cell grad err %.2e, nms %d/1000 off, ap %d/1000 off, matchtrans %d/1000 off, "
                 "decode %d/900 bad shapes, L=1 identity %s, %.1fs",
                 op, cell, nms_bad, ap_bad, mt_bad, dec_bad, ident ? "yes" : "no", secs);
  r.values = {{"op_grad_error", op}, {"cell_grad_error", cell}, {"nms_mismatches", nms_bad},
              {"ap_mismatches", ap_bad}, {"matchtrans_violations", mt_bad}, {"decode_bad_shapes", dec_bad},
              {"single_level_identity", ident}, {"seconds", secs}};
  return r;
}

// ---------------------------------------------------------------------------
// 2. parameter / receptive-field scaling

inline Result criterion2() {
  Timer t;
  const int C = 64;
  auto d1 = mem::cell_param_delta(C, 1), d2 = mem::cell_param_delta(C, 2), d3 = mem::cell_param_delta(C, 3);
  const std::int64_t unit = d2.params;
  const bool linear = d1.params == 0 && d3.params == 2 * unit && unit > 0;
  const bool doubling = d1.rf_multiplier == 1 && d2.rf_multiplier == 2 && d3.rf_multiplier == 4;
  // the reported delta must match what initialisation actually allocates
  bool counted = true;
  for (int L = 1; L <= 3; ++L) {
    mem::CellConfig cfg;
    cfg.channels = C;
    cfg.levels = L;
    Rng rng = nn::make_rng(111, 0);
    nn::ParamStore<float> stmm, la;
    mem::init_cell_params(stmm, "c.", mem::CellKind::stmm, cfg, rng);
    mem::init_cell_params(la, "c.", mem::CellKind::learned_align, cfg, rng);
    counted = counted && static_cast<std::int64_t>(la.total_elements() - stmm.total_elements()) ==
                             mem::cell_param_delta(C, L).params;
  }
  const double secs = t.seconds();
  Result r;
  r.pass = linear && doubling && counted && secs < 1.0;
  r.detail = fmt("dP = %lld : %lld : %lld, rf x%lld : x%lld : x%lld, matches init %s, %.3fs",
                 static_cast<long long>(d1.params), static_cast<long long>(d2.params),
                 static_cast<long long>(d3.params), static_cast<long long>(d1.rf_multiplier),
                 static_cast<long long>(d2.rf_multiplier), static_cast<long long>(d3.rf_multiplier),
                 counted ? "yes" : "no", secs);
  r.values = {{"delta_params", {d1.params, d2.params, d3.params}},
              {"rf_multiplier", {d1.rf_multiplier, d2.rf_multiplier, d3.rf_multiplier}}};
  return r;
}

// ---------------------------------------------------------------------------
// 7. reduction identity

inline Result criterion7() {
  video::VideoConfig cfg;  // full-size model, cell none
  Rng rng = nn::make_rng(112, 0);
  auto p = video::init_video_params<float>(cfg, rng);
  // untrained heads score near 1/(K+1); keep every box so the comparison is not vacuous
  cfg.detector.score_threshold = 0.0;
  int mismatches = 0;
  std::size_t boxes = 0;
  for (int i = 0; i < 100; ++i) {
    Image img(128, 128, 3);
    Rng irng = nn::make_rng(113, static_cast<std::uint64_t>(i));
    for (auto& px : img.pixels) px = static_cast<std::uint8_t>(nn::uniform_int(irng, 0, 255));
    auto out = video::video_forward(std::vector<Image>{img}, p, cfg);
    auto ref = det::detect_frame(img, p, cfg.detector);
    boxes += ref.size();
    mismatches += !(out.detections[0] == ref);
  }
  Result r;
  r.pass = mismatches == 0 && boxes > 0;
  r.detail = fmt("%d/100 images differ (%zu boxes compared)", mismatches, boxes);
  r.values = {{"mismatches", mismatches}, {"boxes", boxes}};
  return r;
}

// ---------------------------------------------------------------------------
// 8. determinism of gen / train / eval

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Byte comparison of every regular file under two trees.
inline int tree_differences(const std::filesystem::path& a, const std::filesystem::path& b, int* files) {
  namespace fs = std::filesystem;
  int diff = 0;
  std::vector<std::string> ra, rb;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) ra.push_back(fs::relative(e.path(), a).generic_string());
  for (const auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file()) rb.push_back(fs::relative(e.path(), b).generic_string());
  std::sort(ra.begin(), ra.end());
  std::sort(rb.begin(), rb.end());
  if (ra != rb) return 1 << 20;
  for (const auto& r : ra) diff += slurp(a / r) != slurp(b / r);
  *files += static_cast<int>(ra.size());
  return diff;
}

inline Result criterion8(const std::string& cli, const std::filesystem::path& work) {
  namespace fs = std::filesystem;
  Result r;
  if (cli.empty() || !fs::exists(cli)) {
    r.detail = "occmem binary not found (pass --cli)";
    return r;
  }
  fs::remove_all(work);
  fs::create_directories(work);
  {
    std::ofstream cfg(work / "tiny.cfg");
    cfg << "preset = assembly\nscene.width = 64\nscene.height = 64\nscene.length = 34\n"
           "scene.min_size = 16\nscene.max_size = 24\ndata.train_sequences = 2\ndata.test_sequences = 1\n"
           "data.composites = 8\nmodel.channels = 16\nmodel.cell = learned_align\npretrain.steps = 4\n"
           "train.steps = 6\ntrain.checkpoint_every = 3\nseed = 5\n";
  }
  int failures = 0;
  for (const char* run : {"a", "b"}) {
    const std::string base = "cd '" + work.string() + "' && '" + cli + "' ";
    const std::string r_ = std::string(run);
    failures += std::system((base + "gen -c tiny.cfg -o data_" + r_ + " > gen_" + r_ + ".out 2>/dev/null").c_str()) != 0;
    failures += std::system((base + "train -c tiny.cfg -d data_" + r_ + " -o run_" + r_ + " > train_" + r_ + ".out 2>/dev/null").c_str()) != 0;
    failures += std::system((base + "eval -c tiny.cfg -w run_" + r_ + "/weights.occw -d data_" + r_ +
                             " -o eval_" + r_ + "/report.json > eval_" + r_ + ".out 2>/dev/null").c_str()) != 0;
  }
  int files = 0, diffs = 0;
  if (!failures)
    for (const char* d : {"data_", "run_", "eval_"}) diffs += tree_differences(work / (std::string(d) + "a"), work / (std::string(d) + "b"), &files);
  r.pass = failures == 0 && diffs == 0 && files > 0;
  r.detail = fmt("%d command failures, %d of %d files differ", failures, diffs, files);
  r.values = {{"command_failures", failures}, {"differing_files", diffs}, {"files", files}};
  if (r.pass) fs::remove_all(work);
  return r;
}

}  // namespace acceptance
