#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "occmem/data/synth.hpp"
#include "occmem/nn/gradcheck.hpp"
#include "occmem/video/train.hpp"
#include "occmem/video/video_detector.hpp"

using namespace occmem;
using namespace occmem::video;

namespace {

VideoConfig small_model(CellKind cell, Direction dir = Direction::forward) {
  VideoConfig cfg;
  cfg.detector.channels = 16;
  cfg.detector.head_hidden = 32;
  cfg.detector.rpn_hidden = 16;
  cfg.detector.score_threshold = 0.0;
  cfg.cell = cell;
  cfg.direction = dir;
  cfg.cell_cfg.channels = 16;
  cfg.cell_cfg.levels = 2;
  return cfg;
}

synth::SceneSpec small_scene(int length) {
  synth::SceneSpec s;
  s.width = 64;
  s.height = 64;
  s.length = length;
  s.min_size = 16;
  s.max_size = 24;
  s.occluders = 0;
  return s;
}

bool same_params(const ParamStore<float>& a, const ParamStore<float>& b) {
  for (const auto& [name, t] : a) {
    if (!b.contains(name)) return false;
    if (t.vec() != b.at(name).vec()) return false;
  }
  return true;
}

}  // namespace

TEST(VideoForward, NoCellMatchesFrameDetector) {
  VideoConfig cfg = small_model(CellKind::none);
  nn::Rng rng = nn::make_rng(1, 0);
  auto p = init_video_params<float>(cfg, rng);
  auto seq = synth::generate_sequence(small_scene(4), 5);
  auto out = video_forward(seq.frames, p, cfg);
  ASSERT_EQ(out.detections.size(), 4u);
  for (int t = 0; t < 4; ++t) EXPECT_EQ(out.detections[t], det::detect_frame(seq.frames[t], p, cfg.detector));
}

TEST(VideoForward, ForwardModelIsCausal) {
  for (CellKind k : {CellKind::stmm, CellKind::matchtrans, CellKind::learned_align}) {
    VideoConfig cfg = small_model(k);
    nn::Rng rng = nn::make_rng(2, 0);
    auto p = init_video_params<float>(cfg, rng);
    auto seq = synth::generate_sequence(small_scene(6), 7);
    auto a = video_forward(seq.frames, p, cfg);
    auto frames = seq.frames;
    for (int t = 3; t < 6; ++t)
      for (auto& px : frames[t].pixels) px = static_cast<std::uint8_t>(255 - px);
    auto b = video_forward(frames, p, cfg);
    for (int t = 0; t < 3; ++t) {
      EXPECT_EQ(a.detections[t], b.detections[t]) << to_string(k);
      EXPECT_EQ(a.memory[t].M.vec(), b.memory[t].M.vec()) << to_string(k);
    }
    EXPECT_NE(a.memory[5].M.vec(), b.memory[5].M.vec());
  }
}

TEST(VideoForward, RepeatedRunsDoNotShareState) {
  VideoConfig cfg = small_model(CellKind::stmm);
  nn::Rng rng = nn::make_rng(3, 0);
  auto p = init_video_params<float>(cfg, rng);
  auto s1 = synth::generate_sequence(small_scene(4), 1);
  auto s2 = synth::generate_sequence(small_scene(4), 2);
  auto first = video_forward(s1.frames, p, cfg);
  video_forward(s2.frames, p, cfg);
  auto again = video_forward(s1.frames, p, cfg);
  for (int t = 0; t < 4; ++t) {
    EXPECT_EQ(first.detections[t], again.detections[t]);
    EXPECT_EQ(first.memory[t].M.vec(), again.memory[t].M.vec());
    EXPECT_EQ(first.memory[t].timestep, t + 1);
  }
}

TEST(VideoForward, BidirectionalSeesFuture) {
  VideoConfig cfg = small_model(CellKind::stmm, Direction::bidirectional);
  nn::Rng rng = nn::make_rng(4, 0);
  auto p = init_video_params<float>(cfg, rng);
  auto seq = synth::generate_sequence(small_scene(5), 3);
  auto a = video_forward(seq.frames, p, cfg);
  auto frames = seq.frames;
  for (auto& px : frames[4].pixels) px = static_cast<std::uint8_t>(255 - px);
  auto b = video_forward(frames, p, cfg);
  EXPECT_NE(a.memory[0].M.vec(), b.memory[0].M.vec());
  EXPECT_EQ(a.memory.size(), 5u);
}

TEST(VideoConfig, Validation) {
  VideoConfig cfg = small_model(CellKind::none, Direction::bidirectional);
  EXPECT_THROW(cfg.validate(), ContractError);
  cfg = small_model(CellKind::stmm);
  cfg.cell_cfg.channels = 8;
  EXPECT_THROW(cfg.validate(), ContractError);
  EXPECT_EQ(parse_direction("bidirectional"), Direction::bidirectional);
  EXPECT_THROW(parse_direction("sideways"), ContractError);
}

TEST(Merge, SymmetricAtInit) {
  VideoConfig cfg = small_model(CellKind::stmm, Direction::bidirectional);
  nn::Rng rng = nn::make_rng(5, 0);
  auto p = init_video_params<double>(cfg, rng);
  Tensor<double> a = nn::randn<double>(Shape{1, 16, 4, 5}, rng);
  Tensor<double> b = nn::randn<double>(Shape{1, 16, 4, 5}, rng);
  Tape<double> tape(false);
  auto ab = bidirectional_merge(tape, p, tape.constant(a), tape.constant(b)).value();
  auto ba = bidirectional_merge(tape, p, tape.constant(b), tape.constant(a)).value();
  for (std::size_t i = 0; i < ab.size(); ++i) {
    EXPECT_NEAR(ab[i], ba[i], 1e-12);
    EXPECT_NEAR(ab[i], 0.5 * (a[i] + b[i]), 1e-12);
  }
}

TEST(Merge, GradCheck) {
  nn::Rng rng = nn::make_rng(6, 0);
  const int C = 3;
  ParamStore<double> p;
  p.set("merge.w", nn::randn<double>(Shape{C, 2 * C, 1, 1}, rng));
  p.set("merge.b", nn::randn<double>(Shape{C, 1, 1, 1}, rng));
  p.set("in.a", nn::randn<double>(Shape{1, C, 3, 3}, rng));
  p.set("in.b", nn::randn<double>(Shape{1, C, 3, 3}, rng));
  Tensor<double> proj = nn::randn<double>(Shape{1, C, 3, 3}, rng);
  auto res = nn::grad_check_params(
      [&](Tape<double>& tape, const ParamStore<double>& ps) {
        Var<double> m = bidirectional_merge(tape, ps, tape.param(ps, "in.a"), tape.param(ps, "in.b"));
        return nn::dot_const(m, proj);
      },
      p);
  EXPECT_TRUE(res.passed(1e-4)) << res.max_relative_error;
}

TEST(Transfer, CopiesDetectorWeights) {
  VideoConfig frame_cfg = small_model(CellKind::none);
  nn::Rng rng = nn::make_rng(7, 0);
  auto frame = det::init_detector_params<float>(frame_cfg.detector, rng);
  for (CellKind k : {CellKind::stmm, CellKind::matchtrans, CellKind::learned_align}) {
    VideoConfig cfg = small_model(k, Direction::bidirectional);
    auto p = init_from_frame_detector(frame, cfg, rng);
    for (const auto& [name, t] : frame) EXPECT_EQ(p.at(name).vec(), t.vec()) << name;
    EXPECT_TRUE(p.contains("cell.w.w"));
    EXPECT_TRUE(p.contains("cell_bwd.w.w"));
    EXPECT_TRUE(p.contains("merge.w"));
  }
  VideoConfig wider = small_model(CellKind::stmm);
  wider.detector.channels = wider.cell_cfg.channels = 32;
  EXPECT_THROW(init_from_frame_detector(frame, wider, rng), ContractError);
  auto missing = frame;
  missing.erase(missing.begin()->first);
  EXPECT_THROW(init_from_frame_detector(missing, small_model(CellKind::stmm), rng), ContractError);
}

TEST(Plateau, DropsExactlyOnce) {
  PlateauSchedule s(1e-3, 1e-4, 3, 0.01);
  const std::vector<double> values = {10, 9, 8, 7.99, 7.95, 8.5, 1, 0.5, 9, 9, 9, 9};
  int drops = 0, when = -1;
  for (std::size_t i = 0; i < values.size(); ++i)
    if (s.observe(values[i])) {
      ++drops;
      when = static_cast<int>(i) + 1;
    }
  // 7.99, 7.95, 8.5 all fail the 1% bar against 8
  EXPECT_EQ(drops, 1);
  EXPECT_EQ(when, 6);
  EXPECT_EQ(s.drop_check(), 6);
  EXPECT_DOUBLE_EQ(s.lr(), 1e-4);

  PlateauSchedule fresh(1e-3, 1e-4, 3, 0.01);
  fresh.restore(s.state());
  EXPECT_TRUE(fresh.dropped());
  PlateauSchedule unseen(1e-3, 1e-4, 3, 0.01);
  unseen.restore(PlateauSchedule(1e-3, 1e-4, 3, 0.01).state());
  EXPECT_FALSE(unseen.dropped());
  EXPECT_FALSE(unseen.observe(100));
}

TEST(Train, FlipEqualsTrainingOnMirroredClip) {
  VideoConfig cfg = small_model(CellKind::stmm);
  nn::Rng rng = nn::make_rng(8, 0);
  auto p = init_video_params<double>(cfg, rng);
  auto seq = synth::generate_sequence(small_scene(3), 9);
  TrainConfig tc;
  Trainer<double> tr(cfg, tc, p);

  std::vector<Image> mirrored;
  for (const auto& f : seq.frames) mirrored.push_back(flip_horizontal(f));
  auto anns = seq.annotations;
  for (auto& fa : anns)
    for (auto& o : fa.objects) o.box = det::flip_horizontal(o.box, 64);

  Tape<double> t1, t2;
  Tensor<double> m1, f1, m2, f2;
  nn::Rng r1 = nn::make_rng(1, 1), r2 = nn::make_rng(1, 1);
  const double a = tr.window_loss(t1, seq.frames, seq.annotations, 0, 3, true, m1, f1, r1).value()[0];
  const double b = tr.window_loss(t2, mirrored, anns, 0, 3, false, m2, f2, r2).value()[0];
  EXPECT_DOUBLE_EQ(a, b);
  EXPECT_EQ(m1.vec(), m2.vec());
}

TEST(Train, DeterministicForSeed) {
  VideoConfig cfg = small_model(CellKind::learned_align);
  nn::Rng rng = nn::make_rng(9, 0);
  auto p = init_video_params<float>(cfg, rng);
  std::vector<synth::SequenceSample> data;
  for (int i = 0; i < 3; ++i) data.push_back(synth::generate_sequence(small_scene(4), 100 + i));
  std::vector<const synth::SequenceSample*> ptrs;
  for (auto& s : data) ptrs.push_back(&s);
  TrainConfig tc;
  tc.bptt = 2;
  tc.eval_every = 2;
  Trainer<float> a(cfg, tc, p), b(cfg, tc, p);
  a.fit_video(ptrs, 6);
  b.fit_video(ptrs, 6);
  EXPECT_TRUE(same_params(a.params(), b.params()));
  EXPECT_EQ(a.step_losses(), b.step_losses());
  EXPECT_EQ(a.log(), b.log());
  EXPECT_FALSE(same_params(a.params(), p));
}

TEST(Train, ResumeMatchesUninterrupted) {
  VideoConfig cfg = small_model(CellKind::matchtrans);
  nn::Rng rng = nn::make_rng(10, 0);
  auto p = init_video_params<float>(cfg, rng);
  std::vector<synth::SequenceSample> data;
  for (int i = 0; i < 3; ++i) data.push_back(synth::generate_sequence(small_scene(4), 200 + i));
  std::vector<const synth::SequenceSample*> ptrs;
  for (auto& s : data) ptrs.push_back(&s);
  TrainConfig tc;
  tc.bptt = 2;
  tc.eval_every = 3;
  tc.patience = 1;

  Trainer<float> full(cfg, tc, p);
  full.fit_video(ptrs, 8);

  Trainer<float> first(cfg, tc, p);
  first.fit_video(ptrs, 4);
  Trainer<float> second(cfg, tc, first.params());
  second.optimizer().velocity() = first.optimizer().velocity();
  second.state().restore(json::parse(first.state().to_json().dump()));
  second.log() = first.log();
  second.fit_video(ptrs, 8);

  EXPECT_TRUE(same_params(full.params(), second.params()));
  EXPECT_EQ(full.log(), second.log());
  EXPECT_EQ(full.state().to_json(), second.state().to_json());
}

TEST(Train, NonFiniteLossAborts) {
  VideoConfig cfg = small_model(CellKind::stmm);
  nn::Rng rng = nn::make_rng(11, 0);
  auto p = init_video_params<float>(cfg, rng);
  p.at("cell.w.b")[0] = std::numeric_limits<float>::quiet_NaN();
  auto seq = synth::generate_sequence(small_scene(3), 4);
  Trainer<float> tr(cfg, TrainConfig{}, p);
  try {
    tr.fit_video({&seq}, 2);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos) << e.what();
  }
}

TEST(Train, OverfitsOneClip) {
  VideoConfig cfg = small_model(CellKind::stmm);
  nn::Rng rng = nn::make_rng(12, 0);
  auto p = init_video_params<float>(cfg, rng);
  auto seq = synth::generate_sequence(small_scene(5), 21);
  TrainConfig tc;
  tc.bptt = 5;
  tc.lr = 0.01;
  tc.flip = false;
  tc.eval_every = 1000;
  Trainer<float> tr(cfg, tc, p);
  tr.fit_video({&seq}, 500);
  const auto& L = tr.step_losses();
  ASSERT_EQ(L.size(), 500u);
  double tail = 0;
  for (std::size_t i = L.size() - 20; i < L.size(); ++i) tail += L[i] / 20;
  EXPECT_LE(tail, 0.1 * L.front()) << "first " << L.front() << " tail " << tail;
}
