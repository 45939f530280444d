#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "occmem/core/error.hpp"
#include "occmem/data/synth.hpp"
#include "occmem/nn/optim.hpp"
#include "occmem/video/video_detector.hpp"

namespace occmem::video {

using json = nlohmann::json;

struct TrainConfig {
  int bptt = 5;
  double lr = 1e-3;
  double lr_low = 1e-4;
  int eval_every = 50;  // steps per plateau check
  int patience = 5;
  double min_improvement = 0.01;
  bool flip = true;
  bool loss_on_occluded = true;
  std::uint64_t seed = 1;
  nn::SgdOptions sgd;

  void validate() const {
    OCCMEM_CHECK(bptt >= 1, "bptt must be >= 1");
    OCCMEM_CHECK(lr > 0 && lr_low > 0, "learning rates must be positive");
    OCCMEM_CHECK(eval_every >= 1 && patience >= 1, "bad plateau settings");
  }
};

// High rate until `patience` consecutive checks fail to beat the best value
// by `min_improvement` (relative), then the low rate for good.
class PlateauSchedule {
 public:
  PlateauSchedule() = default;
  PlateauSchedule(double high, double low, int patience, double min_improvement)
      : high_(high), low_(low), patience_(patience), min_improvement_(min_improvement) {}

  double lr() const { return dropped_ ? low_ : high_; }
  bool dropped() const { return dropped_; }
  int drop_check() const { return drop_check_; }
  int checks() const { return checks_; }

  // Returns true on the check that triggers the drop.
  bool observe(double value) {
    ++checks_;
    if (dropped_) return false;
    if (value < best_ * (1.0 - min_improvement_)) {
      best_ = value;
      stale_ = 0;
      return false;
    }
    if (++stale_ >= patience_) {
      dropped_ = true;
      drop_check_ = checks_;
      return true;
    }
    return false;
  }

  json state() const {
    return {{"best", best_}, {"stale", stale_}, {"dropped", dropped_},
            {"drop_check", drop_check_}, {"checks", checks_}};
  }
  void restore(const json& j) {
    best_ = j.at("best").is_null() ? std::numeric_limits<double>::infinity()
                                   : j.at("best").get<double>();
    stale_ = j.at("stale");
    dropped_ = j.at("dropped");
    drop_check_ = j.at("drop_check");
    checks_ = j.at("checks");
  }

 private:
  double high_ = 1e-3, low_ = 1e-4;
  int patience_ = 5;
  double min_improvement_ = 0.01;
  double best_ = std::numeric_limits<double>::infinity();
  int stale_ = 0;
  bool dropped_ = false;
  int drop_check_ = -1;
  int checks_ = 0;
};

struct TrainState {
  std::int64_t step = 0;
  std::int64_t episode = 0;
  double loss_sum = 0;  // since the last plateau check
  int loss_count = 0;
  double last_loss = 0;
  PlateauSchedule schedule;

  json to_json() const {
    return {{"step", step},           {"episode", episode},   {"loss_sum", loss_sum},
            {"loss_count", loss_count}, {"last_loss", last_loss}, {"schedule", schedule.state()}};
  }
  void restore(const json& j) {
    step = j.at("step");
    episode = j.at("episode");
    loss_sum = j.at("loss_sum");
    loss_count = j.at("loss_count");
    last_loss = j.at("last_loss");
    schedule.restore(j.at("schedule"));
  }
};

template <typename T>
class Trainer {
 public:
  Trainer(VideoConfig model, TrainConfig cfg, ParamStore<T> params)
      : model_(std::move(model)), cfg_(cfg), params_(std::move(params)), opt_(cfg.sgd) {
    model_.validate();
    cfg_.validate();
    state_.schedule = PlateauSchedule(cfg_.lr, cfg_.lr_low, cfg_.patience, cfg_.min_improvement);
  }

  // Runs whole sequences (in bptt windows) until `max_steps` updates.
  void fit_video(const std::vector<const synth::SequenceSample*>& seqs, std::int64_t max_steps) {
    OCCMEM_CHECK(!seqs.empty(), "no training sequences");
    while (state_.step < max_steps) {
      nn::Rng rng = episode_rng();
      const auto& s = *seqs[nn::uniform_int(rng, 0, static_cast<int>(seqs.size()) - 1)];
      const bool flip = cfg_.flip && (rng() & 1);
      train_sequence(s, flip);
      ++state_.episode;
    }
  }

  // Single-image updates (frame-level pretraining).
  void fit_frames(const std::vector<synth::Composite>& images, std::int64_t max_steps) {
    OCCMEM_CHECK(!images.empty(), "no training images");
    while (state_.step < max_steps) {
      nn::Rng rng = episode_rng();
      const auto& c = images[nn::uniform_int(rng, 0, static_cast<int>(images.size()) - 1)];
      const bool flip = cfg_.flip && (rng() & 1);
      Tape<T> tape;
      const Image img = flip ? flip_horizontal(c.image) : c.image;
      Var<T> f = det::backbone_forward(tape, params_, tape.constant(to_tensor<T>(img)));
      nn::Rng lrng = step_rng();
      Var<T> loss = det::detector_loss(tape, params_, f, gt_of(c.objects, flip, img.width),
                                       model_.detector, img.width, img.height, lrng)
                        .total();
      apply(tape, loss);
      ++state_.episode;
    }
  }

  // Loss of one bptt window; carries memory (values only) in/out.
  Var<T> window_loss(Tape<T>& tape, const std::vector<Image>& frames,
                     const std::vector<synth::FrameAnnotation>& anns, int t0, int t1, bool flip,
                     Tensor<T>& carry_m, Tensor<T>& carry_f, nn::Rng& rng) const {
    const int W = frames[0].width, H = frames[0].height;
    std::vector<Var<T>> feats;
    for (int t = t0; t < t1; ++t) {
      const Image img = flip ? flip_horizontal(frames[t]) : frames[t];
      feats.push_back(det::backbone_forward(tape, params_, tape.constant(to_tensor<T>(img))));
    }
    const int n = t1 - t0;
    std::vector<Var<T>> heads_in(n);
    Var<T> m = carry_m.empty() ? tape.constant(Tensor<T>(feats[0].shape())) : tape.constant(carry_m);
    Var<T> fp = carry_f.empty() ? Var<T>{} : tape.constant(carry_f);
    for (int k = 0; k < n; ++k) {
      m = memory_step(tape, params_, model_, kForwardCell, m, fp, feats[k]);
      fp = feats[k];
      heads_in[k] = m;
    }
    carry_m = m.value();
    carry_f = fp.value();
    if (model_.direction == Direction::bidirectional) {
      Var<T> mb = tape.constant(Tensor<T>(feats[0].shape()));
      Var<T> fb;
      for (int k = n - 1; k >= 0; --k) {
        mb = memory_step(tape, params_, model_, kBackwardCell, mb, fb, feats[k]);
        fb = feats[k];
        heads_in[k] = bidirectional_merge(tape, params_, heads_in[k], mb);
      }
    }
    std::vector<Var<T>> losses;
    for (int k = 0; k < n; ++k) {
      const auto& objs = anns[t0 + k].objects;
      std::vector<synth::ObjectAnnotation> kept;
      for (const auto& o : objs)
        if (cfg_.loss_on_occluded || !o.occluded) kept.push_back(o);
      losses.push_back(det::detector_loss(tape, params_, heads_in[k], gt_of(kept, flip, W),
                                          model_.detector, W, H, rng)
                           .total());
    }
    return nn::affine(nn::scalar_sum(losses), static_cast<T>(1.0 / n), T(0));
  }

  const ParamStore<T>& params() const { return params_; }
  ParamStore<T>& params() { return params_; }
  nn::Sgd<T>& optimizer() { return opt_; }
  const TrainState& state() const { return state_; }
  TrainState& state() { return state_; }
  const std::vector<json>& log() const { return log_; }
  std::vector<json>& log() { return log_; }
  const std::vector<double>& step_losses() const { return step_losses_; }
  const VideoConfig& model() const { return model_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  nn::Rng episode_rng() const {
    return nn::make_rng(cfg_.seed, (std::uint64_t{1} << 40) + static_cast<std::uint64_t>(state_.episode));
  }
  nn::Rng step_rng() const {
    return nn::make_rng(cfg_.seed, (std::uint64_t{2} << 40) + static_cast<std::uint64_t>(state_.step));
  }

  static det::BoxSet gt_of(const std::vector<synth::ObjectAnnotation>& objs, bool flip, int width) {
    det::BoxSet gt;
    for (const auto& o : objs) gt.push_back(flip ? det::flip_horizontal(o.box, width) : o.box);
    return gt;
  }

  void train_sequence(const synth::SequenceSample& s, bool flip) {
    const int n = static_cast<int>(s.frames.size());
    Tensor<T> carry_m, carry_f;
    for (int t0 = 0; t0 < n; t0 += cfg_.bptt) {
      const int t1 = std::min(n, t0 + cfg_.bptt);
      Tape<T> tape;
      nn::Rng rng = step_rng();
      Var<T> loss = window_loss(tape, s.frames, s.annotations, t0, t1, flip, carry_m, carry_f, rng);
      apply(tape, loss);
    }
  }

  void apply(Tape<T>& tape, Var<T> loss) {
    const double v = loss.value()[0];
    if (!std::isfinite(v))
      throw NumericError(detail::concat("training loss became non-finite at step ", state_.step,
                                        "; last finite loss ", state_.last_loss, " at step ",
                                        state_.step - 1));
    tape.backward(loss);
    nn::GradStore<T> grads;
    tape.collect_param_grads(grads);
    const double norm = opt_.step(params_, grads, state_.schedule.lr());
    if (!std::isfinite(norm))
      throw NumericError(detail::concat("gradient became non-finite at step ", state_.step,
                                        "; last finite loss ", state_.last_loss));
    step_losses_.push_back(v);
    state_.last_loss = v;
    state_.loss_sum += v;
    ++state_.loss_count;
    ++state_.step;
    if (state_.step % cfg_.eval_every == 0) {
      const double mean = state_.loss_sum / state_.loss_count;
      const bool drop = state_.schedule.observe(mean);
      log_.push_back({{"step", state_.step},
                      {"episode", state_.episode},
                      {"loss", mean},
                      {"lr", state_.schedule.lr()},
                      {"lr_dropped", drop}});
      state_.loss_sum = 0;
      state_.loss_count = 0;
    }
  }

  VideoConfig model_;
  TrainConfig cfg_;
  ParamStore<T> params_;
  nn::Sgd<T> opt_;
  TrainState state_;
  std::vector<json> log_;
  std::vector<double> step_losses_;
};

}  // namespace occmem::video
