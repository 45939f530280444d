#pragma once

// Flat key = value run configuration. See docs/config.md for the schema.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "occmem/core/error.hpp"
#include "occmem/data/dataset.hpp"
#include "occmem/data/synth.hpp"
#include "occmem/eval/evaluate.hpp"
#include "occmem/video/train.hpp"
#include "occmem/video/video_detector.hpp"

namespace occmem::io {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Model config <-> JSON (stored in weight archives).

inline json to_json(const det::DetectorConfig& d) {
  return {{"num_classes", d.num_classes},
          {"channels", d.channels},
          {"stem_widths", d.stem_widths},
          {"rpn_hidden", d.rpn_hidden},
          {"head_hidden", d.head_hidden},
          {"stride", d.stride},
          {"anchor_scales", d.anchor_scales},
          {"anchor_ratios", d.anchor_ratios},
          {"rpn_nms", d.rpn_nms},
          {"rpn_pre_nms", d.rpn_pre_nms},
          {"rpn_post_nms_train", d.rpn_post_nms_train},
          {"rpn_post_nms_test", d.rpn_post_nms_test},
          {"rpn_batch", d.rpn_batch},
          {"rpn_pos_fraction", d.rpn_pos_fraction},
          {"rpn_pos_iou", d.rpn_pos_iou},
          {"rpn_neg_iou", d.rpn_neg_iou},
          {"roi_out", d.roi_out},
          {"rois_per_image", d.rois_per_image},
          {"roi_fg_fraction", d.roi_fg_fraction},
          {"roi_fg_iou", d.roi_fg_iou},
          {"nms_threshold", d.nms_threshold},
          {"score_threshold", d.score_threshold},
          {"max_detections", d.max_detections}};
}

inline det::DetectorConfig detector_config_from_json(const json& j) {
  det::DetectorConfig d;
  d.num_classes = j.at("num_classes");
  d.channels = j.at("channels");
  d.stem_widths = j.at("stem_widths");
  d.rpn_hidden = j.at("rpn_hidden");
  d.head_hidden = j.at("head_hidden");
  d.stride = j.at("stride");
  d.anchor_scales = j.at("anchor_scales").get<std::vector<double>>();
  d.anchor_ratios = j.at("anchor_ratios").get<std::vector<double>>();
  d.rpn_nms = j.at("rpn_nms");
  d.rpn_pre_nms = j.at("rpn_pre_nms");
  d.rpn_post_nms_train = j.at("rpn_post_nms_train");
  d.rpn_post_nms_test = j.at("rpn_post_nms_test");
  d.rpn_batch = j.at("rpn_batch");
  d.rpn_pos_fraction = j.at("rpn_pos_fraction");
  d.rpn_pos_iou = j.at("rpn_pos_iou");
  d.rpn_neg_iou = j.at("rpn_neg_iou");
  d.roi_out = j.at("roi_out");
  d.rois_per_image = j.at("rois_per_image");
  d.roi_fg_fraction = j.at("roi_fg_fraction");
  d.roi_fg_iou = j.at("roi_fg_iou");
  d.nms_threshold = j.at("nms_threshold");
  d.score_threshold = j.at("score_threshold");
  d.max_detections = j.at("max_detections");
  return d;
}

inline json to_json(const mem::CellConfig& c) {
  return {{"channels", c.channels},
          {"levels", c.levels},
          {"gate", to_string(c.gate)},
          {"radius", c.radius},
          {"temperature", c.temperature},
          {"z_bias", c.z_bias ? json(*c.z_bias) : json(nullptr)},
          {"init_std", c.init_std},
          {"decoder_coarse_gain", c.decoder_coarse_gain},
          {"decoder_skip_gain", c.decoder_skip_gain}};
}

inline mem::CellConfig cell_config_from_json(const json& j) {
  mem::CellConfig c;
  c.channels = j.at("channels");
  c.levels = j.at("levels");
  c.gate = mem::parse_gate_kind(j.at("gate"));
  c.radius = j.at("radius");
  c.temperature = j.at("temperature");
  if (!j.at("z_bias").is_null()) c.z_bias = j.at("z_bias").get<double>();
  c.init_std = j.at("init_std");
  c.decoder_coarse_gain = j.at("decoder_coarse_gain");
  c.decoder_skip_gain = j.at("decoder_skip_gain");
  return c;
}

inline json to_json(const video::VideoConfig& v) {
  return {{"detector", to_json(v.detector)},
          {"cell", to_string(v.cell)},
          {"direction", to_string(v.direction)},
          {"cell_config", to_json(v.cell_cfg)}};
}

inline video::VideoConfig video_config_from_json(const json& j) {
  try {
    video::VideoConfig v;
    v.detector = detector_config_from_json(j.at("detector"));
    v.cell = mem::parse_cell_kind(j.at("cell"));
    v.direction = video::parse_direction(j.at("direction"));
    v.cell_cfg = cell_config_from_json(j.at("cell_config"));
    v.validate();
    return v;
  } catch (const json::exception& e) {
    throw DataError(std::string("bad model config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Run configuration.

struct RunConfig {
  std::uint64_t seed = 1;
  std::string preset = "assembly";
  synth::SceneSpec scene = synth::assembly_preset();
  int train_sequences = 100;
  int test_sequences = 20;
  int composites = 2000;

  video::VideoConfig model;
  std::int64_t pretrain_steps = 3000;
  video::TrainConfig pretrain;
  std::int64_t train_steps = 2000;
  video::TrainConfig train;
  int checkpoint_every = 200;  // steps, rounded up to a sequence boundary
  eval::EvalOptions eval;
  std::string eval_split = "test";

  RunConfig() {
    pretrain.lr = 0.01;
    pretrain.lr_low = 0.001;
    pretrain.eval_every = 200;
    train.lr = 0.01;
    train.lr_low = 0.001;
    train.eval_every = 100;
    model.cell_cfg.gate = mem::GateKind::relu_norm;
    model.detector.num_classes = scene.num_classes;
  }

  // model with the scene's class count and a single channel setting
  video::VideoConfig video_config() const {
    video::VideoConfig v = model;
    v.detector.num_classes = scene.num_classes;
    v.cell_cfg.channels = v.detector.channels;
    return v;
  }

  video::VideoConfig frame_config() const {
    video::VideoConfig v = video_config();
    v.cell = mem::CellKind::none;
    v.direction = video::Direction::forward;
    return v;
  }

  video::TrainConfig pretrain_config() const {
    video::TrainConfig t = pretrain;
    t.seed = seed;
    return t;
  }

  video::TrainConfig train_config() const {
    video::TrainConfig t = train;
    t.seed = seed;
    return t;
  }
};

namespace detail {

[[noreturn]] inline void bad_value(const std::string& key, const std::string& v, const char* what) {
  throw ContractError("bad value '" + v + "' for " + key + " (expected " + what + ")");
}

template <typename I>
I parse_integer(const std::string& key, const std::string& v) {
  I out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) bad_value(key, v, "an integer");
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) bad_value(key, v, "a number");
    return d;
  } catch (const std::logic_error&) {
    bad_value(key, v, "a number");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, v, "true or false");
}

inline std::vector<double> parse_reals(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_real(key, item));
  if (out.empty()) bad_value(key, v, "a comma-separated list of numbers");
  return out;
}

inline std::string fmt(double d) { return json(d).dump(); }

inline std::string fmt(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt(v[i]);
  return s;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

struct ConfigKey {
  std::string name;
  std::string doc;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

namespace detail {

template <typename Access>
ConfigKey int_key(std::string name, std::string doc, Access a) {
  return {name, std::move(doc),
          [=](RunConfig& c, const std::string& v) {
            auto& ref = a(c);
            ref = parse_integer<std::remove_reference_t<decltype(ref)>>(name, v);
          },
          [=](const RunConfig& c) { return std::to_string(a(const_cast<RunConfig&>(c))); }};
}

template <typename Access>
ConfigKey real_key(std::string name, std::string doc, Access a) {
  return {name, std::move(doc), [=](RunConfig& c, const std::string& v) { a(c) = parse_real(name, v); },
          [=](const RunConfig& c) { return fmt(a(const_cast<RunConfig&>(c))); }};
}

template <typename Access>
ConfigKey bool_key(std::string name, std::string doc, Access a) {
  return {name, std::move(doc), [=](RunConfig& c, const std::string& v) { a(c) = parse_bool(name, v); },
          [=](const RunConfig& c) { return std::string(a(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

}  // namespace detail

// Every accepted key, in the order the resolved config is printed.
inline const std::vector<ConfigKey>& config_keys() {
  using namespace detail;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    k.push_back(int_key("seed", "master seed for data, init and training", [](RunConfig& c) -> auto& { return c.seed; }));
    k.push_back({"preset", "staged or assembly; applied before every scene.* key",
                 [](RunConfig& c, const std::string& v) {
                   c.scene = synth::preset(v);
                   c.preset = v;
                 },
                 [](const RunConfig& c) { return c.preset; }});

    k.push_back(int_key("scene.width", "canvas width", [](RunConfig& c) -> auto& { return c.scene.width; }));
    k.push_back(int_key("scene.height", "canvas height", [](RunConfig& c) -> auto& { return c.scene.height; }));
    k.push_back(int_key("scene.length", "frames per sequence", [](RunConfig& c) -> auto& { return c.scene.length; }));
    k.push_back(int_key("scene.min_objects", "fewest sprites per sequence", [](RunConfig& c) -> auto& { return c.scene.min_objects; }));
    k.push_back(int_key("scene.max_objects", "most sprites per sequence", [](RunConfig& c) -> auto& { return c.scene.max_objects; }));
    k.push_back(int_key("scene.num_classes", "foreground classes (also the detector's)", [](RunConfig& c) -> auto& { return c.scene.num_classes; }));
    k.push_back(int_key("scene.min_size", "sprite size range, px", [](RunConfig& c) -> auto& { return c.scene.min_size; }));
    k.push_back(int_key("scene.max_size", "upper end of the sprite size range, px", [](RunConfig& c) -> auto& { return c.scene.max_size; }));
    k.push_back(real_key("scene.min_speed", "px per frame", [](RunConfig& c) -> auto& { return c.scene.min_speed; }));
    k.push_back(real_key("scene.max_speed", "upper end of the speed range", [](RunConfig& c) -> auto& { return c.scene.max_speed; }));
    k.push_back(int_key("scene.occluders", "occlusion events per sequence", [](RunConfig& c) -> auto& { return c.scene.occluders; }));
    k.push_back(int_key("scene.occluder_margin", "occluder overhang around the target, px", [](RunConfig& c) -> auto& { return c.scene.occluder_margin; }));
    k.push_back(int_key("scene.min_occlusion", "full-occlusion duration range, frames", [](RunConfig& c) -> auto& { return c.scene.min_occlusion; }));
    k.push_back(int_key("scene.max_occlusion", "upper end of the occlusion duration range", [](RunConfig& c) -> auto& { return c.scene.max_occlusion; }));
    k.push_back(int_key("scene.lead_in", "visible frames before the occluder arrives", [](RunConfig& c) -> auto& { return c.scene.lead_in; }));
    k.push_back(int_key("scene.approach", "frames the occluder takes to slide on/off", [](RunConfig& c) -> auto& { return c.scene.approach; }));
    k.push_back({"scene.occluder_mode", "untextured or distinct",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "untextured") c.scene.occluder_mode = synth::OccluderMode::untextured;
                   else if (v == "distinct") c.scene.occluder_mode = synth::OccluderMode::distinct;
                   else bad_value("scene.occluder_mode", v, "untextured or distinct");
                 },
                 [](const RunConfig& c) {
                   return std::string(c.scene.occluder_mode == synth::OccluderMode::untextured ? "untextured" : "distinct");
                 }});
    k.push_back({"scene.background", "plain or cluttered",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "plain") c.scene.background = synth::Background::plain;
                   else if (v == "cluttered") c.scene.background = synth::Background::cluttered;
                   else bad_value("scene.background", v, "plain or cluttered");
                 },
                 [](const RunConfig& c) {
                   return std::string(c.scene.background == synth::Background::plain ? "plain" : "cluttered");
                 }});
    k.push_back(real_key("scene.noise", "per-pixel noise std, grey levels", [](RunConfig& c) -> auto& { return c.scene.noise; }));
    k.push_back(real_key("scene.occluded_threshold", "visible fraction below which an object is flagged occluded", [](RunConfig& c) -> auto& { return c.scene.occluded_threshold; }));
    k.push_back(bool_key("scene.blend_edges", "anti-aliased sprite edges", [](RunConfig& c) -> auto& { return c.scene.blend_edges; }));

    k.push_back(int_key("data.train_sequences", "sequences in the train split", [](RunConfig& c) -> auto& { return c.train_sequences; }));
    k.push_back(int_key("data.test_sequences", "sequences in the test split", [](RunConfig& c) -> auto& { return c.test_sequences; }));
    k.push_back(int_key("data.composites", "static images for pretraining", [](RunConfig& c) -> auto& { return c.composites; }));

    k.push_back({"model.cell", "none, stmm, matchtrans or learned_align",
                 [](RunConfig& c, const std::string& v) { c.model.cell = mem::parse_cell_kind(v); },
                 [](const RunConfig& c) { return std::string(to_string(c.model.cell)); }});
    k.push_back({"model.direction", "forward or bidirectional",
                 [](RunConfig& c, const std::string& v) { c.model.direction = video::parse_direction(v); },
                 [](const RunConfig& c) { return std::string(to_string(c.model.direction)); }});
    k.push_back(int_key("model.channels", "backbone and memory channels", [](RunConfig& c) -> auto& { return c.model.detector.channels; }));
    k.push_back(int_key("model.levels", "pyramid levels of learned_align", [](RunConfig& c) -> auto& { return c.model.cell_cfg.levels; }));
    k.push_back({"model.gate", "sigmoid or relu_norm",
                 [](RunConfig& c, const std::string& v) { c.model.cell_cfg.gate = mem::parse_gate_kind(v); },
                 [](const RunConfig& c) { return std::string(to_string(c.model.cell_cfg.gate)); }});
    k.push_back(int_key("model.radius", "MatchTrans window radius, cells", [](RunConfig& c) -> auto& { return c.model.cell_cfg.radius; }));
    k.push_back(real_key("model.temperature", "MatchTrans softmax temperature", [](RunConfig& c) -> auto& { return c.model.cell_cfg.temperature; }));
    k.push_back({"model.z_bias", "update-gate bias at init, or auto",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "auto") c.model.cell_cfg.z_bias.reset();
                   else c.model.cell_cfg.z_bias = parse_real("model.z_bias", v);
                 },
                 [](const RunConfig& c) {
                   return c.model.cell_cfg.z_bias ? fmt(*c.model.cell_cfg.z_bias) : std::string("auto");
                 }});
    k.push_back({"model.anchor_scales", "comma-separated anchor sizes, px",
                 [](RunConfig& c, const std::string& v) { c.model.detector.anchor_scales = parse_reals("model.anchor_scales", v); },
                 [](const RunConfig& c) { return fmt(c.model.detector.anchor_scales); }});
    k.push_back(real_key("model.nms_threshold", "per-class NMS IoU threshold", [](RunConfig& c) -> auto& { return c.model.detector.nms_threshold; }));
    k.push_back(real_key("model.score_threshold", "minimum score kept at inference", [](RunConfig& c) -> auto& { return c.model.detector.score_threshold; }));
    k.push_back(int_key("model.max_detections", "boxes kept per frame after NMS", [](RunConfig& c) -> auto& { return c.model.detector.max_detections; }));

    k.push_back(int_key("pretrain.steps", "frame-level updates on static composites", [](RunConfig& c) -> auto& { return c.pretrain_steps; }));
    k.push_back(real_key("pretrain.lr", "initial pretraining learning rate", [](RunConfig& c) -> auto& { return c.pretrain.lr; }));
    k.push_back(real_key("pretrain.lr_low", "pretraining rate after the plateau drop", [](RunConfig& c) -> auto& { return c.pretrain.lr_low; }));
    k.push_back(int_key("pretrain.eval_every", "pretraining updates per plateau check", [](RunConfig& c) -> auto& { return c.pretrain.eval_every; }));

    k.push_back(int_key("train.steps", "video fine-tuning updates (one per bptt window)", [](RunConfig& c) -> auto& { return c.train_steps; }));
    k.push_back(real_key("train.lr", "initial fine-tuning learning rate", [](RunConfig& c) -> auto& { return c.train.lr; }));
    k.push_back(real_key("train.lr_low", "rate after the loss plateaus", [](RunConfig& c) -> auto& { return c.train.lr_low; }));
    k.push_back(int_key("train.bptt", "unrolled frames per update", [](RunConfig& c) -> auto& { return c.train.bptt; }));
    k.push_back(int_key("train.eval_every", "updates per plateau check", [](RunConfig& c) -> auto& { return c.train.eval_every; }));
    k.push_back(int_key("train.patience", "stale checks before the rate drops", [](RunConfig& c) -> auto& { return c.train.patience; }));
    k.push_back(real_key("train.min_improvement", "relative loss improvement that resets patience", [](RunConfig& c) -> auto& { return c.train.min_improvement; }));
    k.push_back(bool_key("train.flip", "random horizontal flips", [](RunConfig& c) -> auto& { return c.train.flip; }));
    k.push_back(bool_key("train.loss_on_occluded", "supervise boxes of occluded objects", [](RunConfig& c) -> auto& { return c.train.loss_on_occluded; }));
    k.push_back(real_key("train.momentum", "SGD momentum", [](RunConfig& c) -> auto& { return c.train.sgd.momentum; }));
    k.push_back(real_key("train.weight_decay", "L2 weight decay", [](RunConfig& c) -> auto& { return c.train.sgd.weight_decay; }));
    k.push_back(real_key("train.clip_norm", "gradient norm clip, 0 disables", [](RunConfig& c) -> auto& { return c.train.sgd.clip_norm; }));
    k.push_back(int_key("train.checkpoint_every", "updates between checkpoints", [](RunConfig& c) -> auto& { return c.checkpoint_every; }));

    k.push_back(real_key("eval.iou_threshold", "IoU for a true positive", [](RunConfig& c) -> auto& { return c.eval.iou_threshold; }));
    k.push_back(real_key("eval.score_threshold", "score cut for recall", [](RunConfig& c) -> auto& { return c.eval.score_threshold; }));
    k.push_back({"eval.split", "train or test",
                 [](RunConfig& c, const std::string& v) {
                   if (v != "train" && v != "test") bad_value("eval.split", v, "train or test");
                   c.eval_split = v;
                 },
                 [](const RunConfig& c) { return c.eval_split; }});
    return k;
  }();
  return keys;
}

inline const ConfigKey* find_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (k.name == name) return &k;
  return nullptr;
}

struct Assignment {
  std::string key, value, where;
};

inline Assignment parse_assignment(const std::string& text, const std::string& where) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw ContractError(where + ": expected key = value");
  Assignment a{detail::trim(text.substr(0, eq)), detail::trim(text.substr(eq + 1)), where};
  if (a.key.empty()) throw ContractError(where + ": empty key");
  if (!find_key(a.key)) throw ContractError(where + ": unknown key '" + a.key + "'");
  return a;
}

inline std::vector<Assignment> parse_config_text(const std::string& text, const std::string& name) {
  std::vector<Assignment> out;
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (const auto h = line.find('#'); h != std::string::npos) line.resize(h);
    if (detail::trim(line).empty()) continue;
    Assignment a = parse_assignment(line, name + ":" + std::to_string(n));
    for (const auto& prev : out)
      if (prev.key == a.key) throw ContractError(a.where + ": duplicate key '" + a.key + "'");
    out.push_back(std::move(a));
  }
  return out;
}

inline std::vector<Assignment> parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read config '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str(), path);
}

// Presets first (the last one wins), then everything else in order.
inline RunConfig resolve_config(const std::vector<Assignment>& assignments, RunConfig base = {}) {
  for (const auto& a : assignments)
    if (a.key == "preset") find_key(a.key)->set(base, a.value);
  for (const auto& a : assignments) {
    if (a.key == "preset") continue;
    try {
      find_key(a.key)->set(base, a.value);
    } catch (const ContractError& e) {
      throw ContractError(a.where + ": " + e.what());
    }
  }
  base.scene.validate();
  base.video_config().validate();
  base.train_config().validate();
  base.pretrain_config().validate();
  OCCMEM_CHECK(base.train_sequences >= 1 && base.test_sequences >= 0 && base.composites >= 1,
               "data.* counts must be positive");
  OCCMEM_CHECK(base.checkpoint_every >= 1, "train.checkpoint_every must be >= 1");
  return base;
}

inline std::string resolved_text(const RunConfig& c) {
  std::string out;
  for (const auto& k : config_keys()) out += k.name + " = " + k.get(c) + "\n";
  return out;
}

inline json resolved_json(const RunConfig& c) {
  json j = json::object();
  for (const auto& k : config_keys()) j[k.name] = k.get(c);
  return j;
}

inline RunConfig config_from_resolved_json(const json& j) {
  std::vector<Assignment> a;
  for (const auto& [k, v] : j.items()) {
    if (!find_key(k)) throw DataError("stored config has unknown key '" + k + "'");
    a.push_back({k, v.get<std::string>(), "stored config"});
  }
  return resolve_config(a);
}

}  // namespace occmem::io
