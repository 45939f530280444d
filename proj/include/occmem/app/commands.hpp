#pragma once

// The four batch commands behind the occmem binary. Each writes everything
// under its output location, including a run_manifest.json with checksums.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "occmem/data/dataset.hpp"
#include "occmem/eval/evaluate.hpp"
#include "occmem/eval/figures.hpp"
#include "occmem/io/archive.hpp"
#include "occmem/io/config.hpp"
#include "occmem/video/train.hpp"

namespace occmem::app {

namespace fs = std::filesystem;
using json = nlohmann::json;
using io::RunConfig;

inline constexpr const char* kVersion = "0.1.0";

inline void note(const std::string& s) { std::cerr << s << std::endl; }

inline void log_config(const std::string& command, const RunConfig& cfg) {
  note("occmem " + std::string(kVersion) + " " + command + ", resolved config:");
  std::istringstream in(io::resolved_text(cfg));
  for (std::string line; std::getline(in, line);) note("  " + line);
}

inline std::string checksum_of(const fs::path& p) { return io::hex64(io::file_checksum(p)); }

// Checksums `outputs` (paths relative to `dir`) into dir/<name>.
inline void write_manifest(const fs::path& dir, const std::string& name, const std::string& command,
                           const RunConfig& cfg, const json& inputs,
                           const std::vector<std::string>& outputs) {
  json out = json::object();
  for (const auto& o : outputs) out[o] = checksum_of(dir / o);
  const json resolved = io::resolved_json(cfg);
  json m{{"command", command},
         {"version", kVersion},
         {"config", resolved},
         {"config_hash", io::config_hash(resolved)},
         {"inputs", inputs},
         {"outputs", out}};
  synth::write_text(dir / name, m.dump(2) + "\n");
}

inline std::uint64_t sequence_seed(std::uint64_t seed, bool test, int index) {
  nn::Rng rng = nn::make_rng(seed, (std::uint64_t{test ? 4u : 3u} << 40) + static_cast<std::uint64_t>(index));
  return rng();
}

inline std::string dataset_checksum(const fs::path& root) { return checksum_of(root / "manifest.json"); }

// ---------------------------------------------------------------------------
// gen

struct GenOptions {
  fs::path out;
  bool force = false;
};

inline int cmd_gen(const RunConfig& cfg, const GenOptions& o) {
  if (fs::exists(o.out) && !(fs::is_directory(o.out) && fs::is_empty(o.out))) {
    if (!o.force)
      throw ContractError("output '" + o.out.string() + "' exists and is not empty (use --force)");
    fs::remove_all(o.out);
  }
  log_config("gen", cfg);
  synth::Dataset ds;
  ds.meta = {{"scene", synth::to_json(cfg.scene)},
             {"preset", cfg.preset},
             {"seed", cfg.seed},
             {"train_sequences", cfg.train_sequences},
             {"test_sequences", cfg.test_sequences}};
  for (int split = 0; split < 2; ++split) {
    const int n = split ? cfg.test_sequences : cfg.train_sequences;
    for (int i = 0; i < n; ++i) {
      ds.sequences.push_back(synth::generate_sequence(cfg.scene, sequence_seed(cfg.seed, split, i)));
      ds.splits.push_back(split ? "test" : "train");
    }
  }
  synth::write_dataset(o.out, ds);
  synth::write_text(o.out / "config.resolved", io::resolved_text(cfg));
  write_manifest(o.out, "run_manifest.json", "gen", cfg, json::object(),
                 {"manifest.json", "config.resolved"});
  long frames = 0, objects = 0, occluded = 0;
  for (const auto& s : ds.sequences)
    for (const auto& fa : s.annotations) {
      ++frames;
      for (const auto& ob : fa.objects) {
        ++objects;
        occluded += ob.occluded;
      }
    }
  std::printf("generated %d train + %d test sequences (%ld frames, %ld boxes, %ld occluded) seed %llu -> %s\n",
              cfg.train_sequences, cfg.test_sequences, frames, objects, occluded,
              static_cast<unsigned long long>(cfg.seed), o.out.string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  fs::path data;
  fs::path out;
  bool resume = false;
  bool force = false;
  bool from_scratch = false;
  std::optional<fs::path> init;  // frame-detector archive; skips pretraining
  std::int64_t stop_after = -1;  // total updates in this run dir, then checkpoint and stop
};

inline const char* kCheckpoint = "checkpoint.occw";
inline const char* kPretrained = "pretrain.occw";
inline const char* kWeights = "weights.occw";

inline std::vector<const synth::SequenceSample*> pointers(const synth::Dataset& ds) {
  std::vector<const synth::SequenceSample*> out;
  for (const auto& s : ds.sequences) out.push_back(&s);
  return out;
}

inline synth::SceneSpec dataset_scene(const synth::Dataset& ds, const fs::path& root) {
  if (!ds.meta.contains("scene")) throw DataError("dataset '" + root.string() + "' has no scene metadata");
  try {
    return synth::scene_spec_from_json(ds.meta.at("scene"));
  } catch (const json::exception& e) {
    throw DataError("dataset '" + root.string() + "': bad scene metadata: " + e.what());
  }
}

template <typename Fit>
bool run_stage(video::Trainer<float>& tr, const std::string& stage, std::int64_t total,
               std::int64_t offset, const RunConfig& cfg, const TrainOptions& o,
               const json& extra_base, Fit fit) {
  auto checkpoint = [&] {
    io::Archive a;
    a.config = io::to_json(tr.model());
    a.params = tr.params();
    a.velocity = tr.optimizer().velocity();
    a.extra = extra_base;
    a.extra["stage"] = stage;
    a.extra["state"] = tr.state().to_json();
    a.extra["log"] = tr.log();
    io::write_archive(o.out / kCheckpoint, a);
  };
  while (tr.state().step < total) {
    if (o.stop_after >= 0 && offset + tr.state().step >= o.stop_after) {
      checkpoint();
      note("stopped after " + std::to_string(offset + tr.state().step) + " updates; resume with --resume");
      return false;
    }
    std::int64_t target = std::min(total, tr.state().step + cfg.checkpoint_every);
    if (o.stop_after >= 0) target = std::min(target, std::max<std::int64_t>(o.stop_after - offset, 1));
    fit(target);
    checkpoint();
    char buf[160];
    std::snprintf(buf, sizeof buf, "[%s] step %lld/%lld loss %.4f lr %g", stage.c_str(),
                  static_cast<long long>(tr.state().step), static_cast<long long>(total),
                  tr.state().last_loss, tr.state().schedule.lr());
    note(buf);
  }
  return true;
}

inline int cmd_train(RunConfig cfg, const TrainOptions& o) {
  synth::Dataset ds = synth::read_dataset(o.data, "train");
  if (ds.sequences.empty()) throw DataError("dataset '" + o.data.string() + "' has no train split");
  const synth::SceneSpec scene = dataset_scene(ds, o.data);
  if (synth::to_json(scene) != synth::to_json(cfg.scene)) note("note: scene taken from the dataset, not the config");
  cfg.scene = scene;
  if (o.init && o.from_scratch) throw ContractError("--init and --from-scratch are exclusive");

  const fs::path ckpt_path = o.out / kCheckpoint;
  const bool have_ckpt = fs::exists(ckpt_path);
  if (!o.resume && fs::exists(o.out) && !fs::is_empty(o.out)) {
    if (!o.force)
      throw ContractError("run directory '" + o.out.string() + "' is not empty (use --resume or --force)");
    fs::remove_all(o.out);
  }
  fs::create_directories(o.out);
  log_config("train", cfg);
  const json resolved = io::resolved_json(cfg);
  synth::write_text(o.out / "config.resolved", io::resolved_text(cfg));

  json inputs{{"dataset", dataset_checksum(o.data)}};
  std::optional<io::Archive> ckpt;
  if (o.resume && have_ckpt) {
    ckpt = io::read_archive(ckpt_path);
    if (ckpt->extra.value("run_config", json()) != resolved)
      throw ContractError("checkpoint in '" + o.out.string() + "' was written with a different config");
    note("resuming " + ckpt->extra.at("stage").get<std::string>() + " at step " +
         std::to_string(ckpt->extra.at("state").at("step").get<std::int64_t>()));
  } else if (o.resume && fs::exists(o.out / kWeights)) {
    note("run already finished");
    return 0;
  }

  const video::VideoConfig vcfg = cfg.video_config();
  const video::VideoConfig fcfg = cfg.frame_config();
  json extra{{"run_config", resolved}, {"pretrain_log", json::array()}};

  std::string stage = (o.from_scratch || o.init || cfg.pretrain_steps == 0) ? "finetune" : "pretrain";
  if (ckpt) stage = ckpt->extra.at("stage");
  if (ckpt && ckpt->extra.contains("pretrain_log")) extra["pretrain_log"] = ckpt->extra["pretrain_log"];

  std::optional<nn::ParamStore<float>> frame_params;
  if (o.init) {
    io::Archive a = io::read_archive(*o.init);
    frame_params = std::move(a.params);
    inputs["init"] = checksum_of(*o.init);
  }

  std::int64_t offset = 0;
  if (stage == "pretrain") {
    nn::Rng rng = nn::make_rng(cfg.seed, 11);
    video::Trainer<float> pt(fcfg, cfg.pretrain_config(),
                             ckpt ? ckpt->params : det::init_detector_params<float>(fcfg.detector, rng));
    if (ckpt) {
      pt.optimizer().velocity() = ckpt->velocity;
      pt.state().restore(ckpt->extra.at("state"));
      pt.log() = ckpt->extra.at("log").get<std::vector<json>>();
    }
    const auto comps = synth::generate_static_composites(cfg.scene, cfg.seed, cfg.composites);
    if (!run_stage(pt, "pretrain", cfg.pretrain_steps, 0, cfg, o, extra,
                   [&](std::int64_t t) { pt.fit_frames(comps, t); }))
      return 0;
    extra["pretrain_log"] = pt.log();
    io::Archive a;
    a.config = io::to_json(fcfg);
    a.params = pt.params();
    a.extra = {{"run_config", resolved}, {"stage", "pretrain"}, {"log", pt.log()}};
    io::write_archive(o.out / kPretrained, a);
    frame_params = pt.params();
    offset = pt.state().step;
    ckpt.reset();
  } else if (!o.from_scratch && !o.init && cfg.pretrain_steps > 0) {
    offset = cfg.pretrain_steps;
  }

  nn::ParamStore<float> start;
  if (ckpt) {
    start = ckpt->params;
  } else if (o.from_scratch || (!frame_params && cfg.pretrain_steps == 0)) {
    nn::Rng rng = nn::make_rng(cfg.seed, 13);
    start = video::init_video_params<float>(vcfg, rng);
  } else {
    if (!frame_params) frame_params = io::read_archive(o.out / kPretrained).params;
    nn::Rng rng = nn::make_rng(cfg.seed, 7);
    start = video::init_from_frame_detector(*frame_params, vcfg, rng);
  }
  video::Trainer<float> ft(vcfg, cfg.train_config(), std::move(start));
  if (ckpt) {
    ft.optimizer().velocity() = ckpt->velocity;
    ft.state().restore(ckpt->extra.at("state"));
    ft.log() = ckpt->extra.at("log").get<std::vector<json>>();
  }
  const auto seqs = pointers(ds);
  if (!run_stage(ft, "finetune", cfg.train_steps, offset, cfg, o, extra,
                 [&](std::int64_t t) { ft.fit_video(seqs, t); }))
    return 0;

  io::Archive a;
  a.config = io::to_json(vcfg);
  a.params = ft.params();
  a.extra = {{"run_config", resolved},
             {"stage", "final"},
             {"state", ft.state().to_json()},
             {"pretrain_log", extra["pretrain_log"]},
             {"log", ft.log()}};
  io::write_archive(o.out / kWeights, a);
  std::string log_text;
  for (const auto& e : extra["pretrain_log"]) {
    json l = e;
    l["stage"] = "pretrain";
    log_text += l.dump() + "\n";
  }
  for (const auto& e : ft.log()) {
    json l = e;
    l["stage"] = "finetune";
    log_text += l.dump() + "\n";
  }
  synth::write_text(o.out / "train_log.jsonl", log_text);
  fs::remove(ckpt_path);
  std::vector<std::string> outs = {kWeights, "train_log.jsonl", "config.resolved"};
  if (fs::exists(o.out / kPretrained)) outs.push_back(kPretrained);
  write_manifest(o.out, "run_manifest.json", "train", cfg, inputs, outs);
  std::printf("trained %s (%s): %lld updates, final loss %.4f -> %s\n", to_string(vcfg.cell),
              to_string(vcfg.direction), static_cast<long long>(ft.state().step),
              ft.state().last_loss, (o.out / kWeights).string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalCmdOptions {
  fs::path weights;
  fs::path data;
  fs::path report;
};

inline video::VideoConfig archive_model(const io::Archive& a) { return io::video_config_from_json(a.config); }

inline int cmd_eval(const RunConfig& cfg, const EvalCmdOptions& o) {
  log_config("eval", cfg);
  const io::Archive a = io::read_archive(o.weights);
  const video::VideoConfig vcfg = archive_model(a);
  synth::Dataset ds = synth::read_dataset(o.data, cfg.eval_split);
  if (ds.sequences.empty())
    throw DataError("dataset '" + o.data.string() + "' has no " + cfg.eval_split + " split");
  eval::EvalReport r = eval::evaluate(pointers(ds), a.params, vcfg, cfg.eval);
  json j = r.to_json();
  j["model"] = {{"cell", to_string(vcfg.cell)}, {"direction", to_string(vcfg.direction)}};
  j["split"] = cfg.eval_split;
  j["sequences"] = ds.sequences.size();
  j["persistence_at_20"] = r.mean_persistence_at(20) ? json(*r.mean_persistence_at(20)) : json(nullptr);
  const fs::path dir = o.report.has_parent_path() ? o.report.parent_path() : fs::path(".");
  fs::create_directories(dir);
  synth::write_text(o.report, j.dump(2) + "\n");
  write_manifest(dir, o.report.stem().string() + ".manifest.json", "eval", cfg,
                 {{"weights", checksum_of(o.weights)}, {"dataset", dataset_checksum(o.data)}},
                 {o.report.filename().string()});
  auto show = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string("n/a"); };
  std::printf("%s %s: mAP %.4f occluded recall %s visible recall %s persistence@20 %s\n",
              to_string(vcfg.cell), to_string(vcfg.direction), r.map, show(r.occluded_recall).c_str(),
              show(r.visible_recall).c_str(), show(r.mean_persistence_at(20)).c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// viz

struct VizOptions {
  std::vector<fs::path> weights;
  fs::path data;
  fs::path out;
  int sequence = 0;
  int first = 0;
  int count = -1;  // all remaining frames
};

struct VizModel {
  std::string label;
  std::vector<Image> overlays, heatmaps;
  std::vector<std::vector<double>> persistence;
};

inline int cmd_viz(const RunConfig& cfg, const VizOptions& o) {
  OCCMEM_CHECK(!o.weights.empty(), "viz needs --weights or --compare");
  log_config("viz", cfg);
  synth::Dataset ds = synth::read_dataset(o.data, cfg.eval_split);
  if (o.sequence < 0 || o.sequence >= static_cast<int>(ds.sequences.size()))
    throw ContractError("--sequence " + std::to_string(o.sequence) + " out of range (split has " +
                        std::to_string(ds.sequences.size()) + ")");
  const auto& seq = ds.sequences[o.sequence];
  const int n = static_cast<int>(seq.frames.size());
  OCCMEM_CHECK(o.first >= 0 && o.first < n, "--first outside the sequence");
  const int last = o.count < 0 ? n : std::min(n, o.first + o.count);
  fs::create_directories(o.out);
  const int W = seq.frames[0].width, H = seq.frames[0].height;

  std::vector<VizModel> models;
  json inputs{{"dataset", dataset_checksum(o.data)}, {"weights", json::array()}};
  for (const auto& w : o.weights) {
    const io::Archive a = io::read_archive(w);
    const video::VideoConfig vcfg = archive_model(a);
    inputs["weights"].push_back(checksum_of(w));
    auto out = video::video_forward(seq.frames, a.params, vcfg);
    VizModel m;
    m.label = to_string(vcfg.cell);
    if (vcfg.direction == video::Direction::bidirectional) m.label += "_bidirectional";
    for (const auto& other : models)
      if (other.label == m.label) m.label += "_" + std::to_string(models.size());
    std::vector<nn::Tensor<float>> trace;
    for (int t = 0; t < n; ++t) trace.push_back(out.memory[t].M);
    for (auto [obj, onset] : eval::occlusion_onsets(seq.annotations)) {
      std::vector<det::Box> boxes;
      for (const auto& fa : seq.annotations) boxes.push_back(fa.objects[obj].box);
      m.persistence.push_back(eval::memory_persistence(trace, boxes, onset, vcfg.detector.stride));
    }
    for (int t = o.first; t < last; ++t) {
      Image ov = eval::to_rgb(seq.frames[t]);
      for (const auto& ob : seq.annotations[t].objects) eval::draw_box(ov, ob.box, {255, 255, 255}, 1, true);
      for (const auto& d : out.detections[t])
        if (d.score >= cfg.eval.score_threshold) eval::draw_box(ov, d, eval::class_color(d.label), 2);
      m.overlays.push_back(std::move(ov));
      m.heatmaps.push_back(eval::memory_heatmap(trace[t], W, H));
    }
    models.push_back(std::move(m));
  }

  std::vector<std::string> outputs;
  auto save = [&](const fs::path& rel, const Image& img) {
    fs::create_directories((o.out / rel).parent_path());
    write_png((o.out / rel).string(), img);
    outputs.push_back(rel.generic_string());
  };
  const bool compare = models.size() > 1;
  for (const auto& m : models) {
    const fs::path sub = compare ? fs::path(m.label) : fs::path();
    for (int k = 0; k < last - o.first; ++k) {
      char name[64];
      std::snprintf(name, sizeof name, "overlay_%03d.png", o.first + k);
      save(sub / name, m.overlays[k]);
      std::snprintf(name, sizeof name, "heatmap_%03d.png", o.first + k);
      save(sub / name, m.heatmaps[k]);
    }
    if (!compare) save("strip.png", eval::tile({m.overlays, m.heatmaps}));
  }
  if (compare) {
    // input row, then detections + memory norm per model
    std::vector<std::vector<Image>> rows;
    std::vector<Image> inputs_row;
    for (int t = o.first; t < last; ++t) inputs_row.push_back(eval::to_rgb(seq.frames[t]));
    rows.push_back(inputs_row);
    for (const auto& m : models) {
      rows.push_back(m.overlays);
      rows.push_back(m.heatmaps);
    }
    save("compare.png", eval::tile(rows));
  }

  // persistence curves, one column per model and occlusion event
  std::string csv = "frame";
  std::size_t events = models[0].persistence.size();
  for (const auto& m : models)
    for (std::size_t e = 0; e < events; ++e) csv += "," + m.label + "_event" + std::to_string(e);
  csv += "\n";
  for (int t = 0; t < n; ++t) {
    csv += std::to_string(t);
    for (const auto& m : models)
      for (std::size_t e = 0; e < events; ++e) csv += "," + io::detail::fmt(m.persistence[e][t]);
    csv += "\n";
  }
  synth::write_text(o.out / "persistence.csv", csv);
  outputs.push_back("persistence.csv");
  write_manifest(o.out, "run_manifest.json", "viz", cfg, inputs, outputs);
  std::printf("wrote %zu files for sequence %d (%d frames, %zu model%s) -> %s\n", outputs.size(),
              o.sequence, last - o.first, models.size(), models.size() > 1 ? "s" : "",
              o.out.string().c_str());
  return 0;
}

}  // namespace occmem::app
