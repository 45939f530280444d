#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "occmem/core/error.hpp"
#include "occmem/core/image.hpp"
#include "occmem/data/synth.hpp"

namespace occmem::synth {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline json to_json(const SceneSpec& s) {
  return json{{"width", s.width},
              {"height", s.height},
              {"length", s.length},
              {"min_objects", s.min_objects},
              {"max_objects", s.max_objects},
              {"num_classes", s.num_classes},
              {"min_size", s.min_size},
              {"max_size", s.max_size},
              {"min_speed", s.min_speed},
              {"max_speed", s.max_speed},
              {"occluders", s.occluders},
              {"occluder_margin", s.occluder_margin},
              {"min_occlusion", s.min_occlusion},
              {"max_occlusion", s.max_occlusion},
              {"lead_in", s.lead_in},
              {"approach", s.approach},
              {"occluder_mode", s.occluder_mode == OccluderMode::untextured ? "untextured" : "distinct"},
              {"background", s.background == Background::plain ? "plain" : "cluttered"},
              {"noise", s.noise},
              {"occluded_threshold", s.occluded_threshold},
              {"blend_edges", s.blend_edges}};
}

inline SceneSpec scene_spec_from_json(const json& j) {
  SceneSpec s;
  s.width = j.at("width");
  s.height = j.at("height");
  s.length = j.at("length");
  s.min_objects = j.at("min_objects");
  s.max_objects = j.at("max_objects");
  s.num_classes = j.at("num_classes");
  s.min_size = j.at("min_size");
  s.max_size = j.at("max_size");
  s.min_speed = j.at("min_speed");
  s.max_speed = j.at("max_speed");
  s.occluders = j.at("occluders");
  s.occluder_margin = j.at("occluder_margin");
  s.min_occlusion = j.at("min_occlusion");
  s.max_occlusion = j.at("max_occlusion");
  s.lead_in = j.at("lead_in");
  s.approach = j.at("approach");
  s.occluder_mode = j.at("occluder_mode") == "untextured" ? OccluderMode::untextured
                                                          : OccluderMode::distinct;
  s.background = j.at("background") == "plain" ? Background::plain : Background::cluttered;
  s.noise = j.at("noise");
  s.occluded_threshold = j.at("occluded_threshold");
  s.blend_edges = j.at("blend_edges");
  return s;
}

inline json to_json(const FrameAnnotation& fa) {
  json objs = json::array();
  for (const auto& o : fa.objects)
    objs.push_back({{"box", {o.box.x1, o.box.y1, o.box.x2, o.box.y2}},
                    {"class", o.cls},
                    {"occluded", o.occluded},
                    {"visible_fraction", o.visible_fraction}});
  return json{{"frame", fa.frame}, {"objects", objs}};
}

// Throws DataError naming `where` on any schema problem.
inline FrameAnnotation frame_annotation_from_json(const json& j, const std::string& where) {
  auto fail = [&](const std::string& what) { throw DataError(where + ": " + what); };
  if (!j.is_object()) fail("record is not an object");
  if (!j.contains("frame") || !j["frame"].is_number_integer()) fail("missing integer 'frame'");
  if (!j.contains("objects") || !j["objects"].is_array()) fail("missing array 'objects'");
  FrameAnnotation fa;
  fa.frame = j["frame"];
  for (const auto& o : j["objects"]) {
    if (!o.is_object()) fail("object entry is not an object");
    if (!o.contains("box") || !o["box"].is_array() || o["box"].size() != 4)
      fail("'box' must be [x1, y1, x2, y2]");
    for (const auto& v : o["box"])
      if (!v.is_number()) fail("'box' entries must be numbers");
    if (!o.contains("class") || !o["class"].is_number_integer()) fail("missing integer 'class'");
    if (!o.contains("occluded") || !o["occluded"].is_boolean()) fail("missing bool 'occluded'");
    if (!o.contains("visible_fraction") || !o["visible_fraction"].is_number())
      fail("missing number 'visible_fraction'");
    ObjectAnnotation a;
    a.cls = o["class"];
    if (a.cls < 0) fail("negative class");
    a.box = det::Box{o["box"][0], o["box"][1], o["box"][2], o["box"][3], 1.0, a.cls + 1};
    if (!a.box.valid()) fail("degenerate box");
    a.occluded = o["occluded"];
    a.visible_fraction = o["visible_fraction"];
    if (a.visible_fraction < 0 || a.visible_fraction > 1) fail("visible_fraction outside [0, 1]");
    fa.objects.push_back(a);
  }
  return fa;
}

struct Dataset {
  json meta = json::object();
  std::vector<std::string> splits;  // one per sequence
  std::vector<SequenceSample> sequences;

  std::vector<int> indices(const std::string& split) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < splits.size(); ++i)
      if (splits[i] == split) out.push_back(static_cast<int>(i));
    return out;
  }
};

inline std::string sequence_dir_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "seq_%06d", i);
  return buf;
}

inline std::string frame_file_name(int t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%06d.png", t);
  return buf;
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw DataError("cannot write '" + p.string() + "'");
  f << text;
  if (!f) throw DataError("failed writing '" + p.string() + "'");
}

inline std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw DataError("cannot open '" + p.string() + "'");
  return std::string(std::istreambuf_iterator<char>(f), {});
}

inline void write_annotations(const fs::path& p, const std::vector<FrameAnnotation>& anns) {
  std::string text;
  for (const auto& a : anns) text += to_json(a).dump() + "\n";
  write_text(p, text);
}

inline std::vector<FrameAnnotation> read_annotations(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw DataError("cannot open '" + p.string() + "'");
  std::vector<FrameAnnotation> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = p.string() + ":" + std::to_string(lineno);
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw DataError(where + ": malformed JSON");
    out.push_back(frame_annotation_from_json(j, where));
  }
  return out;
}

inline void write_dataset(const fs::path& root, const Dataset& ds) {
  OCCMEM_CHECK(ds.splits.size() == ds.sequences.size(), "one split label per sequence");
  fs::create_directories(root);
  json seqs = json::array();
  for (std::size_t i = 0; i < ds.sequences.size(); ++i) {
    const auto& s = ds.sequences[i];
    OCCMEM_CHECK(s.frames.size() == s.annotations.size(), "frames/annotations mismatch");
    const std::string name = sequence_dir_name(static_cast<int>(i));
    fs::create_directories(root / name);
    for (std::size_t t = 0; t < s.frames.size(); ++t)
      write_png((root / name / frame_file_name(static_cast<int>(t))).string(), s.frames[t]);
    write_annotations(root / name / "annotations.jsonl", s.annotations);
    seqs.push_back({{"name", name}, {"split", ds.splits[i]}, {"frames", s.frames.size()}});
  }
  json manifest{{"format", "occmem-dataset"}, {"version", 1}, {"meta", ds.meta},
                {"sequences", seqs}};
  write_text(root / "manifest.json", manifest.dump(2) + "\n");
}

inline Dataset read_dataset(const fs::path& root, const std::string& only_split = "") {
  const fs::path mpath = root / "manifest.json";
  if (!fs::exists(mpath)) throw DataError("no dataset at '" + root.string() + "' (missing manifest.json)");
  json m = json::parse(read_text(mpath), nullptr, false);
  if (m.is_discarded() || !m.is_object() || m.value("format", "") != "occmem-dataset")
    throw DataError("'" + mpath.string() + "' is not a dataset manifest");
  Dataset ds;
  ds.meta = m.value("meta", json::object());
  for (const auto& e : m.at("sequences")) {
    const std::string split = e.at("split");
    if (!only_split.empty() && split != only_split) continue;
    const fs::path dir = root / e.at("name").get<std::string>();
    SequenceSample s;
    s.annotations = read_annotations(dir / "annotations.jsonl");
    const int nframes = e.at("frames");
    if (static_cast<int>(s.annotations.size()) != nframes)
      throw DataError("'" + (dir / "annotations.jsonl").string() + "' has " +
                      std::to_string(s.annotations.size()) + " records, manifest says " +
                      std::to_string(nframes));
    for (int t = 0; t < nframes; ++t) s.frames.push_back(read_png((dir / frame_file_name(t)).string()));
    ds.splits.push_back(split);
    ds.sequences.push_back(std::move(s));
  }
  return ds;
}

}  // namespace occmem::synth
