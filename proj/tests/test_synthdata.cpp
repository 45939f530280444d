#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "occmem/data/dataset.hpp"
#include "occmem/data/synth.hpp"

using namespace occmem;
using namespace occmem::synth;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("occmem_test_" + name);
  fs::remove_all(p);
  return p;
}

bool inside(const det::Box& b, int x, int y) {
  return x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2;
}

}  // namespace

TEST(Synth, NoOccludersMeansFullyVisible) {
  SceneSpec spec = staged_preset();
  spec.occluders = 0;
  spec.max_objects = 1;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SequenceSample s = generate_sequence(spec, seed);
    ASSERT_EQ(s.frames.size(), 36u);
    for (const auto& fa : s.annotations)
      for (const auto& o : fa.objects) {
        EXPECT_EQ(o.visible_fraction, 1.0);
        EXPECT_FALSE(o.occluded);
      }
  }
}

TEST(Synth, StaticObjectOccludedForExactWindow) {
  SceneSpec spec = staged_preset();
  spec.min_objects = spec.max_objects = 1;
  spec.min_speed = spec.max_speed = 0;
  spec.min_occlusion = spec.max_occlusion = 20;
  spec.approach = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SequenceSample s = generate_sequence(spec, seed);
    int first = -1, count = 0;
    for (const auto& fa : s.annotations) {
      EXPECT_EQ(fa.objects[0].box, s.annotations[0].objects[0].box);
      if (fa.objects[0].occluded) {
        if (first < 0) first = fa.frame;
        EXPECT_EQ(fa.frame, first + count);
        EXPECT_EQ(fa.objects[0].visible_fraction, 0.0);
        ++count;
      }
    }
    EXPECT_EQ(count, 20);
    EXPECT_GE(first, spec.lead_in);
  }
}

TEST(Synth, VisibleFractionMatchesGeometry) {
  SceneSpec spec = assembly_preset();
  spec.max_objects = 3;
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    SceneTrace tr;
    SequenceSample s = generate_sequence(spec, seed, &tr);
    const int n = static_cast<int>(tr.sprites.size());
    for (std::size_t t = 0; t < s.frames.size(); ++t) {
      for (int i = 0; i < n; ++i) {
        const Sprite& sp = tr.sprites[i];
        int total = 0, vis = 0;
        for (int y = 0; y < sp.size; ++y)
          for (int x = 0; x < sp.size; ++x) {
            if (!sp.solid(x, y)) continue;
            ++total;
            const int gx = tr.positions[t][i][0] + x, gy = tr.positions[t][i][1] + y;
            bool covered = false;
            for (const auto& ob : tr.occluders[t]) covered |= inside(ob, gx, gy);
            for (int j = i + 1; j < n && !covered; ++j) {
              const int lx = gx - tr.positions[t][j][0], ly = gy - tr.positions[t][j][1];
              const Sprite& sj = tr.sprites[j];
              covered = lx >= 0 && ly >= 0 && lx < sj.size && ly < sj.size && sj.solid(lx, ly);
            }
            vis += !covered;
          }
        const auto& o = s.annotations[t].objects[i];
        EXPECT_NEAR(o.visible_fraction, static_cast<double>(vis) / total, 1e-6);
        EXPECT_EQ(o.occluded, o.visible_fraction < 0.25);
        EXPECT_EQ(o.box.x1, tr.positions[t][i][0]);
        EXPECT_EQ(o.box.y2, tr.positions[t][i][1] + sp.size);
      }
    }
  }
}

TEST(Synth, EveryObjectAnnotatedEveryFrame) {
  SceneSpec spec = assembly_preset();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SequenceSample s = generate_sequence(spec, seed);
    const std::size_t n = s.annotations[0].objects.size();
    bool any_occluded = false;
    for (const auto& fa : s.annotations) {
      ASSERT_EQ(fa.objects.size(), n);
      for (const auto& o : fa.objects) {
        EXPECT_TRUE(o.box.valid());
        EXPECT_GE(o.box.x1, 0);
        EXPECT_LE(o.box.x2, spec.width);
        EXPECT_EQ(o.box.label, o.cls + 1);
        any_occluded |= o.occluded;
      }
    }
    EXPECT_TRUE(any_occluded);
  }
}

TEST(Synth, Deterministic) {
  SceneSpec spec = assembly_preset();
  EXPECT_TRUE(generate_sequence(spec, 42) == generate_sequence(spec, 42));
  EXPECT_FALSE(generate_sequence(spec, 42) == generate_sequence(spec, 43));
}

TEST(Synth, InfeasibleSpecRejected) {
  SceneSpec spec = staged_preset();
  spec.length = 15;
  EXPECT_THROW(generate_sequence(spec, 0), ContractError);
  spec = staged_preset();
  spec.max_speed = -1;
  EXPECT_THROW(generate_sequence(spec, 0), ContractError);
  EXPECT_THROW(preset("nope"), ContractError);
}

TEST(Synth, Presets) {
  EXPECT_EQ(preset("staged").background, Background::plain);
  EXPECT_EQ(preset("assembly").background, Background::cluttered);
  EXPECT_GT(preset("assembly").max_size - preset("assembly").min_size,
            preset("staged").max_size - preset("staged").min_size);
  EXPECT_GE(preset("staged").min_occlusion, 20);
  EXPECT_GE(preset("assembly").min_occlusion, 20);
}

TEST(Synth, UntexturedOccluderShowsBackground) {
  SceneSpec spec = staged_preset();
  spec.min_objects = spec.max_objects = 1;
  spec.approach = 0;
  SceneTrace tr;
  SequenceSample s = generate_sequence(spec, 3, &tr);
  const Image& bg0 = s.frames[0];
  for (std::size_t t = 0; t < s.frames.size(); ++t) {
    if (!s.annotations[t].objects[0].occluded) continue;
    // plain background: every pixel in the target box equals a far corner pixel
    const auto& b = s.annotations[t].objects[0].box;
    for (int y = static_cast<int>(b.y1); y < b.y2; ++y)
      for (int x = static_cast<int>(b.x1); x < b.x2; ++x)
        for (int c = 0; c < 3; ++c) ASSERT_EQ(s.frames[t].at(x, y, c), bg0.at(0, 0, c));
  }
}

TEST(Composites, SingleObject) {
  SceneSpec spec = staged_preset();
  spec.min_objects = spec.max_objects = 1;
  auto cs = generate_static_composites(spec, 1, 4);
  ASSERT_EQ(cs.size(), 4u);
  for (const auto& c : cs) {
    ASSERT_EQ(c.objects.size(), 1u);
    const auto& b = c.objects[0].box;
    EXPECT_GE(b.x1, 0);
    EXPECT_GE(b.y1, 0);
    EXPECT_LE(b.x2, spec.width);
    EXPECT_LE(b.y2, spec.height);
  }
  EXPECT_THROW(generate_static_composites(spec, 1, 0), ContractError);
}

TEST(Composites, PasteWithoutBlendCopiesPixels) {
  nn::Rng rng = nn::make_rng(9, 0);
  for (int cls = 0; cls < 3; ++cls) {
    Sprite s = make_sprite(cls, 23, rng);
    Image img(64, 64, 3, 17);
    paste(img, s, 10, 20, false);
    for (int y = 0; y < s.size; ++y)
      for (int x = 0; x < s.size; ++x)
        for (int c = 0; c < 3; ++c) {
          if (s.solid(x, y)) {
            ASSERT_EQ(img.at(10 + x, 20 + y, c), s.color(x, y)[c]);
          } else {
            ASSERT_EQ(img.at(10 + x, 20 + y, c), 17);
          }
        }
  }
}

TEST(Dataset, EmptyRoundTrip) {
  fs::path dir = scratch("empty");
  Dataset ds;
  write_dataset(dir, ds);
  Dataset back = read_dataset(dir);
  EXPECT_TRUE(back.sequences.empty());
  fs::remove_all(dir);
}

TEST(Dataset, RoundTripExact) {
  fs::path dir = scratch("roundtrip");
  Dataset ds;
  ds.meta = {{"seed", 5}};
  SceneSpec spec = assembly_preset();
  spec.length = 30;
  for (int i = 0; i < 3; ++i) {
    ds.sequences.push_back(generate_sequence(spec, 100 + i));
    ds.splits.push_back(i < 2 ? "train" : "test");
  }
  write_dataset(dir, ds);
  Dataset back = read_dataset(dir);
  ASSERT_EQ(back.sequences.size(), 3u);
  for (int i = 0; i < 3; ++i) EXPECT_TRUE(back.sequences[i] == ds.sequences[i]);
  EXPECT_EQ(back.splits, ds.splits);
  EXPECT_EQ(back.meta, ds.meta);
  EXPECT_EQ(read_dataset(dir, "test").sequences.size(), 1u);
  EXPECT_TRUE(fs::exists(dir / "seq_000002" / "frame_000029.png"));
  fs::remove_all(dir);
}

TEST(Dataset, GoldenRecord) {
  fs::path dir = scratch("golden");
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "a.jsonl");
    f << R"({"frame": 3, "objects": [{"box": [1, 2, 11.5, 22], "class": 2, "occluded": true, "visible_fraction": 0.125}]})"
      << "\n";
  }
  auto anns = read_annotations(dir / "a.jsonl");
  ASSERT_EQ(anns.size(), 1u);
  EXPECT_EQ(anns[0].frame, 3);
  ASSERT_EQ(anns[0].objects.size(), 1u);
  const auto& o = anns[0].objects[0];
  EXPECT_EQ(o.box, (det::Box{1, 2, 11.5, 22, 1.0, 3}));
  EXPECT_EQ(o.cls, 2);
  EXPECT_TRUE(o.occluded);
  EXPECT_EQ(o.visible_fraction, 0.125);
  fs::remove_all(dir);
}

TEST(Dataset, MalformedRecordNamesFileAndLine) {
  fs::path dir = scratch("malformed");
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "b.jsonl");
    f << R"({"frame": 0, "objects": []})" << "\n";
    f << R"({"frame": 1, "objects": [{"box": [1, 2, 3], "class": 0, "occluded": false, "visible_fraction": 1}]})"
      << "\n";
  }
  try {
    read_annotations(dir / "b.jsonl");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("b.jsonl:2"), std::string::npos) << msg;
  }
  {
    std::ofstream f(dir / "c.jsonl");
    f << "{not json\n";
  }
  EXPECT_THROW(read_annotations(dir / "c.jsonl"), DataError);
  EXPECT_THROW(read_dataset(dir / "missing"), DataError);
  fs::remove_all(dir);
}
