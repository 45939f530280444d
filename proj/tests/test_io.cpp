#include <gtest/gtest.h>

#include <filesystem>

#include "occmem/io/archive.hpp"
#include "occmem/io/config.hpp"

using namespace occmem;
using namespace occmem::io;

namespace {

std::vector<std::string> names(const nn::ParamStore<float>& p) {
  std::vector<std::string> out;
  for (const auto& [k, v] : p) out.push_back(k);
  return out;
}

Archive sample_archive() {
  Archive a;
  a.config = {{"cell", "stmm"}, {"channels", 4}};
  a.extra = {{"step", 12}};
  nn::Rng rng = nn::make_rng(3, 0);
  a.params.set("conv.w", nn::randn<float>({2, 3, 3, 3}, rng));
  a.params.set("conv.b", nn::randn<float>({2, 1, 1, 1}, rng));
  a.velocity.set("conv.w", nn::randn<float>({2, 3, 3, 3}, rng));
  return a;
}

}  // namespace

TEST(Archive, RoundTripIsExact) {
  const Archive a = sample_archive();
  const std::string bytes = encode_archive(a);
  const Archive b = decode_archive(bytes);
  EXPECT_EQ(b.config, a.config);
  EXPECT_EQ(b.extra, a.extra);
  EXPECT_EQ(names(b.params), names(a.params));
  for (const auto& n : names(a.params)) EXPECT_TRUE(b.params.at(n) == a.params.at(n)) << n;
  EXPECT_TRUE(b.velocity.at("conv.w") == a.velocity.at("conv.w"));
  EXPECT_EQ(encode_archive(b), bytes);
}

TEST(Archive, StartsWithMagic) {
  const std::string bytes = encode_archive(sample_archive());
  EXPECT_EQ(bytes.substr(0, 8), "OCCMEMW1");
}

TEST(Archive, RejectsCorruption) {
  const std::string good = encode_archive(sample_archive());
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_archive(bad_magic), DataError);
  EXPECT_THROW(decode_archive(good.substr(0, 12)), DataError);
  EXPECT_THROW(decode_archive(good.substr(0, good.size() - 4)), DataError);
  std::string bad_hash = good;
  const auto pos = bad_hash.find("\"channels\":4");
  ASSERT_NE(pos, std::string::npos);
  bad_hash[pos + 11] = '5';
  EXPECT_THROW(decode_archive(bad_hash), DataError);
}

TEST(Archive, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "occmem_test_io.occw";
  write_archive(path, sample_archive());
  EXPECT_FALSE(std::filesystem::exists(path.string() + ".tmp"));
  EXPECT_EQ(names(read_archive(path).params), names(sample_archive().params));
  std::filesystem::remove(path);
  EXPECT_THROW(read_archive(path), DataError);
}

TEST(Fnv1a, KnownVectors) {
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ull);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cull);
  EXPECT_EQ(fnv1a("foobar"), 0x85944171f73967e8ull);
}

TEST(Config, DefaultsResolveAndRoundTrip) {
  const RunConfig c = resolve_config({});
  EXPECT_EQ(c.seed, 1u);
  EXPECT_EQ(c.train_sequences, 100);
  const RunConfig d = config_from_resolved_json(resolved_json(c));
  EXPECT_EQ(resolved_text(d), resolved_text(c));
}

TEST(Config, EveryKeyRoundTrips) {
  const RunConfig c;
  for (const auto& k : config_keys()) {
    RunConfig d;
    k.set(d, k.get(c));
    EXPECT_EQ(k.get(d), k.get(c)) << k.name;
    EXPECT_FALSE(k.doc.empty()) << k.name;
  }
}

TEST(Config, ParsesTextWithComments) {
  const auto a = parse_config_text("# header\nseed = 7  # trailing\n\nmodel.cell=learned_align\n", "x.cfg");
  ASSERT_EQ(a.size(), 2u);
  const RunConfig c = resolve_config(a);
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.model.cell, mem::CellKind::learned_align);
}

TEST(Config, RejectsUnknownAndDuplicateKeys) {
  try {
    parse_config_text("seed = 1\nmodel.cel = stmm\n", "x.cfg");
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("x.cfg:2"), std::string::npos);
  }
  try {
    parse_config_text("seed = 1\nseed = 2\n", "y.cfg");
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("y.cfg:2"), std::string::npos);
  }
  EXPECT_THROW(parse_assignment("no equals sign", "cli"), ContractError);
}

TEST(Config, RejectsBadValues) {
  EXPECT_THROW(resolve_config({parse_assignment("seed = abc", "cli")}), ContractError);
  EXPECT_THROW(resolve_config({parse_assignment("model.cell = lstm", "cli")}), ContractError);
  EXPECT_THROW(resolve_config({parse_assignment("train.bptt = 0", "cli")}), ContractError);
}

TEST(Config, PresetAppliesBeforeOtherKeys) {
  const RunConfig c = resolve_config({parse_assignment("scene.width = 96", "a"), parse_assignment("preset = staged", "b")});
  EXPECT_EQ(c.preset, "staged");
  EXPECT_EQ(c.scene.width, 96);
}

TEST(Config, VideoConfigJsonRoundTrip) {
  RunConfig c;
  c.model.cell = mem::CellKind::matchtrans;
  c.model.cell_cfg.z_bias = 1.5;
  const auto v = c.video_config();
  EXPECT_EQ(to_json(video_config_from_json(to_json(v))), to_json(v));
  EXPECT_THROW(video_config_from_json(json{{"cell", 3}}), DataError);
}
