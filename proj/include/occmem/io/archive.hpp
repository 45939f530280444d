#pragma once

// Weight archive:
//   8 bytes   magic "OCCMEMW1"
//   8 bytes   header length N, little-endian u64
//   N bytes   JSON header (compact, keys sorted)
//   rest      float32 little-endian tensor data, in header order
// Header: {"format", "version", "config", "config_hash", "extra",
//          "tensors": [{"name", "shape", "offset", "count"}]}
// offset/count are in floats from the start of the data block.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "occmem/core/error.hpp"
#include "occmem/nn/tape.hpp"

namespace occmem::io {

using json = nlohmann::json;

inline constexpr char kMagic[9] = "OCCMEMW1";
inline const std::string kVelocityPrefix = "opt.";

inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::string config_hash(const json& config) { return hex64(fnv1a(config.dump())); }

inline std::uint64_t file_checksum(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw DataError("cannot read '" + p.string() + "'");
  std::vector<char> buf(1 << 16);
  std::uint64_t h = 0xcbf29ce484222325ull;
  while (f) {
    f.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h = fnv1a(buf.data(), static_cast<std::size_t>(f.gcount()), h);
  }
  return h;
}

struct Archive {
  json config = json::object();
  json extra = nullptr;  // training state etc.
  nn::ParamStore<float> params;
  nn::ParamStore<float> velocity;  // stored as opt.<name>
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{p[i]} << (8 * i);
  return v;
}

inline void put_f32(std::string& out, float f) {
  const std::uint32_t u = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

inline float get_f32(const unsigned char* p) {
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= std::uint32_t{p[i]} << (8 * i);
  return std::bit_cast<float>(u);
}

}  // namespace detail

inline std::string encode_archive(const Archive& a) {
  json entries = json::array();
  std::string data;
  std::size_t offset = 0;
  auto add = [&](const std::string& name, const nn::Tensor<float>& t) {
    const nn::Shape s = t.shape();
    entries.push_back({{"name", name}, {"shape", {s.n, s.c, s.h, s.w}}, {"offset", offset},
                       {"count", t.size()}});
    for (float v : t.vec()) detail::put_f32(data, v);
    offset += t.size();
  };
  for (const auto& [name, t] : a.params) {
    OCCMEM_CHECK(name.rfind(kVelocityPrefix, 0) != 0, "parameter name '", name,
                 "' clashes with the optimizer prefix");
    add(name, t);
  }
  for (const auto& [name, t] : a.velocity) add(kVelocityPrefix + name, t);
  json header = {{"format", "occmem-weights"},  {"version", 1},
                 {"config", a.config},          {"config_hash", config_hash(a.config)},
                 {"extra", a.extra},            {"tensors", entries}};
  const std::string h = header.dump();
  std::string out(kMagic, 8);
  detail::put_u64(out, h.size());
  out += h;
  out += data;
  return out;
}

inline Archive decode_archive(const std::string& bytes, const std::string& where = "archive") {
  auto fail = [&](const std::string& what) { throw DataError(where + ": " + what); };
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) fail("not a weight archive");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t hlen = detail::get_u64(p + 8);
  if (hlen > bytes.size() - 16) fail("truncated header");
  json header;
  try {
    header = json::parse(bytes.substr(16, hlen));
  } catch (const json::exception& e) {
    fail(std::string("bad header: ") + e.what());
  }
  if (header.value("format", "") != "occmem-weights" || header.value("version", 0) != 1)
    fail("unsupported archive format");
  Archive a;
  a.config = header.at("config");
  a.extra = header.at("extra");
  if (header.at("config_hash") != config_hash(a.config)) fail("config hash mismatch");
  const unsigned char* data = p + 16 + hlen;
  const std::size_t floats = (bytes.size() - 16 - hlen) / 4;
  if ((bytes.size() - 16 - hlen) % 4) fail("data block is not a whole number of floats");
  for (const auto& e : header.at("tensors")) {
    const std::string name = e.at("name");
    const auto& sh = e.at("shape");
    if (!sh.is_array() || sh.size() != 4) fail("bad shape for '" + name + "'");
    nn::Shape s{sh[0], sh[1], sh[2], sh[3]};
    const std::size_t off = e.at("offset"), count = e.at("count");
    if (count != s.numel() || off + count > floats) fail("tensor '" + name + "' out of range");
    nn::Tensor<float> t(s);
    for (std::size_t i = 0; i < count; ++i) t[i] = detail::get_f32(data + 4 * (off + i));
    if (name.rfind(kVelocityPrefix, 0) == 0)
      a.velocity.set(name.substr(kVelocityPrefix.size()), std::move(t));
    else
      a.params.set(name, std::move(t));
  }
  return a;
}

inline void write_archive(const std::filesystem::path& path, const Archive& a) {
  const std::string bytes = encode_archive(a);
  // write-then-rename so an interrupted run never leaves half an archive
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw DataError("cannot write '" + tmp.string() + "'");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline Archive read_archive(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open weight archive '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_archive(ss.str(), path.string());
}

}  // namespace occmem::io
