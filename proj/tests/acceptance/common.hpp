#pragma once

#include <chrono>
#include <cstdarg>
#include <cstdio>
#include <string>

#include <json.hpp>

namespace acceptance {

struct Result {
  bool pass = false;
  bool skipped = false;
  std::string detail;
  nlohmann::json values = nlohmann::json::object();
};

struct Timer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

inline std::string fmt(const char* f, ...) {
  char buf[1024];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

inline void progress(const std::string& s) {
  std::fprintf(stderr, "  .. %s\n", s.c_str());
  std::fflush(stderr);
}

}  // namespace acceptance
