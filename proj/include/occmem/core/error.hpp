#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace occmem {

// Raised when a caller breaks an operation's preconditions (shape or
// channel mismatch, out-of-range argument).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised for malformed external data (dataset files, archives, configs).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when training produces a non-finite value.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

}  // namespace detail
}  // namespace occmem

#define OCCMEM_CHECK(cond, ...)                                              \
  do {                                                                       \
    if (!(cond)) {                                                           \
      throw ::occmem::ContractError(::occmem::detail::concat(               \
          "check failed: " #cond " : ", __VA_ARGS__));                       \
    }                                                                        \
  } while (0)
