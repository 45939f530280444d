#pragma once

#include <cstdint>
#include <vector>

#include "occmem/core/error.hpp"

namespace occmem::nn {

enum class OpKind { conv, maxpool };

struct GraphOp {
  OpKind kind = OpKind::conv;
  int kernel = 3;
  int stride = 1;
  int pad = 1;
  int in_channels = 1;
  int out_channels = 1;
  bool bias = true;

  static GraphOp conv(int k, int cin, int cout, int stride = 1, int pad = -1,
                      bool bias = true) {
    return {OpKind::conv, k, stride, pad < 0 ? k / 2 : pad, cin, cout, bias};
  }
  static GraphOp pool(int channels) {
    return {OpKind::maxpool, 2, 2, 0, channels, channels, false};
  }
};

// A chain of parameterized ops, used to reason about parameter counts and
// receptive fields without building tensors.
class OpGraph {
 public:
  OpGraph() = default;
  explicit OpGraph(std::vector<GraphOp> ops) {
    for (auto& op : ops) push(op);
  }

  OpGraph& push(const GraphOp& op) {
    OCCMEM_CHECK(op.kernel >= 1 && op.stride >= 1, "bad op geometry");
    if (!ops_.empty()) {
      OCCMEM_CHECK(ops_.back().out_channels == op.in_channels,
                   "channel mismatch between adjacent ops: ", ops_.back().out_channels,
                   " -> ", op.in_channels);
    }
    if (op.kind == OpKind::maxpool) {
      OCCMEM_CHECK(op.in_channels == op.out_channels, "pooling keeps channels");
    }
    ops_.push_back(op);
    return *this;
  }

  OpGraph concat(const OpGraph& other) const {
    OpGraph g = *this;
    for (const auto& op : other.ops_) g.push(op);
    return g;
  }

  const std::vector<GraphOp>& ops() const { return ops_; }
  bool empty() const { return ops_.empty(); }

 private:
  std::vector<GraphOp> ops_;
};

inline std::int64_t count_parameters(const OpGraph& g) {
  std::int64_t n = 0;
  for (const auto& op : g.ops()) {
    if (op.kind != OpKind::conv) continue;
    n += static_cast<std::int64_t>(op.kernel) * op.kernel * op.in_channels *
         op.out_channels;
    if (op.bias) n += op.out_channels;
  }
  return n;
}

struct RFSpec {
  std::int64_t receptive_field = 1;
  std::int64_t stride = 1;
  double offset = 0.0;
};

// Theoretical receptive field at input resolution:
//   conv: rf += (k - 1) * stride_product, stride_product *= stride
//   pool: stride_product *= 2 (the pooled window itself is not counted)
// offset is the input-space centre of the first output cell.
inline RFSpec receptive_field(const OpGraph& g) {
  RFSpec rf;
  for (const auto& op : g.ops()) {
    if (op.kind == OpKind::conv) {
      rf.receptive_field += static_cast<std::int64_t>(op.kernel - 1) * rf.stride;
      rf.offset += ((op.kernel - 1) / 2.0 - op.pad) * static_cast<double>(rf.stride);
    } else {
      rf.offset += 0.5 * static_cast<double>(rf.stride);
    }
    rf.stride *= op.stride;
  }
  return rf;
}

}  // namespace occmem::nn
