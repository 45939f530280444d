#pragma once

#include <cmath>
#include <string>

#include "occmem/nn/tape.hpp"

namespace occmem::nn {

struct SgdOptions {
  double momentum = 0.9;
  double weight_decay = 1e-4;
  // Global L2 norm above which the gradient is rescaled (0 disables).
  double clip_norm = 10.0;
};

// SGD with momentum. Velocity buffers live in a ParamStore so they can be
// archived next to the weights for exact resumption.
template <typename T>
class Sgd {
 public:
  explicit Sgd(SgdOptions opt = {}) : opt_(opt) {}

  // Returns the pre-clipping gradient norm.
  double step(ParamStore<T>& params, const GradStore<T>& grads, double lr) {
    double sq = 0;
    for (const auto& [name, g] : grads)
      for (T v : g.vec()) sq += static_cast<double>(v) * v;
    const double norm = std::sqrt(sq);
    const double scale =
        (opt_.clip_norm > 0 && norm > opt_.clip_norm) ? opt_.clip_norm / norm : 1.0;
    for (const auto& [name, g] : grads) {
      Tensor<T>& w = params.at(name);
      if (!velocity_.contains(name)) velocity_.set(name, Tensor<T>(w.shape()));
      Tensor<T>& v = velocity_.at(name);
      const T mu = static_cast<T>(opt_.momentum);
      const T wd = static_cast<T>(opt_.weight_decay);
      const T s = static_cast<T>(scale);
      const T eta = static_cast<T>(lr);
      for (std::size_t i = 0; i < w.size(); ++i) {
        v[i] = mu * v[i] + s * g[i] + wd * w[i];
        w[i] -= eta * v[i];
      }
    }
    return norm;
  }

  ParamStore<T>& velocity() { return velocity_; }
  const ParamStore<T>& velocity() const { return velocity_; }
  const SgdOptions& options() const { return opt_; }

 private:
  SgdOptions opt_;
  ParamStore<T> velocity_;
};

}  // namespace occmem::nn
