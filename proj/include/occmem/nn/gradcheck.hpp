#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "occmem/nn/tape.hpp"

namespace occmem::nn {

struct GradCheckResult {
  double max_relative_error = 0.0;
  bool finite = true;
  int worst_input = -1;
  std::size_t worst_index = 0;
  std::size_t checked = 0;

  bool passed(double tol) const { return finite && max_relative_error < tol; }
};

// Builds a scalar from the given input leaves on the supplied tape.
using GradCheckFn =
    std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

struct GradCheckOptions {
  double eps = 1e-5;
  // Check at most this many coordinates per input (0 = all), chosen by a
  // fixed-seed shuffle so runs are reproducible.
  std::size_t max_per_input = 0;
  unsigned seed = 7;
};

// Compares tape gradients against central differences, reporting
// max |analytic - numeric| / max(1, |analytic|).
inline GradCheckResult grad_check(const GradCheckFn& fn,
                                  const std::vector<Tensor<double>>& inputs,
                                  GradCheckOptions opt = {}) {
  GradCheckResult res;
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& x : inputs) leaves.push_back(tape.leaf(x));
    Var<double> out = fn(tape, leaves);
    tape.backward(out);
    for (const auto& v : leaves) analytic.push_back(tape.grad(v));
  }
  auto eval = [&](const std::vector<Tensor<double>>& xs) {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& x : xs) leaves.push_back(tape.constant(x));
    return fn(tape, leaves).value()[0];
  };
  std::mt19937 rng(opt.seed);
  std::vector<Tensor<double>> work = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::vector<std::size_t> idx(inputs[k].size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (opt.max_per_input > 0 && idx.size() > opt.max_per_input) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.max_per_input);
    }
    for (std::size_t i : idx) {
      const double orig = work[k][i];
      work[k][i] = orig + opt.eps;
      const double fp = eval(work);
      work[k][i] = orig - opt.eps;
      const double fm = eval(work);
      work[k][i] = orig;
      const double numeric = (fp - fm) / (2 * opt.eps);
      const double a = analytic[k][i];
      ++res.checked;
      if (!std::isfinite(a) || !std::isfinite(numeric)) {
        res.finite = false;
        continue;
      }
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      if (err > res.max_relative_error) {
        res.max_relative_error = err;
        res.worst_input = static_cast<int>(k);
        res.worst_index = i;
      }
    }
  }
  return res;
}

using ParamFn = std::function<Var<double>(Tape<double>&, const ParamStore<double>&)>;

// grad_check over every tensor of a ParamStore: each parameter becomes a
// checked input, bound on the tape under its own name.
inline GradCheckResult grad_check_params(const ParamFn& fn, const ParamStore<double>& params,
                                         GradCheckOptions opt = {}) {
  std::vector<std::string> names;
  std::vector<Tensor<double>> inputs;
  for (const auto& [name, t] : params) {
    names.push_back(name);
    inputs.push_back(t);
  }
  return grad_check(
      [&](Tape<double>& tape, const std::vector<Var<double>>& in) {
        for (std::size_t i = 0; i < names.size(); ++i) tape.bind(names[i], in[i]);
        return fn(tape, params);
      },
      inputs, opt);
}

}  // namespace occmem::nn
