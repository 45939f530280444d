#pragma once

// Differentiable ops recorded on a Tape. Each op computes its forward value
// with a kernel from kernels.hpp and registers the matching backward.

#include <cmath>
#include <memory>
#include <vector>

#include "occmem/nn/kernels.hpp"
#include "occmem/nn/tape.hpp"

namespace occmem::nn {

namespace detail {

template <typename T>
bool any_grad(std::initializer_list<Var<T>> vs) {
  for (const auto& v : vs)
    if (v.defined() && v.tape->requires_grad(v)) return true;
  return false;
}

template <typename T>
Tape<T>& tape_of(Var<T> v) {
  OCCMEM_CHECK(v.defined(), "undefined variable");
  return *v.tape;
}

template <typename T>
Tensor<T> scalar(T v) {
  return Tensor<T>(Shape{1, 1, 1, 1}, v);
}

}  // namespace detail

// Detached copy: value kept, gradient path cut.
template <typename T>
Var<T> detach(Var<T> x) {
  return detail::tape_of(x).constant(x.value());
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, int stride, int pad) {
  Tape<T>& tp = detail::tape_of(x);
  const Tensor<T>* b = bias.defined() ? &bias.value() : nullptr;
  Tensor<T> y = kernels::conv2d(x.value(), weight.value(), b, stride, pad);
  const bool rg = detail::any_grad({x, weight, bias});
  const int xi = x.id, wi = weight.id, bi = bias.defined() ? bias.id : -1;
  return tp.record(std::move(y), rg, [=](Tape<T>& t, int self) {
    Tensor<T>* db = bi >= 0 ? t.grad_sink(bi) : nullptr;
    kernels::conv2d_backward(t.value(xi), t.value(wi), *t.grad_or_null(self),
                             stride, pad, t.grad_sink(xi), t.grad_sink(wi), db);
  });
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, int stride, int pad) {
  return conv2d(x, weight, Var<T>{}, stride, pad);
}

template <typename T>
Var<T> relu(Var<T> x) {
  Tape<T>& tp = detail::tape_of(x);
  Tensor<T> y = x.value();
  for (auto& v : y.vec()) v = v < T(0) ? T(0) : v;  // keeps NaN
  const int xi = x.id;
  return tp.record(std::move(y), detail::any_grad({x}), [=](Tape<T>& t, int self) {
    Tensor<T>* dx = t.grad_sink(xi);
    if (!dx) return;
    const Tensor<T>& g = *t.grad_or_null(self);
    const Tensor<T>& xv = t.value(xi);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > T(0)) (*dx)[i] += g[i];
  });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  Tape<T>& tp = detail::tape_of(x);
  Tensor<T> y = x.value();
  for (auto& v : y.vec()) v = T(1) / (T(1) + std::exp(-v));
  const int xi = x.id;
  return tp.record(std::move(y), detail::any_grad({x}), [=](Tape<T>& t, int self) {
    Tensor<T>* dx = t.grad_sink(xi);
    if (!dx) return;
    const Tensor<T>& g = *t.grad_or_null(self);
    const Tensor<T>& yv = t.value(self);
    for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i] * yv[i] * (T(1) - yv[i]);
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  OCCMEM_CHECK(a.shape() == b.shape(), "add shape mismatch ", a.shape(), " vs ", b.shape());
  Tape<T>& tp = detail::tape_of(a);
  Tensor<T> y = a.value();
  y += b.value();
  const int ai = a.id, bi = b.id;
  return tp.record(std::move(y), detail::any_grad({a, b}), [=](Tape<T>& t, int self) {
    const Tensor<T>& g = *t.grad_or_null(self);
    if (auto* da = t.grad_sink(ai)) *da += g;
    if (auto* db = t.grad_sink(bi)) *db += g;
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  OCCMEM_CHECK(a.shape() == b.shape(), "mul shape mismatch ", a.shape(), " vs ", b.shape());
  Tape<T>& tp = detail::tape_of(a);
  Tensor<T> y = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  const int ai = a.id, bi = b.id;
  return tp.record(std::move(y), detail::any_grad({a, b}), [=](Tape<T>& t, int self) {
    const Tensor<T>& g = *t.grad_or_null(self);
    const Tensor<T>& av = t.value(ai);
    const Tensor<T>& bv2 = t.value(bi);
    if (auto* da = t.grad_sink(ai))
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * bv2[i];
    if (auto* db = t.grad_sink(bi))
      for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i] * av[i];
  });
}

// y = alpha * x + beta (elementwise).
template <typename T>
Var<T> affine(Var<T> x, T alpha, T beta) {
  Tape<T>& tp = detail::tape_of(x);
  Tensor<T> y = x.value();
  for (auto& v : y.vec()) v = alpha * v + beta;
  const int xi = x.id;
  return tp.record(std::move(y), detail::any_grad({x}), [=](Tape<T>& t, int self) {
    if (auto* dx = t.grad_sink(xi)) {
      const Tensor<T>& g = *t.grad_or_null(self);
      for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += alpha * g[i];
    }
  });
}

// (1 - z) * a + z * b
template <typename T>
Var<T> lerp(Var<T> a, Var<T> b, Var<T> z) {
  Tape<T>& tp = detail::tape_of(a);
  OCCMEM_CHECK(a.shape() == b.shape() && a.shape() == z.shape(), "lerp shape mismatch");
  Tensor<T> y(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  const auto& zv = z.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = (T(1) - zv[i]) * av[i] + zv[i] * bv[i];
  const int ai = a.id, bi = b.id, zi = z.id;
  return tp.record(std::move(y), detail::any_grad({a, b, z}), [=](Tape<T>& t, int self) {
    const Tensor<T>& g = *t.grad_or_null(self);
    const auto& av2 = t.value(ai);
    const auto& bv2 = t.value(bi);
    const auto& zv2 = t.value(zi);
    if (auto* da = t.grad_sink(ai))
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * (T(1) - zv2[i]);
    if (auto* db = t.grad_sink(bi))
      for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i] * zv2[i];
    if (auto* dz = t.grad_sink(zi))
      for (std::size_t i = 0; i < g.size(); ++i) (*dz)[i] += g[i] * (bv2[i] - av2[i]);
  });
}

template <typename T>
Var<T> maxpool2x2(Var<T> x) {
  Tape<T>& tp = detail::tape_of(x);
  auto argmax = std::make_shared<std::vector<int>>();
  Tensor<T> y = kernels::maxpool2x2(x.value(), argmax.get());
  const int xi = x.id;
  return tp.record(std::move(y), detail::any_grad({x}), [=](Tape<T>& t, int self) {
    if (auto* dx = t.grad_sink(xi))
      kernels::maxpool2x2_backward(*t.grad_or_null(self), *argmax, *dx);
  });
}

template <typename T>
Var<T> upsample2x(Var<T> x) {
  Tape<T>& tp = detail::tape_of(x);
  Tensor<T> y = kernels::upsample2x(x.value());
  const int xi = x.id;
  return tp.record(std::move(y), detail::any_grad({x}), [=](Tape<T>& t, int self) {
    if (auto* dx = t.grad_sink(xi)) kernels::upsample2x_backward(*t.grad_or_null(self), *dx);
  });
}

template <typename T>
Var<T> zero_pad(Var<T> x, int pad_right, int pad_bottom) {
  if (pad_right == 0 && pad_bottom == 0) return x;
  Tape<T>& tp = detail::tape_of(x);
  Tensor<T> y = kernels::zero_pad(x.value(), pad_right, pad_bottom);
  const int xi = x.id;
  return tp.record(std::move(y), detail::any_grad({x}), [=](Tape<T>& t, int self) {
    if (auto* dx = t.grad_sink(xi)) kernels::zero_pad_backward(*t.grad_or_null(self), *dx);
  });
}

// Top-left h x w window.
template <typename T>
Var<T> crop(Var<T> x, int h, int w) {
  const Shape s = x.shape();
  OCCMEM_CHECK(h >= 1 && w >= 1 && h <= s.h && w <= s.w, "crop outside input: ", h, "x", w,
               " from ", s);
  if (h == s.h && w == s.w) return x;
  Tape<T>& tp = detail::tape_of(x);
  Tensor<T> y(Shape{s.n, s.c, h, w});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) y.at(n, c, i, j) = x.value().at(n, c, i, j);
  const int xi = x.id;
  return tp.record(std::move(y), detail::any_grad({x}), [=](Tape<T>& t, int self) {
    auto* dx = t.grad_sink(xi);
    if (!dx) return;
    const Tensor<T>& g = *t.grad_or_null(self);
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) dx->at(n, c, i, j) += g.at(n, c, i, j);
  });
}

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  Tape<T>& tp = detail::tape_of(a);
  Tensor<T> y = kernels::concat_channels(a.value(), b.value());
  const int ai = a.id, bi = b.id;
  return tp.record(std::move(y), detail::any_grad({a, b}), [=](Tape<T>& t, int self) {
    const Tensor<T>& g = *t.grad_or_null(self);
    const Shape sa = t.value(ai).shape();
    const Shape sb = t.value(bi).shape();
    const std::size_t pa = sa.plane() * sa.c, pb = sb.plane() * sb.c;
    auto* da = t.grad_sink(ai);
    auto* db = t.grad_sink(bi);
    for (int n = 0; n < sa.n; ++n) {
      const T* src = g.plane(n, 0);
      if (da)
        for (std::size_t i = 0; i < pa; ++i) da->plane(n, 0)[i] += src[i];
      if (db)
        for (std::size_t i = 0; i < pb; ++i) db->plane(n, 0)[i] += src[pa + i];
    }
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape s) {
  Tape<T>& tp = detail::tape_of(x);
  Tensor<T> y = x.value().reshaped(s);
  const int xi = x.id;
  return tp.record(std::move(y), detail::any_grad({x}), [=](Tape<T>& t, int self) {
    if (auto* dx = t.grad_sink(xi)) {
      const Tensor<T>& g = *t.grad_or_null(self);
      for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i];
    }
  });
}

// Fully connected: x is (N, D, 1, 1) or anything flattening to N rows;
// weight is (O, D, 1, 1), bias (O). Output (N, O, 1, 1).
template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  using kernels::ConstMatMap;
  using kernels::MatMap;
  Tape<T>& tp = detail::tape_of(x);
  const int n = x.shape().n;
  const int d = static_cast<int>(x.value().size() / n);
  const int o = weight.shape().n;
  OCCMEM_CHECK(static_cast<int>(weight.value().size() / o) == d,
               "linear input width ", d, " does not match weight ", weight.shape());
  Tensor<T> y(Shape{n, o, 1, 1});
  MatMap<T> ym(y.data(), n, o);
  ym.noalias() = ConstMatMap<T>(x.value().data(), n, d) *
                 ConstMatMap<T>(weight.value().data(), o, d).transpose();
  if (bias.defined())
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < o; ++c) ym(r, c) += bias.value()[c];
  const int xi = x.id, wi = weight.id, bi = bias.defined() ? bias.id : -1;
  return tp.record(std::move(y), detail::any_grad({x, weight, bias}),
                   [=](Tape<T>& t, int self) {
                     ConstMatMap<T> g(t.grad_or_null(self)->data(), n, o);
                     if (auto* dx = t.grad_sink(xi)) {
                       MatMap<T>(dx->data(), n, d).noalias() +=
                           g * ConstMatMap<T>(t.value(wi).data(), o, d);
                     }
                     if (auto* dw = t.grad_sink(wi)) {
                       MatMap<T>(dw->data(), o, d).noalias() +=
                           g.transpose() * ConstMatMap<T>(t.value(xi).data(), n, d);
                     }
                     if (bi >= 0)
                       if (auto* db = t.grad_sink(bi))
                         for (int c = 0; c < o; ++c) (*db)[c] += g.col(c).sum();
                   });
}

// rois are (x1, y1, x2, y2) in feature coordinates; output (R, C, out, out).
template <typename T>
Var<T> roi_pool(Var<T> feature, const std::vector<T>& rois, int out) {
  Tape<T>& tp = detail::tape_of(feature);
  auto argmax = std::make_shared<std::vector<int>>();
  Tensor<T> y = kernels::roi_pool(feature.value(), rois, out, argmax.get());
  const int fi = feature.id;
  return tp.record(std::move(y), detail::any_grad({feature}), [=](Tape<T>& t, int self) {
    if (auto* df = t.grad_sink(fi))
      kernels::roi_pool_backward(*t.grad_or_null(self), *argmax, *df);
  });
}

// Memory warp by correlation affinity. Gradients flow to all three inputs.
template <typename T>
Var<T> matchtrans(Var<T> m_prev, Var<T> f_prev, Var<T> f_cur, int radius,
                  T temperature, kernels::AffinityField<T>* field_out = nullptr) {
  Tape<T>& tp = detail::tape_of(m_prev);
  auto field = std::make_shared<kernels::AffinityField<T>>(
      kernels::matchtrans_affinity(f_prev.value(), f_cur.value(), radius, temperature));
  if (field_out) *field_out = *field;
  Tensor<T> y = kernels::apply_affinity(*field, m_prev.value());
  const int mi = m_prev.id, pi = f_prev.id, ci = f_cur.id;
  return tp.record(std::move(y), detail::any_grad({m_prev, f_prev, f_cur}),
                   [=](Tape<T>& t, int self) {
                     kernels::matchtrans_backward(*field, t.value(mi), t.value(pi),
                                                  t.value(ci), temperature,
                                                  *t.grad_or_null(self), t.grad_sink(mi),
                                                  t.grad_sink(pi), t.grad_sink(ci));
                   });
}

template <typename T>
Var<T> sum(Var<T> x) {
  Tape<T>& tp = detail::tape_of(x);
  const int xi = x.id;
  return tp.record(detail::scalar(x.value().sum()), detail::any_grad({x}),
                   [=](Tape<T>& t, int self) {
                     if (auto* dx = t.grad_sink(xi)) {
                       const T g = (*t.grad_or_null(self))[0];
                       for (auto& v : dx->vec()) v += g;
                     }
                   });
}

// sum(x * c) for a constant tensor c; handy for projecting to a scalar.
template <typename T>
Var<T> dot_const(Var<T> x, const Tensor<T>& c) {
  Tape<T>& tp = detail::tape_of(x);
  OCCMEM_CHECK(x.shape() == c.shape(), "dot_const shape mismatch");
  T acc = 0;
  for (std::size_t i = 0; i < c.size(); ++i) acc += x.value()[i] * c[i];
  const int xi = x.id;
  auto cc = std::make_shared<Tensor<T>>(c);
  return tp.record(detail::scalar(acc), detail::any_grad({x}), [=](Tape<T>& t, int self) {
    if (auto* dx = t.grad_sink(xi)) {
      const T g = (*t.grad_or_null(self))[0];
      for (std::size_t i = 0; i < cc->size(); ++i) (*dx)[i] += g * (*cc)[i];
    }
  });
}

// Sum of weighted binary cross-entropy with logits, divided by normalizer.
template <typename T>
Var<T> sigmoid_bce(Var<T> logits, std::vector<T> targets, std::vector<T> weights,
                   T normalizer) {
  Tape<T>& tp = detail::tape_of(logits);
  const auto& x = logits.value();
  OCCMEM_CHECK(targets.size() == x.size() && weights.size() == x.size(),
               "bce target/weight size mismatch");
  T acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (weights[i] == T(0)) continue;
    const T v = x[i];
    // log(1 + e^v) - t*v, computed stably
    const T sp = std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v)));
    acc += weights[i] * (sp - targets[i] * v);
  }
  const int xi = logits.id;
  auto tg = std::make_shared<std::vector<T>>(std::move(targets));
  auto wt = std::make_shared<std::vector<T>>(std::move(weights));
  return tp.record(detail::scalar(acc / normalizer), detail::any_grad({logits}),
                   [=](Tape<T>& t, int self) {
                     if (auto* dx = t.grad_sink(xi)) {
                       const T g = (*t.grad_or_null(self))[0] / normalizer;
                       const auto& xv = t.value(xi);
                       for (std::size_t i = 0; i < xv.size(); ++i) {
                         if ((*wt)[i] == T(0)) continue;
                         const T s = T(1) / (T(1) + std::exp(-xv[i]));
                         (*dx)[i] += g * (*wt)[i] * (s - (*tg)[i]);
                       }
                     }
                   });
}

// Weighted smooth-L1 (Huber with transition at beta), summed / normalizer.
template <typename T>
Var<T> smooth_l1(Var<T> pred, std::vector<T> targets, std::vector<T> weights,
                 T normalizer, T beta = T(1)) {
  Tape<T>& tp = detail::tape_of(pred);
  const auto& x = pred.value();
  OCCMEM_CHECK(targets.size() == x.size() && weights.size() == x.size(),
               "smooth_l1 target/weight size mismatch");
  T acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (weights[i] == T(0)) continue;
    const T d = std::abs(x[i] - targets[i]);
    acc += weights[i] * (d < beta ? T(0.5) * d * d / beta : d - T(0.5) * beta);
  }
  const int xi = pred.id;
  auto tg = std::make_shared<std::vector<T>>(std::move(targets));
  auto wt = std::make_shared<std::vector<T>>(std::move(weights));
  return tp.record(detail::scalar(acc / normalizer), detail::any_grad({pred}),
                   [=](Tape<T>& t, int self) {
                     if (auto* dx = t.grad_sink(xi)) {
                       const T g = (*t.grad_or_null(self))[0] / normalizer;
                       const auto& xv = t.value(xi);
                       for (std::size_t i = 0; i < xv.size(); ++i) {
                         if ((*wt)[i] == T(0)) continue;
                         const T d = xv[i] - (*tg)[i];
                         const T gd = std::abs(d) < beta ? d / beta : (d > 0 ? T(1) : T(-1));
                         (*dx)[i] += g * (*wt)[i] * gd;
                       }
                     }
                   });
}

// Mean softmax cross-entropy over rows of an (N, K, 1, 1) logit tensor.
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, std::vector<int> labels) {
  Tape<T>& tp = detail::tape_of(logits);
  const int n = logits.shape().n;
  const int k = static_cast<int>(logits.value().size() / n);
  OCCMEM_CHECK(static_cast<int>(labels.size()) == n, "label count mismatch");
  auto probs = std::make_shared<std::vector<T>>(logits.value().size());
  T acc = 0;
  for (int r = 0; r < n; ++r) {
    const T* row = logits.value().data() + static_cast<std::size_t>(r) * k;
    T* p = probs->data() + static_cast<std::size_t>(r) * k;
    T mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T z = 0;
    for (int j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    for (int j = 0; j < k; ++j) p[j] = std::exp(row[j] - mx) / z;
    OCCMEM_CHECK(labels[r] >= 0 && labels[r] < k, "label out of range");
    acc += -(row[labels[r]] - mx - std::log(z));
  }
  const int xi = logits.id;
  auto lb = std::make_shared<std::vector<int>>(std::move(labels));
  return tp.record(detail::scalar(acc / n), detail::any_grad({logits}),
                   [=](Tape<T>& t, int self) {
                     if (auto* dx = t.grad_sink(xi)) {
                       const T g = (*t.grad_or_null(self))[0] / n;
                       for (int r = 0; r < n; ++r)
                         for (int j = 0; j < k; ++j) {
                           const std::size_t i = static_cast<std::size_t>(r) * k + j;
                           (*dx)[i] += g * ((*probs)[i] - ((*lb)[r] == j ? T(1) : T(0)));
                         }
                     }
                   });
}

template <typename T>
Var<T> scalar_sum(const std::vector<Var<T>>& terms) {
  OCCMEM_CHECK(!terms.empty(), "scalar_sum of nothing");
  Var<T> acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

}  // namespace occmem::nn
