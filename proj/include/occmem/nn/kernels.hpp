#pragma once

// Raw forward/backward kernels on Tensors. Layout is NCHW throughout.
// Everything here is a pure function of its arguments; the autodiff tape in
// tape.hpp composes these.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "occmem/nn/tensor.hpp"

namespace occmem::nn::kernels {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline int conv_out_dim(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// ---------------------------------------------------------------------------
// conv2d. Weights are (Cout, Cin, K, K); bias may be empty.

template <typename T>
void im2col(const T* x, int c, int h, int w, int k, int stride, int pad,
            int ho, int wo, T* col) {
  for (int ci = 0; ci < c; ++ci) {
    const T* xp = x + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + (static_cast<std::size_t>(ci * k + ky) * k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* out = row + static_cast<std::size_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(out, out + wo, T(0));
            continue;
          }
          const T* in = xp + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            out[ox] = (ix >= 0 && ix < w) ? in[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, int c, int h, int w, int k, int stride, int pad,
            int ho, int wo, T* x) {
  for (int ci = 0; ci < c; ++ci) {
    T* xp = x + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row =
            col + (static_cast<std::size_t>(ci * k + ky) * k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const T* in = row + static_cast<std::size_t>(oy) * wo;
          T* out = xp + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) out[ix] += in[ox];
          }
        }
      }
    }
  }
}

inline bool conv_is_pointwise(int k, int stride, int pad) {
  return k == 1 && stride == 1 && pad == 0;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>* bias, int stride, int pad) {
  const int cout = weight.n();
  const int cin = weight.c();
  const int k = weight.h();
  OCCMEM_CHECK(weight.w() == k, "conv kernel must be square, got ", weight.shape());
  OCCMEM_CHECK(x.c() == cin, "conv2d channel mismatch: input has ", x.c(),
               " channels, kernel expects ", cin);
  OCCMEM_CHECK(stride >= 1 && pad >= 0, "bad stride/pad ", stride, "/", pad);
  const int ho = conv_out_dim(x.h(), k, stride, pad);
  const int wo = conv_out_dim(x.w(), k, stride, pad);
  OCCMEM_CHECK(ho >= 1 && wo >= 1, "conv2d output would be empty for input ",
               x.shape());
  if (bias) {
    OCCMEM_CHECK(bias->size() == static_cast<std::size_t>(cout),
                 "bias size mismatch");
  }
  Tensor<T> y(Shape{x.n(), cout, ho, wo});
  const int kk = cin * k * k;
  const int hw = ho * wo;
  const bool pointwise = conv_is_pointwise(k, stride, pad);
  std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(kk) * hw);
  ConstMatMap<T> wm(weight.data(), cout, kk);
  for (int b = 0; b < x.n(); ++b) {
    const T* src = x.plane(b, 0);
    if (!pointwise) {
      im2col(src, cin, x.h(), x.w(), k, stride, pad, ho, wo, col.data());
      src = col.data();
    }
    ConstMatMap<T> cm(src, kk, hw);
    MatMap<T> ym(y.plane(b, 0), cout, hw);
    ym.noalias() = wm * cm;
    if (bias) {
      for (int co = 0; co < cout; ++co) ym.row(co).array() += (*bias)[co];
    }
  }
  return y;
}

// Accumulates into dx/dweight/dbias (each may be null).
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight,
                     const Tensor<T>& dy, int stride, int pad, Tensor<T>* dx,
                     Tensor<T>* dweight, Tensor<T>* dbias) {
  const int cout = weight.n();
  const int cin = weight.c();
  const int k = weight.h();
  const int ho = dy.h();
  const int wo = dy.w();
  const int kk = cin * k * k;
  const int hw = ho * wo;
  const bool pointwise = conv_is_pointwise(k, stride, pad);
  std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(kk) * hw);
  std::vector<T> dcol(static_cast<std::size_t>(kk) * hw);
  ConstMatMap<T> wm(weight.data(), cout, kk);
  for (int b = 0; b < x.n(); ++b) {
    ConstMatMap<T> dym(dy.plane(b, 0), cout, hw);
    if (dweight) {
      const T* src = x.plane(b, 0);
      if (!pointwise) {
        im2col(src, cin, x.h(), x.w(), k, stride, pad, ho, wo, col.data());
        src = col.data();
      }
      ConstMatMap<T> cm(src, kk, hw);
      MatMap<T> dwm(dweight->data(), cout, kk);
      dwm.noalias() += dym * cm.transpose();
    }
    if (dbias) {
      // plain loop: Eigen's vectorised sum depends on pointer alignment
      for (int co = 0; co < cout; ++co) {
        const T* row = dy.plane(b, co);
        (*dbias)[co] += std::accumulate(row, row + hw, T(0));
      }
    }
    if (dx) {
      if (pointwise) {
        MatMap<T> dxm(dx->plane(b, 0), cin, hw);
        dxm.noalias() += wm.transpose() * dym;
      } else {
        MatMap<T> dcm(dcol.data(), kk, hw);
        dcm.noalias() = wm.transpose() * dym;
        col2im(dcol.data(), cin, x.h(), x.w(), k, stride, pad, ho, wo,
               dx->plane(b, 0));
      }
    }
  }
}

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2, ceil semantics: a partial window at an odd edge
// takes the max over the cells it does cover.

inline int pool_out_dim(int in) { return (in + 1) / 2; }

template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& x, std::vector<int>* argmax = nullptr) {
  const int ho = pool_out_dim(x.h());
  const int wo = pool_out_dim(x.w());
  Tensor<T> y(Shape{x.n(), x.c(), ho, wo});
  if (argmax) argmax->assign(y.size(), 0);
  std::size_t o = 0;
  for (int b = 0; b < x.n(); ++b) {
    for (int c = 0; c < x.c(); ++c) {
      const T* p = x.plane(b, c);
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox, ++o) {
          T best = -std::numeric_limits<T>::infinity();
          int best_i = -1;
          for (int dy = 0; dy < 2; ++dy) {
            const int iy = 2 * oy + dy;
            if (iy >= x.h()) break;
            for (int dx = 0; dx < 2; ++dx) {
              const int ix = 2 * ox + dx;
              if (ix >= x.w()) break;
              const int i = iy * x.w() + ix;
              if (best_i < 0 || p[i] > best) {
                best = p[i];
                best_i = i;
              }
            }
          }
          y[o] = best;
          if (argmax) (*argmax)[o] = best_i;
        }
      }
    }
  }
  return y;
}

template <typename T>
void maxpool2x2_backward(const Tensor<T>& dy, const std::vector<int>& argmax,
                         Tensor<T>& dx) {
  std::size_t o = 0;
  for (int b = 0; b < dy.n(); ++b) {
    for (int c = 0; c < dy.c(); ++c) {
      T* p = dx.plane(b, c);
      for (std::size_t i = 0; i < dy.shape().plane(); ++i, ++o) {
        p[argmax[o]] += dy[o];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Bilinear 2x upsampling, half-pixel-centers convention:
//   src = max(0, (dst + 0.5) / 2 - 0.5), neighbours floor(src) and
//   min(floor(src) + 1, in - 1), weight = src - floor(src).

struct LerpTap {
  int i0;
  int i1;
  double frac;
};

inline std::vector<LerpTap> upsample_taps(int in) {
  std::vector<LerpTap> taps(static_cast<std::size_t>(2 * in));
  for (int d = 0; d < 2 * in; ++d) {
    double src = (d + 0.5) / 2.0 - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    taps[d] = {i0, i1, src - i0};
  }
  return taps;
}

template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x) {
  const auto ty = upsample_taps(x.h());
  const auto tx = upsample_taps(x.w());
  Tensor<T> y(Shape{x.n(), x.c(), 2 * x.h(), 2 * x.w()});
  for (int b = 0; b < x.n(); ++b) {
    for (int c = 0; c < x.c(); ++c) {
      const T* p = x.plane(b, c);
      T* q = y.plane(b, c);
      for (int oy = 0; oy < y.h(); ++oy) {
        const auto& a = ty[oy];
        const T fy = static_cast<T>(a.frac);
        for (int ox = 0; ox < y.w(); ++ox) {
          const auto& e = tx[ox];
          const T fx = static_cast<T>(e.frac);
          const T top = p[a.i0 * x.w() + e.i0] * (1 - fx) + p[a.i0 * x.w() + e.i1] * fx;
          const T bot = p[a.i1 * x.w() + e.i0] * (1 - fx) + p[a.i1 * x.w() + e.i1] * fx;
          q[oy * y.w() + ox] = top * (1 - fy) + bot * fy;
        }
      }
    }
  }
  return y;
}

template <typename T>
void upsample2x_backward(const Tensor<T>& dy, Tensor<T>& dx) {
  const auto ty = upsample_taps(dx.h());
  const auto tx = upsample_taps(dx.w());
  for (int b = 0; b < dy.n(); ++b) {
    for (int c = 0; c < dy.c(); ++c) {
      const T* g = dy.plane(b, c);
      T* p = dx.plane(b, c);
      for (int oy = 0; oy < dy.h(); ++oy) {
        const auto& a = ty[oy];
        const T fy = static_cast<T>(a.frac);
        for (int ox = 0; ox < dy.w(); ++ox) {
          const auto& e = tx[ox];
          const T fx = static_cast<T>(e.frac);
          const T v = g[oy * dy.w() + ox];
          p[a.i0 * dx.w() + e.i0] += v * (1 - fy) * (1 - fx);
          p[a.i0 * dx.w() + e.i1] += v * (1 - fy) * fx;
          p[a.i1 * dx.w() + e.i0] += v * fy * (1 - fx);
          p[a.i1 * dx.w() + e.i1] += v * fy * fx;
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Zero padding on the right / bottom edges.

template <typename T>
Tensor<T> zero_pad(const Tensor<T>& x, int pad_right, int pad_bottom) {
  OCCMEM_CHECK(pad_right >= 0 && pad_bottom >= 0, "negative padding");
  Tensor<T> y(Shape{x.n(), x.c(), x.h() + pad_bottom, x.w() + pad_right});
  for (int b = 0; b < x.n(); ++b)
    for (int c = 0; c < x.c(); ++c)
      for (int yy = 0; yy < x.h(); ++yy)
        std::copy_n(x.plane(b, c) + yy * x.w(), x.w(),
                    y.plane(b, c) + yy * y.w());
  return y;
}

template <typename T>
void zero_pad_backward(const Tensor<T>& dy, Tensor<T>& dx) {
  for (int b = 0; b < dx.n(); ++b)
    for (int c = 0; c < dx.c(); ++c)
      for (int yy = 0; yy < dx.h(); ++yy) {
        const T* src = dy.plane(b, c) + yy * dy.w();
        T* dst = dx.plane(b, c) + yy * dx.w();
        for (int xx = 0; xx < dx.w(); ++xx) dst[xx] += src[xx];
      }
}

// ---------------------------------------------------------------------------
// Channel concatenation.

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  OCCMEM_CHECK(a.n() == b.n() && a.shape().same_spatial(b.shape()),
               "concat shape mismatch ", a.shape(), " vs ", b.shape());
  Tensor<T> y(Shape{a.n(), a.c() + b.c(), a.h(), a.w()});
  const std::size_t pa = a.shape().plane() * a.c();
  const std::size_t pb = b.shape().plane() * b.c();
  for (int n = 0; n < a.n(); ++n) {
    std::copy_n(a.plane(n, 0), pa, y.plane(n, 0));
    std::copy_n(b.plane(n, 0), pb, y.plane(n, a.c()));
  }
  return y;
}

// ---------------------------------------------------------------------------
// Max ROI pooling over a single-image feature map. Boxes are given in
// feature-map coordinates (continuous, x1 <= x2). Each of the out x out bins
// covers [floor(start), ceil(end)) clamped to the map, with at least one cell.

struct RoiBin {
  int y0, y1, x0, x1;
};

template <typename T>
RoiBin roi_bin(T fx1, T fy1, T fx2, T fy2, int by, int bx, int out, int h, int w) {
  const T bw = std::max(fx2 - fx1, T(1)) / out;
  const T bh = std::max(fy2 - fy1, T(1)) / out;
  auto clampi = [](int v, int lo, int hi) { return std::min(std::max(v, lo), hi); };
  int y0 = clampi(static_cast<int>(std::floor(fy1 + by * bh)), 0, h - 1);
  int y1 = clampi(static_cast<int>(std::ceil(fy1 + (by + 1) * bh)), 0, h);
  int x0 = clampi(static_cast<int>(std::floor(fx1 + bx * bw)), 0, w - 1);
  int x1 = clampi(static_cast<int>(std::ceil(fx1 + (bx + 1) * bw)), 0, w);
  if (y1 <= y0) y1 = y0 + 1;
  if (x1 <= x0) x1 = x0 + 1;
  return {y0, y1, x0, x1};
}

// rois: 4 values per roi (x1, y1, x2, y2) already scaled to feature coords.
template <typename T>
Tensor<T> roi_pool(const Tensor<T>& feature, const std::vector<T>& rois, int out,
                   std::vector<int>* argmax) {
  const int r = static_cast<int>(rois.size() / 4);
  OCCMEM_CHECK(r >= 1, "roi_pool needs at least one roi");
  OCCMEM_CHECK(feature.n() == 1, "roi_pool expects a single-image feature map");
  const int c = feature.c();
  Tensor<T> y(Shape{r, c, out, out});
  if (argmax) argmax->assign(y.size(), 0);
  std::size_t o = 0;
  for (int i = 0; i < r; ++i) {
    const T* b = rois.data() + 4 * i;
    for (int ch = 0; ch < c; ++ch) {
      const T* p = feature.plane(0, ch);
      for (int by = 0; by < out; ++by) {
        for (int bx = 0; bx < out; ++bx, ++o) {
          const RoiBin bin = roi_bin(b[0], b[1], b[2], b[3], by, bx, out,
                                     feature.h(), feature.w());
          T best = -std::numeric_limits<T>::infinity();
          int best_i = -1;
          for (int yy = bin.y0; yy < bin.y1; ++yy)
            for (int xx = bin.x0; xx < bin.x1; ++xx) {
              const int idx = yy * feature.w() + xx;
              if (best_i < 0 || p[idx] > best) {
                best = p[idx];
                best_i = idx;
              }
            }
          y[o] = best;
          if (argmax) (*argmax)[o] = best_i;
        }
      }
    }
  }
  return y;
}

template <typename T>
void roi_pool_backward(const Tensor<T>& dy, const std::vector<int>& argmax,
                       Tensor<T>& dfeature) {
  const int plane = dy.h() * dy.w();
  std::size_t o = 0;
  for (int i = 0; i < dy.n(); ++i)
    for (int ch = 0; ch < dy.c(); ++ch) {
      T* p = dfeature.plane(0, ch);
      for (int k = 0; k < plane; ++k, ++o) p[argmax[o]] += dy[o];
    }
}

// ---------------------------------------------------------------------------
// MatchTrans affinity and warp. For every cell (y, x) of the current frame the
// affinity over the (2k+1)^2 neighbourhood of the previous frame is a softmax
// of cosine similarities scaled by 1/temperature; neighbours outside the map
// are excluded from the normalisation. The warped memory is the affinity-
// weighted sum of the previous memory over the same neighbourhood.

template <typename T>
struct AffinityField {
  int radius = 0;
  int h = 0;
  int w = 0;
  // (h*w) x (2k+1)^2, zero where the neighbour is out of bounds.
  std::vector<T> weights;
  // cosine similarities (needed by the backward pass)
  std::vector<T> cosine;

  int window() const { return 2 * radius + 1; }
  int taps() const { return window() * window(); }
  T weight(int y, int x, int dy, int dx) const {
    return weights[(static_cast<std::size_t>(y) * w + x) * taps() +
                   (dy + radius) * window() + (dx + radius)];
  }
};

template <typename T>
constexpr T cosine_eps() {
  return T(1e-6);
}

template <typename T>
AffinityField<T> matchtrans_affinity(const Tensor<T>& f_prev, const Tensor<T>& f_cur,
                                     int radius, T temperature) {
  OCCMEM_CHECK(f_prev.shape() == f_cur.shape(), "matchtrans feature shapes differ: ",
               f_prev.shape(), " vs ", f_cur.shape());
  OCCMEM_CHECK(f_cur.n() == 1, "matchtrans expects batch 1");
  OCCMEM_CHECK(radius >= 1, "matchtrans radius must be >= 1");
  const int c = f_cur.c(), h = f_cur.h(), w = f_cur.w();
  const std::size_t hw = f_cur.shape().plane();
  AffinityField<T> a;
  a.radius = radius;
  a.h = h;
  a.w = w;
  const int taps = a.taps();
  a.weights.assign(hw * taps, T(0));
  a.cosine.assign(hw * taps, T(0));
  std::vector<T> norm_prev(hw, T(0)), norm_cur(hw, T(0));
  for (int ch = 0; ch < c; ++ch) {
    const T* p = f_prev.plane(0, ch);
    const T* q = f_cur.plane(0, ch);
    for (std::size_t i = 0; i < hw; ++i) {
      norm_prev[i] += p[i] * p[i];
      norm_cur[i] += q[i] * q[i];
    }
  }
  for (auto& v : norm_prev) v = std::sqrt(v) + cosine_eps<T>();
  for (auto& v : norm_cur) v = std::sqrt(v) + cosine_eps<T>();
  std::vector<T> scores(taps);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t ci = static_cast<std::size_t>(y) * w + x;
      T* cos = a.cosine.data() + ci * taps;
      T mx = -std::numeric_limits<T>::infinity();
      for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
          const int t = (dy + radius) * a.window() + (dx + radius);
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          const std::size_t ni = static_cast<std::size_t>(yy) * w + xx;
          T dot = 0;
          for (int ch = 0; ch < c; ++ch)
            dot += f_cur.plane(0, ch)[ci] * f_prev.plane(0, ch)[ni];
          cos[t] = dot / (norm_cur[ci] * norm_prev[ni]);
          scores[t] = cos[t] / temperature;
          mx = std::max(mx, scores[t]);
        }
      T z = 0;
      T* wt = a.weights.data() + ci * taps;
      for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
          const int t = (dy + radius) * a.window() + (dx + radius);
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          wt[t] = std::exp(scores[t] - mx);
          z += wt[t];
        }
      for (int t = 0; t < taps; ++t) wt[t] /= z;
    }
  return a;
}

template <typename T>
Tensor<T> apply_affinity(const AffinityField<T>& a, const Tensor<T>& m_prev) {
  OCCMEM_CHECK(m_prev.h() == a.h && m_prev.w() == a.w && m_prev.n() == 1,
               "memory shape ", m_prev.shape(), " does not match affinity field");
  const int r = a.radius, h = a.h, w = a.w, taps = a.taps();
  Tensor<T> out(m_prev.shape());
  for (int ch = 0; ch < m_prev.c(); ++ch) {
    const T* p = m_prev.plane(0, ch);
    T* q = out.plane(0, ch);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t ci = static_cast<std::size_t>(y) * w + x;
        const T* wt = a.weights.data() + ci * taps;
        T acc = 0;
        for (int dy = -r; dy <= r; ++dy) {
          const int yy = y + dy;
          if (yy < 0 || yy >= h) continue;
          for (int dx = -r; dx <= r; ++dx) {
            const int xx = x + dx;
            if (xx < 0 || xx >= w) continue;
            acc += wt[(dy + r) * a.window() + (dx + r)] * p[yy * w + xx];
          }
        }
        q[ci] = acc;
      }
  }
  return out;
}

// Backward of out = apply_affinity(matchtrans_affinity(f_prev, f_cur), m_prev).
template <typename T>
void matchtrans_backward(const AffinityField<T>& a, const Tensor<T>& m_prev,
                         const Tensor<T>& f_prev, const Tensor<T>& f_cur,
                         T temperature, const Tensor<T>& dout, Tensor<T>* dm_prev,
                         Tensor<T>* df_prev, Tensor<T>* df_cur) {
  const int r = a.radius, h = a.h, w = a.w, taps = a.taps(), win = a.window();
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  // dL/dweight for every (cell, tap)
  std::vector<T> dwt(hw * taps, T(0));
  for (int ch = 0; ch < m_prev.c(); ++ch) {
    const T* p = m_prev.plane(0, ch);
    const T* g = dout.plane(0, ch);
    T* dp = dm_prev ? dm_prev->plane(0, ch) : nullptr;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t ci = static_cast<std::size_t>(y) * w + x;
        const T gv = g[ci];
        const T* wt = a.weights.data() + ci * taps;
        T* dw = dwt.data() + ci * taps;
        for (int dy = -r; dy <= r; ++dy) {
          const int yy = y + dy;
          if (yy < 0 || yy >= h) continue;
          for (int dx = -r; dx <= r; ++dx) {
            const int xx = x + dx;
            if (xx < 0 || xx >= w) continue;
            const int t = (dy + r) * win + (dx + r);
            dw[t] += gv * p[yy * w + xx];
            if (dp) dp[yy * w + xx] += gv * wt[t];
          }
        }
      }
  }
  if (!df_prev && !df_cur) return;
  // softmax backward -> d cosine, then cosine backward -> features.
  const int c = f_cur.c();
  std::vector<T> norm_prev(hw, T(0)), norm_cur(hw, T(0));
  std::vector<T> raw_prev(hw), raw_cur(hw);
  for (int ch = 0; ch < c; ++ch) {
    const T* p = f_prev.plane(0, ch);
    const T* q = f_cur.plane(0, ch);
    for (std::size_t i = 0; i < hw; ++i) {
      norm_prev[i] += p[i] * p[i];
      norm_cur[i] += q[i] * q[i];
    }
  }
  for (std::size_t i = 0; i < hw; ++i) {
    raw_prev[i] = std::sqrt(norm_prev[i]);
    raw_cur[i] = std::sqrt(norm_cur[i]);
    norm_prev[i] = raw_prev[i] + cosine_eps<T>();
    norm_cur[i] = raw_cur[i] + cosine_eps<T>();
  }
  // cos = dot / (Nc * Np), N = |f| + eps.
  // d cos / d fc = fp / (Nc Np) - cos * (fc / |fc|) / Nc
  // d cos / d fp = fc / (Nc Np) - cos * (fp / |fp|) / Np
  // Accumulate scalar coefficients per cell pair, then expand over channels.
  std::vector<T> dcos(hw * taps, T(0));
  for (std::size_t ci = 0; ci < hw; ++ci) {
    const T* wt = a.weights.data() + ci * taps;
    const T* dw = dwt.data() + ci * taps;
    T dot = 0;
    for (int t = 0; t < taps; ++t) dot += wt[t] * dw[t];
    for (int t = 0; t < taps; ++t)
      dcos[ci * taps + t] = wt[t] * (dw[t] - dot) / temperature;
  }
  std::vector<T> self_cur(hw, T(0)), self_prev(hw, T(0));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t ci = static_cast<std::size_t>(y) * w + x;
      for (int dy = -r; dy <= r; ++dy) {
        const int yy = y + dy;
        if (yy < 0 || yy >= h) continue;
        for (int dx = -r; dx <= r; ++dx) {
          const int xx = x + dx;
          if (xx < 0 || xx >= w) continue;
          const int t = (dy + r) * win + (dx + r);
          const std::size_t ni = static_cast<std::size_t>(yy) * w + xx;
          const T g = dcos[ci * taps + t];
          const T cs = a.cosine[ci * taps + t];
          const T inv = T(1) / (norm_cur[ci] * norm_prev[ni]);
          for (int ch = 0; ch < c; ++ch) {
            const T fc = f_cur.plane(0, ch)[ci];
            const T fp = f_prev.plane(0, ch)[ni];
            if (df_cur) df_cur->plane(0, ch)[ci] += g * fp * inv;
            if (df_prev) df_prev->plane(0, ch)[ni] += g * fc * inv;
          }
          self_cur[ci] += g * cs / norm_cur[ci];
          self_prev[ni] += g * cs / norm_prev[ni];
        }
      }
    }
  for (int ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < hw; ++i) {
      if (df_cur && raw_cur[i] > 0)
        df_cur->plane(0, ch)[i] -= self_cur[i] * f_cur.plane(0, ch)[i] / raw_cur[i];
      if (df_prev && raw_prev[i] > 0)
        df_prev->plane(0, ch)[i] -= self_prev[i] * f_prev.plane(0, ch)[i] / raw_prev[i];
    }
}

}  // namespace occmem::nn::kernels
