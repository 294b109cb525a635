#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "moelab/common.hpp"
#include "moelab/rng.hpp"
#include "moelab/tape.hpp"
#include "moelab/tensor.hpp"

// Differentiable primitives. Every op computes its forward result eagerly and,
// when the tape is recording and an input requires grad, pushes one closure
// that accumulates (never overwrites) input grads from the output grad.
// Ops never mutate their inputs; callers zero grads explicitly.

namespace moelab {

namespace detail {

template <class Real>
bool want_grad(const Tape<Real>& tape, bool any_input_grad) {
  return tape.recording && any_input_grad;
}

inline std::size_t rows_of(const Shape& shape) {
  if (shape.empty()) throw ShapeError("op needs rank >= 1, got scalar");
  std::size_t n = 1;
  for (std::size_t i = 0; i + 1 < shape.size(); ++i)
    n *= static_cast<std::size_t>(shape[i]);
  return n;
}

}  // namespace detail

// y = a + b, identical shapes.
template <class Real>
Tensor<Real> add(Tape<Real>& tape, Tensor<Real> a, Tensor<Real> b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shape " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  bool g = detail::want_grad(tape, a.requires_grad() || b.requires_grad());
  Tensor<Real> y = Tensor<Real>::zeros(a.shape(), g);
  const Real* pa = a.data();
  const Real* pb = b.data();
  Real* py = y.data();
  for (std::size_t i = 0; i < y.numel(); ++i) py[i] = pa[i] + pb[i];
  if (g)
    tape.record([a, b, y]() mutable {
      const Real* dy = y.grad();
      if (a.requires_grad()) {
        Real* da = a.grad();
        for (std::size_t i = 0; i < y.numel(); ++i) da[i] += dy[i];
      }
      if (b.requires_grad()) {
        Real* db = b.grad();
        for (std::size_t i = 0; i < y.numel(); ++i) db[i] += dy[i];
      }
    });
  return y;
}

// y = c * x for a compile-time-known constant c (not differentiated w.r.t. c).
template <class Real>
Tensor<Real> scale(Tape<Real>& tape, Tensor<Real> x, Real c) {
  bool g = detail::want_grad(tape, x.requires_grad());
  Tensor<Real> y = Tensor<Real>::zeros(x.shape(), g);
  const Real* px = x.data();
  Real* py = y.data();
  for (std::size_t i = 0; i < y.numel(); ++i) py[i] = c * px[i];
  if (g)
    tape.record([x, y, c]() mutable {
      const Real* dy = y.grad();
      Real* dx = x.grad();
      for (std::size_t i = 0; i < y.numel(); ++i) dx[i] += c * dy[i];
    });
  return y;
}

namespace detail {

// Shared core of matmul/affine: y[n,:] = x[n,:]·w (+ b). x is treated as
// [N, D_in] with N = product of leading extents.
template <class Real>
Tensor<Real> affine_impl(Tape<Real>& tape, Tensor<Real> x, Tensor<Real> w,
                         Tensor<Real>* b) {
  if (w.rank() != 2)
    throw ShapeError("affine: weight must be rank 2, got " +
                     shape_str(w.shape()));
  const int d_in = w.dim(0);
  const int d_out = w.dim(1);
  if (x.rank() < 1 || x.shape().back() != d_in)
    throw ShapeError("affine: input " + shape_str(x.shape()) +
                     " incompatible with weight " + shape_str(w.shape()));
  if (b && (b->rank() != 1 || b->dim(0) != d_out))
    throw ShapeError("affine: bias " + shape_str(b->shape()) +
                     " incompatible with weight " + shape_str(w.shape()));
  const std::size_t n_rows = x.numel() / static_cast<std::size_t>(d_in);
  Shape out_shape = x.shape();
  out_shape.back() = d_out;

  bool any = x.requires_grad() || w.requires_grad() ||
             (b && b->requires_grad());
  bool g = want_grad(tape, any);
  Tensor<Real> y = Tensor<Real>::zeros(out_shape, g);
  const Real* px = x.data();
  const Real* pw = w.data();
  Real* py = y.data();
  for (std::size_t n = 0; n < n_rows; ++n) {
    const Real* xr = px + n * d_in;
    Real* yr = py + n * d_out;
    if (b) {
      const Real* pb = b->data();
      for (int j = 0; j < d_out; ++j) yr[j] = pb[j];
    }
    for (int k = 0; k < d_in; ++k) {
      const Real xv = xr[k];
      const Real* wr = pw + static_cast<std::size_t>(k) * d_out;
      for (int j = 0; j < d_out; ++j) yr[j] += xv * wr[j];
    }
  }
  if (g) {
    Tensor<Real> bias = b ? *b : Tensor<Real>();
    bool has_bias = b != nullptr;
    tape.record([x, w, bias, y, n_rows, d_in, d_out, has_bias]() mutable {
      const Real* dy = y.grad();
      const Real* px = x.data();
      const Real* pw = w.data();
      if (x.requires_grad()) {
        Real* dx = x.grad();
        for (std::size_t n = 0; n < n_rows; ++n) {
          const Real* dyr = dy + n * d_out;
          Real* dxr = dx + n * d_in;
          for (int k = 0; k < d_in; ++k) {
            const Real* wr = pw + static_cast<std::size_t>(k) * d_out;
            Real acc = 0;
            for (int j = 0; j < d_out; ++j) acc += dyr[j] * wr[j];
            dxr[k] += acc;
          }
        }
      }
      if (w.requires_grad()) {
        Real* dw = w.grad();
        for (std::size_t n = 0; n < n_rows; ++n) {
          const Real* dyr = dy + n * d_out;
          const Real* xr = px + n * d_in;
          for (int k = 0; k < d_in; ++k) {
            const Real xv = xr[k];
            Real* dwr = dw + static_cast<std::size_t>(k) * d_out;
            for (int j = 0; j < d_out; ++j) dwr[j] += xv * dyr[j];
          }
        }
      }
      if (has_bias && bias.requires_grad()) {
        Real* db = bias.grad();
        for (std::size_t n = 0; n < n_rows; ++n) {
          const Real* dyr = dy + n * d_out;
          for (int j = 0; j < d_out; ++j) db[j] += dyr[j];
        }
      }
    });
  }
  return y;
}

}  // namespace detail

// y = x·w + b over the last axis of x.
template <class Real>
Tensor<Real> affine(Tape<Real>& tape, Tensor<Real> x, Tensor<Real> w,
                    Tensor<Real> b) {
  return detail::affine_impl(tape, x, w, &b);
}

// y = x·w (no bias; router projection).
template <class Real>
Tensor<Real> matmul(Tape<Real>& tape, Tensor<Real> x, Tensor<Real> w) {
  return detail::affine_impl<Real>(tape, x, w, nullptr);
}

// Batched matmul over matching leading dims:
//   trans_b=false: a[...,M,K] · b[...,K,N] -> [...,M,N]
//   trans_b=true : a[...,M,K] · b[...,N,K]^T -> [...,M,N]
template <class Real>
Tensor<Real> bmm(Tape<Real>& tape, Tensor<Real> a, Tensor<Real> b,
                 bool trans_b) {
  if (a.rank() < 2 || b.rank() != a.rank())
    throw ShapeError("bmm: ranks " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  for (int i = 0; i + 2 < a.rank(); ++i)
    if (a.dim(i) != b.dim(i))
      throw ShapeError("bmm: leading dims differ, " + shape_str(a.shape()) +
                       " vs " + shape_str(b.shape()));
  const int m = a.dim(a.rank() - 2);
  const int k = a.dim(a.rank() - 1);
  const int n = trans_b ? b.dim(b.rank() - 2) : b.dim(b.rank() - 1);
  const int bk = trans_b ? b.dim(b.rank() - 1) : b.dim(b.rank() - 2);
  if (bk != k)
    throw ShapeError("bmm: inner dims differ, " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  std::size_t groups = 1;
  for (int i = 0; i + 2 < a.rank(); ++i)
    groups *= static_cast<std::size_t>(a.dim(i));
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);

  bool g = detail::want_grad(tape, a.requires_grad() || b.requires_grad());
  Tensor<Real> y = Tensor<Real>::zeros(out_shape, g);
  const std::size_t sa = static_cast<std::size_t>(m) * k;
  const std::size_t sb = static_cast<std::size_t>(n) * k;
  const std::size_t sy = static_cast<std::size_t>(m) * n;
  for (std::size_t grp = 0; grp < groups; ++grp) {
    const Real* pa = a.data() + grp * sa;
    const Real* pb = b.data() + grp * sb;
    Real* py = y.data() + grp * sy;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        Real acc = 0;
        if (trans_b) {
          const Real* ar = pa + static_cast<std::size_t>(i) * k;
          const Real* br = pb + static_cast<std::size_t>(j) * k;
          for (int kk = 0; kk < k; ++kk) acc += ar[kk] * br[kk];
        } else {
          for (int kk = 0; kk < k; ++kk)
            acc += pa[static_cast<std::size_t>(i) * k + kk] *
                   pb[static_cast<std::size_t>(kk) * n + j];
        }
        py[static_cast<std::size_t>(i) * n + j] = acc;
      }
  }
  if (g)
    tape.record([a, b, y, trans_b, groups, m, n, k, sa, sb, sy]() mutable {
      for (std::size_t grp = 0; grp < groups; ++grp) {
        const Real* dy = y.grad() + grp * sy;
        const Real* pa = a.data() + grp * sa;
        const Real* pb = b.data() + grp * sb;
        if (a.requires_grad()) {
          Real* da = a.grad() + grp * sa;
          // da = dy·b^T (nn) or dy·b (nt)
          for (int i = 0; i < m; ++i)
            for (int kk = 0; kk < k; ++kk) {
              Real acc = 0;
              for (int j = 0; j < n; ++j) {
                Real bv = trans_b ? pb[static_cast<std::size_t>(j) * k + kk]
                                  : pb[static_cast<std::size_t>(kk) * n + j];
                acc += dy[static_cast<std::size_t>(i) * n + j] * bv;
              }
              da[static_cast<std::size_t>(i) * k + kk] += acc;
            }
        }
        if (b.requires_grad()) {
          Real* db = b.grad() + grp * sb;
          if (trans_b) {
            // db[j,kk] += sum_i dy[i,j]·a[i,kk]
            for (int j = 0; j < n; ++j)
              for (int kk = 0; kk < k; ++kk) {
                Real acc = 0;
                for (int i = 0; i < m; ++i)
                  acc += dy[static_cast<std::size_t>(i) * n + j] *
                         pa[static_cast<std::size_t>(i) * k + kk];
                db[static_cast<std::size_t>(j) * k + kk] += acc;
              }
          } else {
            // db[kk,j] += sum_i a[i,kk]·dy[i,j]
            for (int kk = 0; kk < k; ++kk)
              for (int j = 0; j < n; ++j) {
                Real acc = 0;
                for (int i = 0; i < m; ++i)
                  acc += pa[static_cast<std::size_t>(i) * k + kk] *
                         dy[static_cast<std::size_t>(i) * n + j];
                db[static_cast<std::size_t>(kk) * n + j] += acc;
              }
          }
        }
      }
    });
  return y;
}

// Swap dims 1 and 2 of a rank-4 tensor (head split/merge).
template <class Real>
Tensor<Real> transpose12(Tape<Real>& tape, Tensor<Real> x) {
  if (x.rank() != 4)
    throw ShapeError("transpose12: need rank 4, got " + shape_str(x.shape()));
  const int a = x.dim(0), b = x.dim(1), c = x.dim(2), d = x.dim(3);
  bool g = detail::want_grad(tape, x.requires_grad());
  Tensor<Real> y = Tensor<Real>::zeros({a, c, b, d}, g);
  auto idx = [d](int i, int j, int kk, int stride_j, int stride_i) {
    return ((static_cast<std::size_t>(i) * stride_i + j) *
            static_cast<std::size_t>(stride_j) + kk) * static_cast<std::size_t>(d);
  };
  (void)idx;
  const Real* px = x.data();
  Real* py = y.data();
  for (int i = 0; i < a; ++i)
    for (int j = 0; j < b; ++j)
      for (int kk = 0; kk < c; ++kk) {
        const Real* src =
            px + (((static_cast<std::size_t>(i) * b + j) * c) + kk) * d;
        Real* dst =
            py + (((static_cast<std::size_t>(i) * c + kk) * b) + j) * d;
        for (int l = 0; l < d; ++l) dst[l] = src[l];
      }
  if (g)
    tape.record([x, y, a, b, c, d]() mutable {
      const Real* dy = y.grad();
      Real* dx = x.grad();
      for (int i = 0; i < a; ++i)
        for (int j = 0; j < b; ++j)
          for (int kk = 0; kk < c; ++kk) {
            const Real* src =
                dy + (((static_cast<std::size_t>(i) * c + kk) * b) + j) * d;
            Real* dst =
                dx + (((static_cast<std::size_t>(i) * b + j) * c) + kk) * d;
            for (int l = 0; l < d; ++l) dst[l] += src[l];
          }
    });
  return y;
}

// Row-major copy into a new shape with the same numel.
template <class Real>
Tensor<Real> reshape(Tape<Real>& tape, Tensor<Real> x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " +
                     shape_str(new_shape) + " changes numel");
  bool g = detail::want_grad(tape, x.requires_grad());
  Tensor<Real> y = Tensor<Real>::zeros(std::move(new_shape), g);
  std::copy(x.data(), x.data() + x.numel(), y.data());
  if (g)
    tape.record([x, y]() mutable {
      const Real* dy = y.grad();
      Real* dx = x.grad();
      for (std::size_t i = 0; i < y.numel(); ++i) dx[i] += dy[i];
    });
  return y;
}

// Tanh-approximation GELU: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
inline constexpr double kGeluRoot2OverPi = 0.7978845608028654;
inline constexpr double kGeluCubic = 0.044715;

template <class Real>
Tensor<Real> gelu(Tape<Real>& tape, Tensor<Real> x) {
  bool g = detail::want_grad(tape, x.requires_grad());
  Tensor<Real> y = Tensor<Real>::zeros(x.shape(), g);
  const Real* px = x.data();
  Real* py = y.data();
  const Real k = static_cast<Real>(kGeluRoot2OverPi);
  const Real c = static_cast<Real>(kGeluCubic);
  for (std::size_t i = 0; i < y.numel(); ++i) {
    const Real v = px[i];
    const Real t = std::tanh(k * (v + c * v * v * v));
    py[i] = Real(0.5) * v * (Real(1) + t);
  }
  if (g)
    tape.record([x, y, k, c]() mutable {
      const Real* dy = y.grad();
      const Real* px = x.data();
      Real* dx = x.grad();
      for (std::size_t i = 0; i < y.numel(); ++i) {
        const Real v = px[i];
        const Real u = k * (v + c * v * v * v);
        const Real t = std::tanh(u);
        const Real du = k * (Real(1) + Real(3) * c * v * v);
        const Real d =
            Real(0.5) * (Real(1) + t) + Real(0.5) * v * (Real(1) - t * t) * du;
        dx[i] += d * dy[i];
      }
    });
  return y;
}

template <class Real>
Tensor<Real> relu(Tape<Real>& tape, Tensor<Real> x) {
  bool g = detail::want_grad(tape, x.requires_grad());
  Tensor<Real> y = Tensor<Real>::zeros(x.shape(), g);
  const Real* px = x.data();
  Real* py = y.data();
  for (std::size_t i = 0; i < y.numel(); ++i)
    py[i] = px[i] > Real(0) ? px[i] : Real(0);
  if (g)
    tape.record([x, y]() mutable {
      const Real* dy = y.grad();
      const Real* px = x.data();
      Real* dx = x.grad();
      for (std::size_t i = 0; i < y.numel(); ++i)
        if (px[i] > Real(0)) dx[i] += dy[i];
    });
  return y;
}

// Last-axis softmax with max-subtraction.
template <class Real>
Tensor<Real> softmax(Tape<Real>& tape, Tensor<Real> x) {
  const int w = x.shape().empty() ? 0 : x.shape().back();
  if (w < 1)
    throw ShapeError("softmax: need last extent >= 1, got " +
                     shape_str(x.shape()));
  const std::size_t rows = detail::rows_of(x.shape());
  bool g = detail::want_grad(tape, x.requires_grad());
  Tensor<Real> y = Tensor<Real>::zeros(x.shape(), g);
  const Real* px = x.data();
  Real* py = y.data();
  for (std::size_t n = 0; n < rows; ++n) {
    const Real* xr = px + n * w;
    Real* yr = py + n * w;
    Real mx = xr[0];
    for (int j = 1; j < w; ++j) mx = std::max(mx, xr[j]);
    Real denom = 0;
    for (int j = 0; j < w; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      denom += yr[j];
    }
    for (int j = 0; j < w; ++j) yr[j] /= denom;
  }
  if (g)
    tape.record([x, y, rows, w]() mutable {
      const Real* dy = y.grad();
      const Real* py = y.data();
      Real* dx = x.grad();
      for (std::size_t n = 0; n < rows; ++n) {
        const Real* yr = py + n * w;
        const Real* dyr = dy + n * w;
        Real dot = 0;
        for (int j = 0; j < w; ++j) dot += dyr[j] * yr[j];
        Real* dxr = dx + n * w;
        for (int j = 0; j < w; ++j) dxr[j] += yr[j] * (dyr[j] - dot);
      }
    });
  return y;
}

// Per-last-axis standardization then elementwise affine.
template <class Real>
Tensor<Real> layer_norm(Tape<Real>& tape, Tensor<Real> x, Tensor<Real> gain,
                        Tensor<Real> bias, Real eps) {
  const int d = x.shape().empty() ? 0 : x.shape().back();
  if (d < 1)
    throw ShapeError("layer_norm: need last extent >= 1, got " +
                     shape_str(x.shape()));
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 ||
      bias.dim(0) != d)
    throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(d) +
                     "]");
  if (!(eps > Real(0))) throw ConfigError("layer_norm: eps must be > 0");
  const std::size_t rows = detail::rows_of(x.shape());
  bool g = detail::want_grad(tape, x.requires_grad() || gain.requires_grad() ||
                                       bias.requires_grad());
  Tensor<Real> y = Tensor<Real>::zeros(x.shape(), g);
  std::vector<Real> xhat(x.numel());
  std::vector<Real> inv_sigma(rows);
  const Real* px = x.data();
  const Real* pg = gain.data();
  const Real* pb = bias.data();
  Real* py = y.data();
  for (std::size_t n = 0; n < rows; ++n) {
    const Real* xr = px + n * d;
    Real mu = 0;
    for (int j = 0; j < d; ++j) mu += xr[j];
    mu /= d;
    Real var = 0;
    for (int j = 0; j < d; ++j) {
      const Real c = xr[j] - mu;
      var += c * c;
    }
    var /= d;
    const Real is = Real(1) / std::sqrt(var + eps);
    inv_sigma[n] = is;
    Real* hr = xhat.data() + n * d;
    Real* yr = py + n * d;
    for (int j = 0; j < d; ++j) {
      hr[j] = (xr[j] - mu) * is;
      yr[j] = pg[j] * hr[j] + pb[j];
    }
  }
  if (g)
    tape.record([x, gain, bias, y, rows, d, xhat = std::move(xhat),
                 inv_sigma = std::move(inv_sigma)]() mutable {
      const Real* dy = y.grad();
      const Real* pg = gain.data();
      for (std::size_t n = 0; n < rows; ++n) {
        const Real* dyr = dy + n * d;
        const Real* hr = xhat.data() + n * d;
        if (gain.requires_grad()) {
          Real* dg = gain.grad();
          for (int j = 0; j < d; ++j) dg[j] += dyr[j] * hr[j];
        }
        if (bias.requires_grad()) {
          Real* db = bias.grad();
          for (int j = 0; j < d; ++j) db[j] += dyr[j];
        }
        if (x.requires_grad()) {
          Real sum_dh = 0, sum_dh_h = 0;
          for (int j = 0; j < d; ++j) {
            const Real dh = dyr[j] * pg[j];
            sum_dh += dh;
            sum_dh_h += dh * hr[j];
          }
          Real* dxr = x.grad() + n * d;
          const Real is = inv_sigma[n];
          for (int j = 0; j < d; ++j) {
            const Real dh = dyr[j] * pg[j];
            dxr[j] += is * (dh - sum_dh / d - hr[j] * sum_dh_h / d);
          }
        }
      }
    });
  return y;
}

// Inverted dropout. rate==0 or eval mode returns x unchanged (same storage)
// and consumes no randomness.
template <class Real>
Tensor<Real> dropout(Tape<Real>& tape, Tensor<Real> x, double rate,
                     bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw ConfigError("dropout: rate must be in [0,1), got " +
                      std::to_string(rate));
  if (!training || rate == 0.0) return x;
  bool g = detail::want_grad(tape, x.requires_grad());
  Tensor<Real> y = Tensor<Real>::zeros(x.shape(), g);
  std::vector<Real> mask(x.numel());
  const Real keep_scale = static_cast<Real>(1.0 / (1.0 - rate));
  const Real* px = x.data();
  Real* py = y.data();
  for (std::size_t i = 0; i < y.numel(); ++i) {
    mask[i] = rng.uniform() < rate ? Real(0) : keep_scale;
    py[i] = px[i] * mask[i];
  }
  if (g)
    tape.record([x, y, mask = std::move(mask)]() mutable {
      const Real* dy = y.grad();
      Real* dx = x.grad();
      for (std::size_t i = 0; i < y.numel(); ++i) dx[i] += dy[i] * mask[i];
    });
  return y;
}

// Mean negative log-softmax over positions whose target != ignore_id.
// All-ignored input yields loss 0 with no gradient.
template <class Real>
Tensor<Real> cross_entropy(Tape<Real>& tape, Tensor<Real> logits,
                           const std::vector<int>& targets, int ignore_id) {
  if (logits.rank() != 2)
    throw ShapeError("cross_entropy: logits must be [N,V], got " +
                     shape_str(logits.shape()));
  const int n = logits.dim(0);
  const int v = logits.dim(1);
  if (static_cast<int>(targets.size()) != n)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(n) + " rows");
  std::size_t m = 0;
  for (int t : targets) {
    if (t == ignore_id) continue;
    if (t < 0 || t >= v)
      throw IndexError("cross_entropy: target " + std::to_string(t) +
                       " out of range [0," + std::to_string(v) + ")");
    ++m;
  }
  bool g = detail::want_grad(tape, logits.requires_grad()) && m > 0;
  Tensor<Real> loss = Tensor<Real>::zeros(Shape{}, g);
  if (m == 0) return loss;

  std::vector<Real> probs(logits.numel());
  const Real* pl = logits.data();
  Real acc = 0;
  for (int i = 0; i < n; ++i) {
    const Real* lr = pl + static_cast<std::size_t>(i) * v;
    Real* pr = probs.data() + static_cast<std::size_t>(i) * v;
    Real mx = lr[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, lr[j]);
    Real denom = 0;
    for (int j = 0; j < v; ++j) {
      pr[j] = std::exp(lr[j] - mx);
      denom += pr[j];
    }
    for (int j = 0; j < v; ++j) pr[j] /= denom;
    if (targets[i] != ignore_id)
      acc += std::log(denom) + mx - lr[targets[i]];
  }
  loss.data()[0] = acc / static_cast<Real>(m);
  if (g)
    tape.record([logits, loss, targets, ignore_id, n, v, m,
                 probs = std::move(probs)]() mutable {
      const Real dl = loss.grad()[0] / static_cast<Real>(m);
      Real* dx = logits.grad();
      for (int i = 0; i < n; ++i) {
        if (targets[i] == ignore_id) continue;
        const Real* pr = probs.data() + static_cast<std::size_t>(i) * v;
        Real* dr = dx + static_cast<std::size_t>(i) * v;
        for (int j = 0; j < v; ++j) dr[j] += pr[j] * dl;
        dr[targets[i]] -= dl;
      }
    });
  return loss;
}

// Row gather from an embedding table; backward scatter-adds.
template <class Real>
Tensor<Real> embedding_lookup(Tape<Real>& tape, Tensor<Real> table,
                              const std::vector<int>& ids) {
  if (table.rank() != 2)
    throw ShapeError("embedding_lookup: table must be [V,D], got " +
                     shape_str(table.shape()));
  const int v = table.dim(0);
  const int d = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v)
      throw IndexError("embedding_lookup: id " + std::to_string(id) +
                       " out of range [0," + std::to_string(v) + ")");
  bool g = detail::want_grad(tape, table.requires_grad());
  Tensor<Real> y = Tensor<Real>::zeros({static_cast<int>(ids.size()), d}, g);
  const Real* pt = table.data();
  Real* py = y.data();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy(pt + static_cast<std::size_t>(ids[i]) * d,
              pt + static_cast<std::size_t>(ids[i] + 1) * d, py + i * d);
  if (g)
    tape.record([table, y, ids, d]() mutable {
      const Real* dy = y.grad();
      Real* dt = table.grad();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        const Real* src = dy + i * d;
        Real* dst = dt + static_cast<std::size_t>(ids[i]) * d;
        for (int j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  return y;
}

// Gather rows of x[T,D] by index (MoE dispatch); backward scatter-adds.
template <class Real>
Tensor<Real> gather_rows(Tape<Real>& tape, Tensor<Real> x,
                         const std::vector<int>& idx) {
  if (x.rank() != 2)
    throw ShapeError("gather_rows: input must be [T,D], got " +
                     shape_str(x.shape()));
  const int t = x.dim(0);
  const int d = x.dim(1);
  for (int i : idx)
    if (i < 0 || i >= t)
      throw IndexError("gather_rows: index " + std::to_string(i) +
                       " out of range [0," + std::to_string(t) + ")");
  bool g = detail::want_grad(tape, x.requires_grad());
  Tensor<Real> y = Tensor<Real>::zeros({static_cast<int>(idx.size()), d}, g);
  const Real* px = x.data();
  Real* py = y.data();
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(px + static_cast<std::size_t>(idx[i]) * d,
              px + static_cast<std::size_t>(idx[i] + 1) * d, py + i * d);
  if (g)
    tape.record([x, y, idx, d]() mutable {
      const Real* dy = y.grad();
      Real* dx = x.grad();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const Real* src = dy + i * d;
        Real* dst = dx + static_cast<std::size_t>(idx[i]) * d;
        for (int j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  return y;
}

// Gather elements of a rank-1 tensor; backward scatter-adds.
template <class Real>
Tensor<Real> gather_elems(Tape<Real>& tape, Tensor<Real> x,
                          const std::vector<int>& idx) {
  if (x.rank() != 1)
    throw ShapeError("gather_elems: input must be rank 1, got " +
                     shape_str(x.shape()));
  const int n = x.dim(0);
  for (int i : idx)
    if (i < 0 || i >= n)
      throw IndexError("gather_elems: index " + std::to_string(i) +
                       " out of range [0," + std::to_string(n) + ")");
  bool g = detail::want_grad(tape, x.requires_grad());
  Tensor<Real> y = Tensor<Real>::zeros({static_cast<int>(idx.size())}, g);
  for (std::size_t i = 0; i < idx.size(); ++i)
    y.data()[i] = x.data()[idx[i]];
  if (g)
    tape.record([x, y, idx]() mutable {
      const Real* dy = y.grad();
      Real* dx = x.grad();
      for (std::size_t i = 0; i < idx.size(); ++i) dx[idx[i]] += dy[i];
    });
  return y;
}

// out[token_idx[i]] += weights[i] · rows[i]; tokens not indexed stay zero.
// Differentiable through both rows and weights.
template <class Real>
Tensor<Real> combine_rows(Tape<Real>& tape, Tensor<Real> rows,
                          const std::vector<int>& token_idx,
                          Tensor<Real> weights, int t_out) {
  if (rows.rank() != 2)
    throw ShapeError("combine_rows: rows must be [n,D], got " +
                     shape_str(rows.shape()));
  const int n = rows.dim(0);
  const int d = rows.dim(1);
  if (static_cast<int>(token_idx.size()) != n ||
      weights.rank() != 1 || weights.dim(0) != n)
    throw ShapeError("combine_rows: rows/indices/weights disagree (" +
                     std::to_string(n) + ", " +
                     std::to_string(token_idx.size()) + ", " +
                     shape_str(weights.shape()) + ")");
  for (int i : token_idx)
    if (i < 0 || i >= t_out)
      throw IndexError("combine_rows: token " + std::to_string(i) +
                       " out of range [0," + std::to_string(t_out) + ")");
  bool g = detail::want_grad(tape,
                             rows.requires_grad() || weights.requires_grad());
  Tensor<Real> y = Tensor<Real>::zeros({t_out, d}, g);
  const Real* pr = rows.data();
  const Real* pw = weights.data();
  Real* py = y.data();
  // First contribution assigns rather than adds so a lone weight-1.0 combine
  // reproduces the expert output bit-for-bit (degenerate-equivalence oracle).
  std::vector<char> written(static_cast<std::size_t>(t_out), 0);
  for (int i = 0; i < n; ++i) {
    const Real w = pw[i];
    const Real* src = pr + static_cast<std::size_t>(i) * d;
    Real* dst = py + static_cast<std::size_t>(token_idx[i]) * d;
    if (!written[token_idx[i]]) {
      for (int j = 0; j < d; ++j) dst[j] = w * src[j];
      written[token_idx[i]] = 1;
    } else {
      for (int j = 0; j < d; ++j) dst[j] += w * src[j];
    }
  }
  if (g)
    tape.record([rows, weights, y, token_idx, n, d]() mutable {
      const Real* dy = y.grad();
      const Real* pr = rows.data();
      const Real* pw = weights.data();
      for (int i = 0; i < n; ++i) {
        const Real* dyt = dy + static_cast<std::size_t>(token_idx[i]) * d;
        if (rows.requires_grad()) {
          Real* dr = rows.grad() + static_cast<std::size_t>(i) * d;
          for (int j = 0; j < d; ++j) dr[j] += pw[i] * dyt[j];
        }
        if (weights.requires_grad()) {
          const Real* src = pr + static_cast<std::size_t>(i) * d;
          Real acc = 0;
          for (int j = 0; j < d; ++j) acc += src[j] * dyt[j];
          weights.grad()[i] += acc;
        }
      }
    });
  return y;
}

// Sum of all elements -> scalar.
template <class Real>
Tensor<Real> sum(Tape<Real>& tape, Tensor<Real> x) {
  bool g = detail::want_grad(tape, x.requires_grad());
  Tensor<Real> y = Tensor<Real>::zeros(Shape{}, g);
  const Real* px = x.data();
  Real acc = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) acc += px[i];
  y.data()[0] = acc;
  if (g)
    tape.record([x, y]() mutable {
      const Real dl = y.grad()[0];
      Real* dx = x.grad();
      for (std::size_t i = 0; i < x.numel(); ++i) dx[i] += dl;
    });
  return y;
}

// y[b,h,q,k] = x[b,h,q,k] + bias[h,q,k] (shared across the batch axis).
template <class Real>
Tensor<Real> add_head_bias(Tape<Real>& tape, Tensor<Real> x,
                           Tensor<Real> bias) {
  if (x.rank() != 4 || bias.rank() != 3 || x.dim(1) != bias.dim(0) ||
      x.dim(2) != bias.dim(1) || x.dim(3) != bias.dim(2))
    throw ShapeError("add_head_bias: " + shape_str(x.shape()) + " vs " +
                     shape_str(bias.shape()));
  const std::size_t per_batch = bias.numel();
  const int batch = x.dim(0);
  bool g = detail::want_grad(tape, x.requires_grad() || bias.requires_grad());
  Tensor<Real> y = Tensor<Real>::zeros(x.shape(), g);
  const Real* px = x.data();
  const Real* pb = bias.data();
  Real* py = y.data();
  for (int b = 0; b < batch; ++b) {
    const Real* xr = px + static_cast<std::size_t>(b) * per_batch;
    Real* yr = py + static_cast<std::size_t>(b) * per_batch;
    for (std::size_t i = 0; i < per_batch; ++i) yr[i] = xr[i] + pb[i];
  }
  if (g)
    tape.record([x, bias, y, batch, per_batch]() mutable {
      const Real* dy = y.grad();
      for (int b = 0; b < batch; ++b) {
        const Real* dyr = dy + static_cast<std::size_t>(b) * per_batch;
        if (x.requires_grad()) {
          Real* dx = x.grad() + static_cast<std::size_t>(b) * per_batch;
          for (std::size_t i = 0; i < per_batch; ++i) dx[i] += dyr[i];
        }
        if (bias.requires_grad()) {
          Real* db = bias.grad();
          for (std::size_t i = 0; i < per_batch; ++i) db[i] += dyr[i];
        }
      }
    });
  return y;
}

// y[b,s,:] = x[b,s,:] + table[s,:]; the first S rows of the position table
// are broadcast across the batch axis.
template <class Real>
Tensor<Real> add_position_rows(Tape<Real>& tape, Tensor<Real> x,
                               Tensor<Real> table) {
  if (x.rank() != 3 || table.rank() != 2 || x.dim(1) > table.dim(0) ||
      x.dim(2) != table.dim(1))
    throw ShapeError("add_position_rows: " + shape_str(x.shape()) + " vs " +
                     shape_str(table.shape()));
  const int batch = x.dim(0), s = x.dim(1), d = x.dim(2);
  const std::size_t per_batch = static_cast<std::size_t>(s) * d;
  bool g = detail::want_grad(tape, x.requires_grad() || table.requires_grad());
  Tensor<Real> y = Tensor<Real>::zeros(x.shape(), g);
  const Real* px = x.data();
  const Real* pt = table.data();
  Real* py = y.data();
  for (int b = 0; b < batch; ++b) {
    const Real* xr = px + static_cast<std::size_t>(b) * per_batch;
    Real* yr = py + static_cast<std::size_t>(b) * per_batch;
    for (std::size_t i = 0; i < per_batch; ++i) yr[i] = xr[i] + pt[i];
  }
  if (g)
    tape.record([x, table, y, batch, per_batch]() mutable {
      const Real* dy = y.grad();
      for (int b = 0; b < batch; ++b) {
        const Real* dyr = dy + static_cast<std::size_t>(b) * per_batch;
        if (x.requires_grad()) {
          Real* dx = x.grad() + static_cast<std::size_t>(b) * per_batch;
          for (std::size_t i = 0; i < per_batch; ++i) dx[i] += dyr[i];
        }
        if (table.requires_grad()) {
          Real* dt = table.grad();
          for (std::size_t i = 0; i < per_batch; ++i) dt[i] += dyr[i];
        }
      }
    });
  return y;
}

// y[b,h,q,k] = x[b,h,q,k] + mask[b,q,k]; the mask is constant data
// (0 for allowed positions, a large negative number for disallowed).
template <class Real>
Tensor<Real> add_attention_mask(Tape<Real>& tape, Tensor<Real> x,
                                const Tensor<Real>& mask) {
  if (x.rank() != 4 || mask.rank() != 3 || x.dim(0) != mask.dim(0) ||
      x.dim(2) != mask.dim(1) || x.dim(3) != mask.dim(2))
    throw ShapeError("add_attention_mask: " + shape_str(x.shape()) + " vs " +
                     shape_str(mask.shape()));
  const int batch = x.dim(0), h = x.dim(1), q = x.dim(2), k = x.dim(3);
  bool g = detail::want_grad(tape, x.requires_grad());
  Tensor<Real> y = Tensor<Real>::zeros(x.shape(), g);
  const Real* px = x.data();
  const Real* pm = mask.data();
  Real* py = y.data();
  const std::size_t qk = static_cast<std::size_t>(q) * k;
  for (int b = 0; b < batch; ++b) {
    const Real* mr = pm + static_cast<std::size_t>(b) * qk;
    for (int hh = 0; hh < h; ++hh) {
      const std::size_t off = (static_cast<std::size_t>(b) * h + hh) * qk;
      for (std::size_t i = 0; i < qk; ++i) py[off + i] = px[off + i] + mr[i];
    }
  }
  if (g)
    tape.record([x, y]() mutable {
      const Real* dy = y.grad();
      Real* dx = x.grad();
      for (std::size_t i = 0; i < y.numel(); ++i) dx[i] += dy[i];
    });
  return y;
}

// T5-style relative position bucket (bidirectional: sign of the offset is
// distinguished; log-spaced buckets beyond max_exact up to max_distance).
inline int relative_position_bucket(int relative_position, int num_buckets,
                                    int max_distance) {
  int nb = num_buckets / 2;
  int ret = relative_position > 0 ? nb : 0;
  int n = std::abs(relative_position);
  const int max_exact = nb / 2;
  if (n < max_exact) return ret + n;
  const double val =
      max_exact + std::log(static_cast<double>(n) / max_exact) /
                      std::log(static_cast<double>(max_distance) / max_exact) *
                      (nb - max_exact);
  return ret + std::min(static_cast<int>(val), nb - 1);
}

// bias[h,q,k] = table[bucket(k-q), h]; backward scatter-adds into the table.
template <class Real>
Tensor<Real> relative_bias(Tape<Real>& tape, Tensor<Real> table, int s,
                           int max_distance) {
  if (table.rank() != 2)
    throw ShapeError("relative_bias: table must be [buckets,H], got " +
                     shape_str(table.shape()));
  const int nb = table.dim(0);
  const int h = table.dim(1);
  std::vector<int> bucket(static_cast<std::size_t>(s) * s);
  for (int q = 0; q < s; ++q)
    for (int k = 0; k < s; ++k)
      bucket[static_cast<std::size_t>(q) * s + k] =
          relative_position_bucket(k - q, nb, max_distance);
  bool g = detail::want_grad(tape, table.requires_grad());
  Tensor<Real> y = Tensor<Real>::zeros({h, s, s}, g);
  const Real* pt = table.data();
  Real* py = y.data();
  for (int hh = 0; hh < h; ++hh)
    for (std::size_t i = 0; i < bucket.size(); ++i)
      py[static_cast<std::size_t>(hh) * bucket.size() + i] =
          pt[static_cast<std::size_t>(bucket[i]) * h + hh];
  if (g)
    tape.record([table, y, h, bucket = std::move(bucket)]() mutable {
      const Real* dy = y.grad();
      Real* dt = table.grad();
      for (int hh = 0; hh < h; ++hh)
        for (std::size_t i = 0; i < bucket.size(); ++i)
          dt[static_cast<std::size_t>(bucket[i]) * h + hh] +=
              dy[static_cast<std::size_t>(hh) * bucket.size() + i];
    });
  return y;
}

}  // namespace moelab
