#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "pmmrec/tape.hpp"
#include "pmmrec/tensor.hpp"

// Differentiable primitives. Each function computes its forward value and
// registers the analytic gradient rule on the operands' tape.

namespace pmmrec {

using Mask = std::vector<std::uint8_t>;

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

[[noreturn]] inline void shape_fail(const Tape& tape, std::string_view op,
                                    const std::string& what) {
  throw ShapeError(std::string(op) + " (node " + std::to_string(tape.size()) +
                   "): " + what);
}

inline void require_same_shape(const Var& a, const Var& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    shape_fail(a.tape(), op,
               "operand shapes " + shape_string(a.shape()) + " and " +
                   shape_string(b.shape()) + " differ");
  }
}

/// C (+)= op(A) * op(B) on raw row-major buffers.
inline void gemm(const double* a, std::size_t a_rows, std::size_t a_cols, bool trans_a,
                 const double* b, std::size_t b_rows, std::size_t b_cols, bool trans_b,
                 double* c, bool accumulate) {
  ConstMapMat A(a, static_cast<Eigen::Index>(a_rows), static_cast<Eigen::Index>(a_cols));
  ConstMapMat B(b, static_cast<Eigen::Index>(b_rows), static_cast<Eigen::Index>(b_cols));
  const auto m = static_cast<Eigen::Index>(trans_a ? a_cols : a_rows);
  const auto n = static_cast<Eigen::Index>(trans_b ? b_rows : b_cols);
  MapMat C(c, m, n);
  if (!accumulate) C.setZero();
  if (!trans_a && !trans_b) C.noalias() += A * B;
  else if (!trans_a && trans_b) C.noalias() += A * B.transpose();
  else if (trans_a && !trans_b) C.noalias() += A.transpose() * B;
  else C.noalias() += A.transpose() * B.transpose();
}

inline void add_into(Tensor& dst, const Tensor& src) {
  auto d = dst.values();
  auto s = src.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

template <typename F>
Var unary(Var x, std::string_view op, F&& f, double (*df)(double x, double y)) {
  Tensor out(x.shape());
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  const std::size_t xid = x.id();
  Tape& tape = x.tape();
  const std::size_t out_id = tape.size();
  return tape.record(op, std::move(out), {x},
                     [xid, out_id, df](Tape& t, const Tensor& g) {
                       const Tensor& xv = t.value(xid);
                       const Tensor& yv = t.value(out_id);
                       Tensor& gx = t.grad_buffer(xid);
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         gx[i] += g[i] * df(xv[i], yv[i]);
                       }
                     });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// x[..., k] · w[k, n] (or w[n, k]ᵀ when `transpose_w`) → [..., n].
inline Var matmul(Var x, Var w, bool transpose_w = false) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (wv.rank() != 2 || xv.rank() < 1) {
    detail::shape_fail(x.tape(), "matmul",
                       "expected [...,k] x [k,n], got " + shape_string(xv.shape()) +
                           " and " + shape_string(wv.shape()));
  }
  const std::size_t k = xv.cols();
  const std::size_t w_in = transpose_w ? wv.dim(1) : wv.dim(0);
  const std::size_t n = transpose_w ? wv.dim(0) : wv.dim(1);
  if (k != w_in) {
    detail::shape_fail(x.tape(), "matmul",
                       "inner extents differ: " + shape_string(xv.shape()) + " vs " +
                           shape_string(wv.shape()) +
                           (transpose_w ? " (transposed)" : ""));
  }
  const std::size_t m = xv.rows();
  Shape out_shape = xv.shape();
  out_shape.back() = n;
  Tensor out(out_shape);
  detail::gemm(xv.data(), m, k, false, wv.data(), wv.dim(0), wv.dim(1), transpose_w,
               out.data(), false);
  const std::size_t xid = x.id(), wid = w.id();
  Tape& tape = x.tape();
  return tape.record("matmul", std::move(out), {x, w},
                     [xid, wid, m, k, n, transpose_w](Tape& t, const Tensor& g) {
                       const Tensor& xv = t.value(xid);
                       const Tensor& wv = t.value(wid);
                       if (t.needs_grad(xid)) {
                         // dX = G · Wᵀ  (or G · W when W was transposed)
                         Tensor& gx = t.grad_buffer(xid);
                         detail::gemm(g.data(), m, n, false, wv.data(), wv.dim(0),
                                      wv.dim(1), !transpose_w, gx.data(), true);
                       }
                       if (t.needs_grad(wid)) {
                         Tensor& gw = t.grad_buffer(wid);
                         if (!transpose_w) {
                           detail::gemm(xv.data(), m, k, true, g.data(), m, n, false,
                                        gw.data(), true);
                         } else {
                           detail::gemm(g.data(), m, n, true, xv.data(), m, k, false,
                                        gw.data(), true);
                         }
                       }
                     });
}

/// Batched product: a[G, m, k] · b[G, k, n] (or b[G, n, k]ᵀ) → [G, m, n].
inline Var bmm(Var a, Var b, bool transpose_b = false) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0)) {
    detail::shape_fail(a.tape(), "bmm",
                       "expected [G,m,k] x [G,k,n], got " + shape_string(av.shape()) +
                           " and " + shape_string(bv.shape()));
  }
  const std::size_t groups = av.dim(0), m = av.dim(1), k = av.dim(2);
  const std::size_t bk = transpose_b ? bv.dim(2) : bv.dim(1);
  const std::size_t n = transpose_b ? bv.dim(1) : bv.dim(2);
  if (bk != k) {
    detail::shape_fail(a.tape(), "bmm",
                       "inner extents differ: " + shape_string(av.shape()) + " vs " +
                           shape_string(bv.shape()));
  }
  const std::size_t b_rows = bv.dim(1), b_cols = bv.dim(2);
  Tensor out(Shape{groups, m, n});
  for (std::size_t g = 0; g < groups; ++g) {
    detail::gemm(av.data() + g * m * k, m, k, false, bv.data() + g * b_rows * b_cols,
                 b_rows, b_cols, transpose_b, out.data() + g * m * n, false);
  }
  const std::size_t aid = a.id(), bid = b.id();
  Tape& tape = a.tape();
  return tape.record(
      "bmm", std::move(out), {a, b},
      [=](Tape& t, const Tensor& gout) {
        const Tensor& av = t.value(aid);
        const Tensor& bv = t.value(bid);
        const bool need_a = t.needs_grad(aid), need_b = t.needs_grad(bid);
        Tensor* ga = need_a ? &t.grad_buffer(aid) : nullptr;
        Tensor* gb = need_b ? &t.grad_buffer(bid) : nullptr;
        for (std::size_t g = 0; g < groups; ++g) {
          const double* G = gout.data() + g * m * n;
          const double* A = av.data() + g * m * k;
          const double* B = bv.data() + g * b_rows * b_cols;
          if (ga) {
            detail::gemm(G, m, n, false, B, b_rows, b_cols, !transpose_b,
                         ga->data() + g * m * k, true);
          }
          if (gb) {
            if (!transpose_b) {
              detail::gemm(A, m, k, true, G, m, n, false, gb->data() + g * b_rows * b_cols,
                           true);
            } else {
              detail::gemm(G, m, n, true, A, m, k, false, gb->data() + g * b_rows * b_cols,
                           true);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Var a, Var b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = a.value();
  detail::add_into(out, b.value());
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape().record("add", std::move(out), {a, b},
                         [aid, bid](Tape& t, const Tensor& g) {
                           if (t.needs_grad(aid)) detail::add_into(t.grad_buffer(aid), g);
                           if (t.needs_grad(bid)) detail::add_into(t.grad_buffer(bid), g);
                         });
}

inline Var sub(Var a, Var b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape().record("sub", std::move(out), {a, b},
                         [aid, bid](Tape& t, const Tensor& g) {
                           if (t.needs_grad(aid)) detail::add_into(t.grad_buffer(aid), g);
                           if (t.needs_grad(bid)) {
                             Tensor& gb = t.grad_buffer(bid);
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                           }
                         });
}

inline Var mul(Var a, Var b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape().record("mul", std::move(out), {a, b},
                         [aid, bid](Tape& t, const Tensor& g) {
                           const Tensor& av = t.value(aid);
                           const Tensor& bv = t.value(bid);
                           if (t.needs_grad(aid)) {
                             Tensor& ga = t.grad_buffer(aid);
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                           }
                           if (t.needs_grad(bid)) {
                             Tensor& gb = t.grad_buffer(bid);
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                           }
                         });
}

inline Var scale(Var x, double c) {
  Tensor out = x.value();
  for (double& v : out.values()) v *= c;
  const std::size_t xid = x.id();
  return x.tape().record("scale", std::move(out), {x}, [xid, c](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
  });
}

/// x[..., n] + bias[n], broadcast over leading axes.
inline Var add_bias(Var x, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.rank() != 1 || bv.size() != xv.cols()) {
    detail::shape_fail(x.tape(), "add_bias",
                       "bias " + shape_string(bv.shape()) + " does not match last axis of " +
                           shape_string(xv.shape()));
  }
  Tensor out = xv;
  const std::size_t n = xv.cols(), rows = xv.rows();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bv[c];
  const std::size_t xid = x.id(), bid = bias.id();
  return x.tape().record("add_bias", std::move(out), {x, bias},
                         [xid, bid, rows, n](Tape& t, const Tensor& g) {
                           if (t.needs_grad(xid)) detail::add_into(t.grad_buffer(xid), g);
                           if (t.needs_grad(bid)) {
                             Tensor& gb = t.grad_buffer(bid);
                             for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
                           }
                         });
}

inline Var relu(Var x) {
  return detail::unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

namespace detail {
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;
}  // namespace detail

/// GELU, tanh approximation.
inline Var gelu(Var x) {
  return detail::unary(
      x, "gelu",
      [](double v) {
        return 0.5 * v * (1.0 + std::tanh(detail::kGeluC * (v + detail::kGeluA * v * v * v)));
      },
      [](double v, double) {
        const double u = detail::kGeluC * (v + detail::kGeluA * v * v * v);
        const double th = std::tanh(u);
        const double du = detail::kGeluC * (1.0 + 3.0 * detail::kGeluA * v * v);
        return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
      });
}

inline Var exp(Var x) {
  return detail::unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Var log(Var x) {
  for (double v : x.value().values()) {
    if (!(v > 0.0)) throw std::domain_error("log: argument must be positive");
  }
  return detail::unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

/// Multiplies by a fixed 0/1 mask (no gradient through masked entries).
inline Var apply_mask(Var x, const Mask& mask) {
  if (mask.size() != x.value().size()) {
    detail::shape_fail(x.tape(), "apply_mask",
                       "mask size " + std::to_string(mask.size()) + " vs tensor " +
                           shape_string(x.shape()));
  }
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!mask[i]) out[i] = 0.0;
  const std::size_t xid = x.id();
  return x.tape().record("apply_mask", std::move(out), {x},
                         [xid, mask](Tape& t, const Tensor& g) {
                           Tensor& gx = t.grad_buffer(xid);
                           for (std::size_t i = 0; i < g.size(); ++i)
                             if (mask[i]) gx[i] += g[i];
                         });
}

/// Inverted dropout with keep-probability 1 - rate.
inline Var dropout(Var x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw std::invalid_argument("dropout rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  const double s = 1.0 / (1.0 - rate);
  std::vector<double> factor(x.value().size());
  for (double& f : factor) f = keep(rng) ? s : 0.0;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= factor[i];
  const std::size_t xid = x.id();
  return x.tape().record("dropout", std::move(out), {x},
                         [xid, factor = std::move(factor)](Tape& t, const Tensor& g) {
                           Tensor& gx = t.grad_buffer(xid);
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor[i];
                         });
}

// ---------------------------------------------------------------------------
// Normalizations

/// Softmax over the last axis. Entries with mask 0 get probability exactly 0;
/// a fully masked row yields zeros.
inline Var softmax(Var x, const Mask* mask = nullptr) {
  const Tensor& xv = x.value();
  if (mask && mask->size() != xv.size()) {
    detail::shape_fail(x.tape(), "softmax", "mask size does not match " +
                                                shape_string(xv.shape()));
  }
  const std::size_t n = xv.cols(), rows = xv.rows();
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * n;
    double* o = out.data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c)
      if (!mask || (*mask)[r * n + c]) mx = std::max(mx, in[c]);
    if (mx == -std::numeric_limits<double>::infinity()) continue;
    double total = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      if (!mask || (*mask)[r * n + c]) {
        o[c] = std::exp(in[c] - mx);
        total += o[c];
      }
    }
    for (std::size_t c = 0; c < n; ++c) o[c] /= total;
  }
  const std::size_t xid = x.id();
  Tape& tape = x.tape();
  const std::size_t out_id = tape.size();
  return tape.record("softmax", std::move(out), {x},
                     [xid, out_id, n, rows](Tape& t, const Tensor& g) {
                       const Tensor& y = t.value(out_id);
                       Tensor& gx = t.grad_buffer(xid);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* yr = y.data() + r * n;
                         const double* gr = g.data() + r * n;
                         double dot = 0.0;
                         for (std::size_t c = 0; c < n; ++c) dot += yr[c] * gr[c];
                         double* out = gx.data() + r * n;
                         for (std::size_t c = 0; c < n; ++c) out[c] += yr[c] * (gr[c] - dot);
                       }
                     });
}

/// Row-wise log Σ exp over the entries selected by `mask`: [rows, n] → [rows].
/// Unselected entries receive exactly zero gradient. Every row must select at
/// least one entry.
inline Var masked_logsumexp(Var x, const Mask& mask) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || mask.size() != xv.size()) {
    detail::shape_fail(x.tape(), "masked_logsumexp",
                       "expected 2-D input with matching mask, got " +
                           shape_string(xv.shape()));
  }
  const std::size_t rows = xv.dim(0), n = xv.dim(1);
  Tensor out(Shape{rows});
  std::vector<double> probs(xv.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c)
      if (mask[r * n + c]) mx = std::max(mx, xv[r * n + c]);
    if (mx == -std::numeric_limits<double>::infinity()) {
      detail::shape_fail(x.tape(), "masked_logsumexp",
                         "row " + std::to_string(r) + " selects no entries");
    }
    double total = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      if (mask[r * n + c]) {
        probs[r * n + c] = std::exp(xv[r * n + c] - mx);
        total += probs[r * n + c];
      }
    }
    out[r] = mx + std::log(total);
    for (std::size_t c = 0; c < n; ++c) probs[r * n + c] /= total;
  }
  const std::size_t xid = x.id();
  return x.tape().record("masked_logsumexp", std::move(out), {x},
                         [xid, rows, n, probs = std::move(probs)](Tape& t, const Tensor& g) {
                           Tensor& gx = t.grad_buffer(xid);
                           for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t c = 0; c < n; ++c)
                               gx[r * n + c] += g[r] * probs[r * n + c];
                         });
}

/// Layer normalization over the last axis with learned gain and bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.cols(), rows = xv.rows();
  if (gain.value().rank() != 1 || gain.value().size() != n || bias.value().shape() != gain.value().shape()) {
    detail::shape_fail(x.tape(), "layer_norm",
                       "gain/bias " + shape_string(gain.shape()) + " do not match " +
                           shape_string(xv.shape()));
  }
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  Tensor out(xv.shape());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * n;
    double mean = 0.0;
    for (std::size_t c = 0; c < n; ++c) mean += in[c];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (in[c] - mean) * (in[c] - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      const double h = (in[c] - mean) * is;
      xhat[r * n + c] = h;
      out[r * n + c] = h * gv[c] + bv[c];
    }
  }
  const std::size_t xid = x.id(), gid = gain.id(), bid = bias.id();
  return x.tape().record(
      "layer_norm", std::move(out), {x, gain, bias},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, const Tensor& g) {
        const Tensor& gv = t.value(gid);
        if (t.needs_grad(gid)) {
          Tensor& gg = t.grad_buffer(gid);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < n; ++c) gg[c] += g[r * n + c] * xhat[r * n + c];
        }
        if (t.needs_grad(bid)) {
          Tensor& gb = t.grad_buffer(bid);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
        }
        if (t.needs_grad(xid)) {
          Tensor& gx = t.grad_buffer(xid);
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_g = 0.0, mean_gx = 0.0;
            for (std::size_t c = 0; c < n; ++c) {
              const double gh = g[r * n + c] * gv[c];
              mean_g += gh;
              mean_gx += gh * xhat[r * n + c];
            }
            mean_g *= inv_n;
            mean_gx *= inv_n;
            for (std::size_t c = 0; c < n; ++c) {
              const double gh = g[r * n + c] * gv[c];
              gx[r * n + c] += inv_std[r] * (gh - mean_g - xhat[r * n + c] * mean_gx);
            }
          }
        }
      });
}

/// Row-wise v / max(‖v‖₂, eps) over the last axis.
inline Var l2_normalize(Var x, double eps = 1e-12) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.cols(), rows = xv.rows();
  Tensor out(xv.shape());
  std::vector<double> denom(rows);
  std::vector<std::uint8_t> clamped(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < n; ++c) ss += xv[r * n + c] * xv[r * n + c];
    const double norm = std::sqrt(ss);
    clamped[r] = norm < eps;
    denom[r] = std::max(norm, eps);
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = xv[r * n + c] / denom[r];
  }
  const std::size_t xid = x.id();
  Tape& tape = x.tape();
  const std::size_t out_id = tape.size();
  return tape.record(
      "l2_normalize", std::move(out), {x},
      [=, denom = std::move(denom), clamped = std::move(clamped)](Tape& t, const Tensor& g) {
        const Tensor& y = t.value(out_id);
        Tensor& gx = t.grad_buffer(xid);
        for (std::size_t r = 0; r < rows; ++r) {
          if (clamped[r]) {
            for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += g[r * n + c] / denom[r];
            continue;
          }
          double dot = 0.0;
          for (std::size_t c = 0; c < n; ++c) dot += y[r * n + c] * g[r * n + c];
          for (std::size_t c = 0; c < n; ++c)
            gx[r * n + c] += (g[r * n + c] - y[r * n + c] * dot) / denom[r];
        }
      });
}

// ---------------------------------------------------------------------------
// Indexing and layout

/// Selects rows of a [rows, n] tensor (leading axes flattened): → [k, n].
/// Repeated indices accumulate gradient.
inline Var gather_rows(Var x, std::vector<std::size_t> indices) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.cols(), rows = xv.rows();
  Tensor out(Shape{indices.size(), n});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) {
      detail::shape_fail(x.tape(), "gather_rows",
                         "index " + std::to_string(indices[i]) + " out of range for " +
                             std::to_string(rows) + " rows");
    }
    std::copy_n(xv.data() + indices[i] * n, n, out.data() + i * n);
  }
  const std::size_t xid = x.id();
  return x.tape().record("gather_rows", std::move(out), {x},
                         [xid, n, indices = std::move(indices)](Tape& t, const Tensor& g) {
                           Tensor& gx = t.grad_buffer(xid);
                           for (std::size_t i = 0; i < indices.size(); ++i) {
                             double* dst = gx.data() + indices[i] * n;
                             const double* src = g.data() + i * n;
                             for (std::size_t c = 0; c < n; ++c) dst[c] += src[c];
                           }
                         });
}

/// Embedding lookup: rows of `table` selected by `ids`.
inline Var embedding(Var table, const std::vector<std::size_t>& ids) {
  return gather_rows(table, ids);
}

/// Stacks tensors with equal last extent along the (flattened) row axis.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no operands");
  const std::size_t n = parts.front().value().cols();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.value().cols() != n) {
      detail::shape_fail(parts.front().tape(), "concat_rows",
                         "last extents differ: " + shape_string(parts.front().shape()) +
                             " vs " + shape_string(p.shape()));
    }
    total += p.value().rows();
  }
  Tensor out(Shape{total, n});
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // (id, offset)
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().values().begin(), p.value().values().end(), out.data() + off);
    spans.emplace_back(p.id(), off);
    off += p.value().size();
  }
  return parts.front().tape().record_n(
      "concat_rows", std::move(out), parts, [spans](Tape& t, const Tensor& g) {
        for (const auto& [id, offset] : spans) {
          if (!t.needs_grad(id)) continue;
          Tensor& gp = t.grad_buffer(id);
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offset + i];
        }
      });
}

inline Var reshape(Var x, Shape shape) {
  if (shape_numel(shape) != x.value().size()) {
    detail::shape_fail(x.tape(), "reshape",
                       "cannot reshape " + shape_string(x.shape()) + " to " +
                           shape_string(shape));
  }
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t xid = x.id();
  return x.tape().record("reshape", std::move(out), {x}, [xid](Tape& t, const Tensor& g) {
    detail::add_into(t.grad_buffer(xid), g);
  });
}

/// Axis permutation of a rank-4 tensor: out.dim(i) = x.dim(perm[i]).
inline Var permute4(Var x, std::array<std::size_t, 4> perm) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) {
    detail::shape_fail(x.tape(), "permute4", "expected rank 4, got " + shape_string(xv.shape()));
  }
  const Shape& in = xv.shape();
  const std::array<std::size_t, 4> in_stride{in[1] * in[2] * in[3], in[2] * in[3], in[3], 1};
  Shape out_shape{in[perm[0]], in[perm[1]], in[perm[2]], in[perm[3]]};
  std::vector<std::size_t> src(xv.size());
  std::size_t o = 0;
  for (std::size_t a = 0; a < out_shape[0]; ++a)
    for (std::size_t b = 0; b < out_shape[1]; ++b)
      for (std::size_t c = 0; c < out_shape[2]; ++c)
        for (std::size_t d = 0; d < out_shape[3]; ++d)
          src[o++] = a * in_stride[perm[0]] + b * in_stride[perm[1]] + c * in_stride[perm[2]] +
                     d * in_stride[perm[3]];
  Tensor out(out_shape);
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = xv[src[i]];
  const std::size_t xid = x.id();
  return x.tape().record("permute4", std::move(out), {x},
                         [xid, src = std::move(src)](Tape& t, const Tensor& g) {
                           Tensor& gx = t.grad_buffer(xid);
                           for (std::size_t i = 0; i < src.size(); ++i) gx[src[i]] += g[i];
                         });
}

/// x[r, cols[r]] for every row of a 2-D tensor → [rows].
inline Var pick(Var x, std::vector<std::size_t> cols) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || cols.size() != xv.dim(0)) {
    detail::shape_fail(x.tape(), "pick", "expected one column per row of " +
                                             shape_string(xv.shape()));
  }
  const std::size_t n = xv.dim(1);
  Tensor out(Shape{cols.size()});
  for (std::size_t r = 0; r < cols.size(); ++r) {
    if (cols[r] >= n) detail::shape_fail(x.tape(), "pick", "column out of range");
    out[r] = xv[r * n + cols[r]];
  }
  const std::size_t xid = x.id();
  return x.tape().record("pick", std::move(out), {x},
                         [xid, n, cols = std::move(cols)](Tape& t, const Tensor& g) {
                           Tensor& gx = t.grad_buffer(xid);
                           for (std::size_t r = 0; r < cols.size(); ++r) gx[r * n + cols[r]] += g[r];
                         });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  const std::size_t xid = x.id();
  return x.tape().record("sum", Tensor::scalar(s), {x}, [xid](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(xid);
    for (double& v : gx.values()) v += g[0];
  });
}

inline Var mean(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) detail::shape_fail(x.tape(), "mean", "empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

/// Σ wᵢ xᵢ with constant weights; zero-weight entries get exactly zero gradient.
inline Var weighted_sum(Var x, std::vector<double> weights) {
  const Tensor& xv = x.value();
  if (weights.size() != xv.size()) {
    detail::shape_fail(x.tape(), "weighted_sum",
                       std::to_string(weights.size()) + " weights for " +
                           shape_string(xv.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i)
    if (weights[i] != 0.0) s += weights[i] * xv[i];
  const std::size_t xid = x.id();
  return x.tape().record("weighted_sum", Tensor::scalar(s), {x},
                         [xid, weights = std::move(weights)](Tape& t, const Tensor& g) {
                           Tensor& gx = t.grad_buffer(xid);
                           for (std::size_t i = 0; i < weights.size(); ++i) gx[i] += g[0] * weights[i];
                         });
}

}  // namespace pmmrec
