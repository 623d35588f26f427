#pragma once
// Differentiable kernels. Every op returns a fresh tensor and, when an input
// needs a gradient, records a closure that accumulates into its parents.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "corma/numkit/tensor.hpp"

namespace corma::nk {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using MapCM = Eigen::Map<const RowMat>;

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw InvalidArgument(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                            " do not broadcast");
    out[i] = std::max(da, db);
  }
  return out;
}

/// Strides of `in` seen through the broadcast output shape (0 on expanded dims).
inline std::vector<std::size_t> bcast_strides(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> s(r, 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t d = in.size() - 1 - k;
    const std::size_t o = r - 1 - k;
    s[o] = in[d] == 1 ? 0 : stride;
    stride *= in[d];
  }
  return s;
}

/// Calls f(out_index, a_index, b_index) over the broadcast output.
template <typename F>
void for_each_bcast(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t n = numel(out);
  if (n == 0) return;
  const std::size_t r = out.size();
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  const std::size_t inner = out[r - 1], ia_step = sa[r - 1], ib_step = sb[r - 1];
  for (std::size_t o = 0; o < n; o += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(o + j, ia + j * ia_step, ib + j * ib_step);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

inline void require_shape(bool ok, const char* op, const Shape& a, const Shape& b) {
  if (!ok) throw InvalidArgument(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

}  // namespace detail

// ------------------------------------------------------------ elementwise

enum class BinOp { Add, Sub, Mul };

inline Tensor binary(const Tensor& a, const Tensor& b, BinOp kind) {
  const char* name = kind == BinOp::Add ? "add" : kind == BinOp::Sub ? "sub" : "mul";
  const Shape out = detail::broadcast_shape(a.shape(), b.shape(), name);
  const auto sa = detail::bcast_strides(a.shape(), out), sb = detail::bcast_strides(b.shape(), out);
  std::vector<double> y(numel(out));
  const double* A = a.data().data();
  const double* B = b.data().data();
  // b repeated over the leading dims of a (bias adds): plain nested loops
  const bool trailing = out == a.shape() && b.size() > 0 && b.rank() <= a.rank() &&
                        std::equal(b.shape().begin(), b.shape().end(), a.shape().end() - static_cast<std::ptrdiff_t>(b.rank()));
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < y.size(); ++i)
      y[i] = kind == BinOp::Add ? A[i] + B[i] : kind == BinOp::Sub ? A[i] - B[i] : A[i] * B[i];
  } else if (trailing) {
    const std::size_t w = b.size();
    for (std::size_t o = 0; o < y.size(); o += w)
      for (std::size_t j = 0; j < w; ++j)
        y[o + j] = kind == BinOp::Add ? A[o + j] + B[j] : kind == BinOp::Sub ? A[o + j] - B[j] : A[o + j] * B[j];
  } else {
    detail::for_each_bcast(out, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
      y[o] = kind == BinOp::Add ? A[i] + B[j] : kind == BinOp::Sub ? A[i] - B[j] : A[i] * B[j];
    });
  }
  return make_result(out, std::move(y), {a, b}, name, [a, b, out, sa, sb, kind, trailing](TensorImpl& self) {
    TensorImpl* pa = a.impl();
    TensorImpl* pb = b.impl();
    const double* G = self.grad.data();
    double* GA = pa->requires_grad ? pa->grad.data() : nullptr;
    double* GB = pb->requires_grad ? pb->grad.data() : nullptr;
    const double* A = pa->data.data();
    const double* B = pb->data.data();
    if (trailing && kind != BinOp::Mul && GA != GB) {
      const double sgn = kind == BinOp::Add ? 1.0 : -1.0;
      const std::size_t w = pb->data.size(), n = self.grad.size();
      if (GA)
        for (std::size_t i = 0; i < n; ++i) GA[i] += G[i];
      if (GB)
        for (std::size_t o = 0; o < n; o += w)
          for (std::size_t j = 0; j < w; ++j) GB[j] += sgn * G[o + j];
      return;
    }
    detail::for_each_bcast(out, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
      const double g = G[o];
      switch (kind) {
        case BinOp::Add:
          if (GA) GA[i] += g;
          if (GB) GB[j] += g;
          break;
        case BinOp::Sub:
          if (GA) GA[i] += g;
          if (GB) GB[j] -= g;
          break;
        case BinOp::Mul:
          if (GA) GA[i] += g * B[j];
          if (GB) GB[j] += g * A[i];
          break;
      }
    });
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Add); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Sub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Mul); }

/// y = s * x + c
inline Tensor affine_scalar(const Tensor& x, double s, double c = 0.0) {
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = s * x[i] + c;
  return make_result(x.shape(), std::move(y), {x}, "scale", [x, s](TensorImpl& self) {
    auto& gx = x.impl()->grad;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += s * self.grad[i];
  });
}
inline Tensor scale(const Tensor& x, double s) { return affine_scalar(x, s, 0.0); }

inline Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  const Shape out = detail::broadcast_shape(a.shape(), shape, "broadcast_to");
  detail::require_shape(out == shape, "broadcast_to", a.shape(), shape);
  const auto sa = detail::bcast_strides(a.shape(), out);
  const std::vector<std::size_t> sz(out.size(), 0);
  std::vector<double> y(numel(out));
  detail::for_each_bcast(out, sa, sz, [&](std::size_t o, std::size_t i, std::size_t) { y[o] = a[i]; });
  return make_result(out, std::move(y), {a}, "broadcast_to", [a, out, sa, sz](TensorImpl& self) {
    auto& ga = a.impl()->grad;
    detail::for_each_bcast(out, sa, sz, [&](std::size_t o, std::size_t i, std::size_t) { ga[i] += self.grad[o]; });
  });
}

// ----------------------------------------------------------------- matmul

/// x[..., K] times w[K, M] -> [..., M]
inline Tensor matmul(const Tensor& x, const Tensor& w) {
  if (x.rank() < 1 || w.rank() != 2 || x.shape().back() != w.dim(0))
    throw InvalidArgument("matmul: incompatible shapes " + shape_str(x.shape()) + " and " + shape_str(w.shape()));
  const std::size_t K = w.dim(0), M = w.dim(1), N = x.size() / K;
  Shape out = x.shape();
  out.back() = M;
  std::vector<double> y(N * M);
  MapM(y.data(), N, M).noalias() = MapCM(x.data().data(), N, K) * MapCM(w.data().data(), K, M);
  return make_result(out, std::move(y), {x, w}, "matmul", [x, w, N, K, M](TensorImpl& self) {
    MapCM G(self.grad.data(), N, M);
    if (x.requires_grad()) MapM(x.impl()->grad.data(), N, K).noalias() += G * MapCM(w.data().data(), K, M).transpose();
    if (w.requires_grad()) MapM(w.impl()->grad.data(), K, M).noalias() += MapCM(x.data().data(), N, K).transpose() * G;
  });
}

/// Batched product: a[Bt, m, k] x b[Bt, k, n] (or b[Bt, n, k] with trans_b).
inline Tensor bmm(const Tensor& a, const Tensor& b, bool trans_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != (trans_b ? b.dim(2) : b.dim(1)))
    throw InvalidArgument("bmm: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                          (trans_b ? " (b transposed)" : ""));
  const std::size_t Bt = a.dim(0), m = a.dim(1), k = a.dim(2), n = trans_b ? b.dim(1) : b.dim(2);
  std::vector<double> y(Bt * m * n);
  for (std::size_t i = 0; i < Bt; ++i) {
    MapCM A(a.data().data() + i * m * k, m, k);
    MapM Y(y.data() + i * m * n, m, n);
    if (trans_b) Y.noalias() = A * MapCM(b.data().data() + i * n * k, n, k).transpose();
    else Y.noalias() = A * MapCM(b.data().data() + i * k * n, k, n);
  }
  return make_result({Bt, m, n}, std::move(y), {a, b}, "bmm", [a, b, Bt, m, k, n, trans_b](TensorImpl& self) {
    for (std::size_t i = 0; i < Bt; ++i) {
      MapCM G(self.grad.data() + i * m * n, m, n);
      MapCM A(a.data().data() + i * m * k, m, k);
      if (trans_b) {
        MapCM Bm(b.data().data() + i * n * k, n, k);
        if (a.requires_grad()) MapM(a.impl()->grad.data() + i * m * k, m, k).noalias() += G * Bm;
        if (b.requires_grad()) MapM(b.impl()->grad.data() + i * n * k, n, k).noalias() += G.transpose() * A;
      } else {
        MapCM Bm(b.data().data() + i * k * n, k, n);
        if (a.requires_grad()) MapM(a.impl()->grad.data() + i * m * k, m, k).noalias() += G * Bm.transpose();
        if (b.requires_grad()) MapM(b.impl()->grad.data() + i * k * n, k, n).noalias() += A.transpose() * G;
      }
    }
  });
}

// ---------------------------------------------------------- layout changes

inline Tensor reshape(const Tensor& x, const Shape& shape) {
  if (numel(shape) != x.size())
    throw InvalidArgument("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  return make_result(shape, x.data(), {x}, "reshape", [x](TensorImpl& self) {
    auto& gx = x.impl()->grad;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw InvalidArgument("permute: permutation length differs from rank of " + shape_str(x.shape()));
  std::vector<bool> used(r, false);
  for (auto p : perm) {
    if (p >= r || used[p]) throw InvalidArgument("permute: invalid permutation for " + shape_str(x.shape()));
    used[p] = true;
  }
  Shape out(r);
  std::vector<std::size_t> in_stride(r), src(r);
  std::size_t s = 1;
  for (std::size_t d = r; d-- > 0;) {
    in_stride[d] = s;
    s *= x.dim(d);
  }
  for (std::size_t d = 0; d < r; ++d) {
    out[d] = x.dim(perm[d]);
    src[d] = in_stride[perm[d]];
  }
  const std::vector<std::size_t> zero(r, 0);
  // out index o maps to input offset via src strides
  std::vector<std::size_t> map(x.size());
  detail::for_each_bcast(out, src, zero, [&](std::size_t o, std::size_t i, std::size_t) { map[o] = i; });
  std::vector<double> y(x.size());
  for (std::size_t o = 0; o < y.size(); ++o) y[o] = x[map[o]];
  return make_result(out, std::move(y), {x}, "permute", [x, map = std::move(map)](TensorImpl& self) {
    auto& gx = x.impl()->grad;
    for (std::size_t o = 0; o < map.size(); ++o) gx[map[o]] += self.grad[o];
  });
}

inline Tensor concat(const std::vector<Tensor>& xs, std::size_t axis) {
  if (xs.empty()) throw InvalidArgument("concat: no inputs");
  const Shape& s0 = xs[0].shape();
  if (axis >= s0.size()) throw InvalidArgument("concat: axis out of range for " + shape_str(s0));
  Shape out = s0;
  out[axis] = 0;
  for (const auto& t : xs) {
    bool ok = t.rank() == s0.size();
    for (std::size_t d = 0; ok && d < s0.size(); ++d) ok = d == axis || t.dim(d) == s0[d];
    detail::require_shape(ok, "concat", s0, t.shape());
    out[axis] += t.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
  std::vector<double> y(numel(out));
  const std::size_t row = out[axis] * inner;
  std::size_t off = 0;
  for (const auto& t : xs) {
    const std::size_t w = t.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(t.data().data() + o * w, w, y.data() + o * row + off);
    off += w;
  }
  return make_result(out, std::move(y), xs, "concat", [xs, outer, row](TensorImpl& self) {
    std::size_t off = 0;
    for (const auto& t : xs) {
      const std::size_t w = t.size() / outer;
      if (t.requires_grad()) {
        auto& g = t.impl()->grad;
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < w; ++j) g[o * w + j] += self.grad[o * row + off + j];
      }
      off += w;
    }
  });
}

/// x[..., start:start+len, ...] along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len) {
  if (axis >= x.rank() || start + len > x.dim(axis))
    throw InvalidArgument("slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                          ") out of bounds on axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  Shape out = x.shape();
  out[axis] = len;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  const std::size_t in_row = x.dim(axis) * inner, w = len * inner, off = start * inner;
  std::vector<double> y(outer * w);
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(x.data().data() + o * in_row + off, w, y.data() + o * w);
  return make_result(out, std::move(y), {x}, "slice", [x, outer, in_row, w, off](TensorImpl& self) {
    auto& g = x.impl()->grad;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < w; ++j) g[o * in_row + off + j] += self.grad[o * w + j];
  });
}

// ------------------------------------------------------- last-axis kernels

inline void require_rank1(const Tensor& x, const char* op) {
  if (x.rank() < 1 || x.shape().back() == 0) throw InvalidArgument(std::string(op) + ": needs a non-empty last axis");
}

inline Tensor softmax(const Tensor& x) {
  require_rank1(x, "softmax");
  const std::size_t D = x.shape().back(), R = x.size() / D;
  std::vector<double> y(x.size());
  for (std::size_t r = 0; r < R; ++r) {
    const double* xi = x.data().data() + r * D;
    double* yi = y.data() + r * D;
    const double mx = *std::max_element(xi, xi + D);
    double s = 0;
    for (std::size_t j = 0; j < D; ++j) s += (yi[j] = std::exp(xi[j] - mx));
    for (std::size_t j = 0; j < D; ++j) yi[j] /= s;
  }
  auto out = make_result(x.shape(), std::move(y), {x}, "softmax", nullptr);
  if (out.requires_grad()) {
    out.impl()->backward_fn = [x, D, R](TensorImpl& self) {
      auto& gx = x.impl()->grad;
      for (std::size_t r = 0; r < R; ++r) {
        const double* yi = self.data.data() + r * D;
        const double* gi = self.grad.data() + r * D;
        double dot = 0;
        for (std::size_t j = 0; j < D; ++j) dot += gi[j] * yi[j];
        for (std::size_t j = 0; j < D; ++j) gx[r * D + j] += yi[j] * (gi[j] - dot);
      }
    };
  }
  return out;
}

/// log(sum(exp(x))) over the last axis; result drops that axis.
inline Tensor logsumexp(const Tensor& x) {
  require_rank1(x, "logsumexp");
  const std::size_t D = x.shape().back(), R = x.size() / D;
  Shape out(x.shape().begin(), x.shape().end() - 1);
  std::vector<double> y(R);
  for (std::size_t r = 0; r < R; ++r) {
    const double* xi = x.data().data() + r * D;
    const double mx = *std::max_element(xi, xi + D);
    double s = 0;
    for (std::size_t j = 0; j < D; ++j) s += std::exp(xi[j] - mx);
    y[r] = mx + std::log(s);
  }
  auto res = make_result(out, std::move(y), {x}, "logsumexp", nullptr);
  if (res.requires_grad()) {
    res.impl()->backward_fn = [x, D, R](TensorImpl& self) {
      auto& gx = x.impl()->grad;
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t j = 0; j < D; ++j)
          gx[r * D + j] += self.grad[r] * std::exp(x[r * D + j] - self.data[r]);
    };
  }
  return res;
}

/// Normalizes the last axis then applies gamma * xhat + beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  require_rank1(x, "layer_norm");
  const std::size_t D = x.shape().back(), R = x.size() / D;
  if (gamma.shape() != Shape{D} || beta.shape() != Shape{D})
    throw InvalidArgument("layer_norm: affine parameters must have shape [" + std::to_string(D) + "], got " +
                          shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  std::vector<double> y(x.size()), xhat(x.size()), rstd(R);
  for (std::size_t r = 0; r < R; ++r) {
    const double* xi = x.data().data() + r * D;
    double mu = 0;
    for (std::size_t j = 0; j < D; ++j) mu += xi[j];
    mu /= static_cast<double>(D);
    double var = 0;
    for (std::size_t j = 0; j < D; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(D);
    const double rs = (var + eps) > 0 ? 1.0 / std::sqrt(var + eps) : 0.0;
    rstd[r] = rs;
    for (std::size_t j = 0; j < D; ++j) {
      xhat[r * D + j] = (xi[j] - mu) * rs;
      y[r * D + j] = gamma[j] * xhat[r * D + j] + beta[j];
    }
  }
  return make_result(x.shape(), std::move(y), {x, gamma, beta}, "layer_norm",
                     [x, gamma, beta, D, R, xhat = std::move(xhat), rstd = std::move(rstd)](TensorImpl& self) {
                       const double* G = self.grad.data();
                       if (gamma.requires_grad() || beta.requires_grad()) {
                         for (std::size_t r = 0; r < R; ++r)
                           for (std::size_t j = 0; j < D; ++j) {
                             if (gamma.requires_grad()) gamma.impl()->grad[j] += G[r * D + j] * xhat[r * D + j];
                             if (beta.requires_grad()) beta.impl()->grad[j] += G[r * D + j];
                           }
                       }
                       if (!x.requires_grad()) return;
                       auto& gx = x.impl()->grad;
                       const double invD = 1.0 / static_cast<double>(D);
                       for (std::size_t r = 0; r < R; ++r) {
                         double s1 = 0, s2 = 0;
                         for (std::size_t j = 0; j < D; ++j) {
                           const double gh = G[r * D + j] * gamma[j];
                           s1 += gh;
                           s2 += gh * xhat[r * D + j];
                         }
                         for (std::size_t j = 0; j < D; ++j) {
                           const double gh = G[r * D + j] * gamma[j];
                           gx[r * D + j] += rstd[r] * (gh - invD * s1 - xhat[r * D + j] * invD * s2);
                         }
                       }
                     });
}

/// Row-wise x / max(|x|, 1e-12) over the last axis.
inline Tensor l2_normalize(const Tensor& x) {
  require_rank1(x, "l2_normalize");
  const std::size_t D = x.shape().back(), R = x.size() / D;
  std::vector<double> y(x.size()), inv(R);
  for (std::size_t r = 0; r < R; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < D; ++j) s += x[r * D + j] * x[r * D + j];
    inv[r] = 1.0 / std::max(std::sqrt(s), 1e-12);
    for (std::size_t j = 0; j < D; ++j) y[r * D + j] = x[r * D + j] * inv[r];
  }
  auto out = make_result(x.shape(), std::move(y), {x}, "l2_normalize", nullptr);
  if (out.requires_grad()) {
    out.impl()->backward_fn = [x, D, R, inv = std::move(inv)](TensorImpl& self) {
      auto& gx = x.impl()->grad;
      for (std::size_t r = 0; r < R; ++r) {
        double dot = 0;
        for (std::size_t j = 0; j < D; ++j) dot += self.grad[r * D + j] * self.data[r * D + j];
        for (std::size_t j = 0; j < D; ++j)
          gx[r * D + j] += inv[r] * (self.grad[r * D + j] - self.data[r * D + j] * dot);
      }
    };
  }
  return out;
}

// ------------------------------------------------------- pointwise kernels

template <typename F, typename DF>
Tensor pointwise(const Tensor& x, const char* name, F f, DF df) {
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(x[i]);
  return make_result(x.shape(), std::move(y), {x}, name, [x, df](TensorImpl& self) {
    auto& gx = x.impl()->grad;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * df(x[i]);
  });
}

/// Exact (erf) GELU.
inline Tensor gelu(const Tensor& x) {
  constexpr double r2 = std::numbers::sqrt2;
  constexpr double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  return pointwise(
      x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v / r2)); },
      [](double v) { return 0.5 * (1.0 + std::erf(v / r2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v); });
}

inline Tensor softplus(const Tensor& x) {
  return pointwise(
      x, "softplus", [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); });
}

inline Tensor square(const Tensor& x) {
  return pointwise(x, "square", [](double v) { return v * v; }, [](double v) { return 2.0 * v; });
}

/// Writes `value` where mask is nonzero; masked positions get no gradient.
inline Tensor masked_fill(const Tensor& x, const std::vector<std::uint8_t>& mask, double value = -1e9) {
  if (mask.size() != x.size())
    throw InvalidArgument("masked_fill: mask has " + std::to_string(mask.size()) + " entries for shape " +
                          shape_str(x.shape()));
  std::vector<double> y(x.data());
  for (std::size_t i = 0; i < y.size(); ++i)
    if (mask[i]) y[i] = value;
  return make_result(x.shape(), std::move(y), {x}, "masked_fill", [x, mask](TensorImpl& self) {
    auto& gx = x.impl()->grad;
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (!mask[i]) gx[i] += self.grad[i];
  });
}

/// Inverted dropout. p = 0 or eval mode returns the input unchanged.
inline Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng, bool train = true) {
  if (p < 0.0 || p >= 1.0) throw InvalidArgument("dropout: p must be in [0, 1)");
  if (!train || p == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  std::vector<double> m(x.size());
  const double s = 1.0 / (1.0 - p);
  for (auto& v : m) v = keep(rng) ? s : 0.0;
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * m[i];
  return make_result(x.shape(), std::move(y), {x}, "dropout", [x, m = std::move(m)](TensorImpl& self) {
    auto& gx = x.impl()->grad;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * m[i];
  });
}

/// Rows of table[V, D] selected by indices -> [n, D].
inline Tensor embedding_lookup(const Tensor& table, const std::vector<std::size_t>& indices) {
  if (table.rank() != 2) throw InvalidArgument("embedding_lookup: table must be 2-D, got " + shape_str(table.shape()));
  const std::size_t V = table.dim(0), D = table.dim(1);
  std::vector<double> y(indices.size() * D);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= V)
      throw InvalidArgument("embedding_lookup: index " + std::to_string(indices[i]) + " out of range " +
                            std::to_string(V));
    std::copy_n(table.data().data() + indices[i] * D, D, y.data() + i * D);
  }
  return make_result({indices.size(), D}, std::move(y), {table}, "embedding_lookup",
                     [table, indices, D](TensorImpl& self) {
                       auto& g = table.impl()->grad;
                       for (std::size_t i = 0; i < indices.size(); ++i)
                         for (std::size_t j = 0; j < D; ++j) g[indices[i] * D + j] += self.grad[i * D + j];
                     });
}

/// Sliding windows over time: x[B, T, C] -> [B, T_out, k*C] with zero
/// padding (pad_left, pad_right) and the given stride.
inline Tensor unfold1d(const Tensor& x, std::size_t k, std::size_t stride, std::size_t pad_left = 0,
                       std::size_t pad_right = 0) {
  if (x.rank() != 3) throw InvalidArgument("unfold1d: input must be [B, T, C], got " + shape_str(x.shape()));
  if (k == 0 || stride == 0) throw InvalidArgument("unfold1d: kernel and stride must be positive");
  const std::size_t B = x.dim(0), T = x.dim(1), C = x.dim(2), Tp = T + pad_left + pad_right;
  if (Tp < k) throw InvalidArgument("unfold1d: kernel longer than padded input " + shape_str(x.shape()));
  const std::size_t To = (Tp - k) / stride + 1;
  // src[o] = input offset or npos for padding
  constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::vector<std::size_t> src(B * To * k * C);
  std::size_t o = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < To; ++t)
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t tp = t * stride + j;
        const bool pad = tp < pad_left || tp >= pad_left + T;
        for (std::size_t c = 0; c < C; ++c) src[o++] = pad ? npos : (b * T + (tp - pad_left)) * C + c;
      }
  std::vector<double> y(src.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = src[i] == npos ? 0.0 : x[src[i]];
  return make_result({B, To, k * C}, std::move(y), {x}, "unfold1d", [x, src = std::move(src)](TensorImpl& self) {
    auto& g = x.impl()->grad;
    for (std::size_t i = 0; i < src.size(); ++i)
      if (src[i] != npos) g[src[i]] += self.grad[i];
  });
}

// -------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& x) {
  double s = 0;
  for (double v : x.data()) s += v;
  return make_result({}, {s}, {x}, "sum", [x](TensorImpl& self) {
    auto& g = x.impl()->grad;
    for (auto& v : g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw InvalidArgument("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

/// Sum of w * x with a constant weight tensor of the same shape.
inline Tensor weighted_sum(const Tensor& x, const std::vector<double>& w) {
  if (w.size() != x.size()) throw InvalidArgument("weighted_sum: weight count differs from " + shape_str(x.shape()));
  double s = 0;
  for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * x[i];
  return make_result({}, {s}, {x}, "weighted_sum", [x, w](TensorImpl& self) {
    auto& g = x.impl()->grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * w[i];
  });
}

}  // namespace corma::nk
