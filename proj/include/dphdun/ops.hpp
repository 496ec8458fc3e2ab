#pragma once

// Differentiable operators over Tensor<T>. Every function records its own
// backward rule; nothing here keeps state between calls.

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "dphdun/tensor.hpp"

namespace dphdun::ops {

namespace detail {

using dphdun::detail::grad_of;
using dphdun::detail::make_result;
using dphdun::detail::make_result_n;

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapC = Eigen::Map<const RowMat<T>>;
template <class T>
using Map = Eigen::Map<RowMat<T>>;

// C (m x n) += alpha * op(A) * op(B). A is stored (ar x ac), B (br x bc).
template <class T>
void gemm_acc(T* c, const T* a, std::size_t ar, std::size_t ac, bool ta, const T* b,
              std::size_t br, std::size_t bc, bool tb, T alpha = T(1)) {
  MapC<T> A(a, static_cast<Eigen::Index>(ar), static_cast<Eigen::Index>(ac));
  MapC<T> B(b, static_cast<Eigen::Index>(br), static_cast<Eigen::Index>(bc));
  const auto m = static_cast<Eigen::Index>(ta ? ac : ar);
  const auto n = static_cast<Eigen::Index>(tb ? br : bc);
  Map<T> C(c, m, n);
  if (!ta && !tb) C.noalias() += alpha * A * B;
  else if (!ta && tb) C.noalias() += alpha * A * B.transpose();
  else if (ta && !tb) C.noalias() += alpha * A.transpose() * B;
  else C.noalias() += alpha * A.transpose() * B.transpose();
}

inline void require(bool cond, const std::string& what) {
  if (!cond) throw DimensionError(what);
}

// y[i] = f(x)[i] evaluated on aligned fixed-size chunks, so every element
// takes the same vectorised path whatever the alignment of x and y. x may
// alias y.
template <class T, class F>
void chunked_map(const T* x, T* y, std::size_t n, F f) {
  constexpr std::size_t kChunk = 64;
  Eigen::Array<T, kChunk, 1> in, res;
  for (std::size_t i = 0; i < n; i += kChunk) {
    const std::size_t m = std::min(kChunk, n - i);
    in.setZero();
    std::copy_n(x + i, m, in.data());
    res = f(in);
    std::copy_n(res.data(), m, y + i);
  }
}

// Outer/len/inner factorisation of a shape around one axis.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

struct Broadcast {
  Shape out;
  std::vector<std::size_t> sa, sb;  // element strides, 0 on broadcast axes
  bool same = false;
};

inline Broadcast broadcast_shapes(const Shape& a, const Shape& b) {
  Broadcast r;
  if (a == b) {
    r.out = a;
    r.same = true;
    return r;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(rank - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(rank - b.size()));
  r.out.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    r.out[i] = std::max(pa[i], pb[i]);
  }
  r.sa.assign(rank, 0);
  r.sb.assign(rank, 0);
  std::size_t ka = 1, kb = 1;
  for (std::size_t i = rank; i-- > 0;) {
    r.sa[i] = pa[i] == 1 ? 0 : ka;
    r.sb[i] = pb[i] == 1 ? 0 : kb;
    ka *= pa[i];
    kb *= pb[i];
  }
  return r;
}

// Calls f(out_index, a_index, b_index) over the broadcast output.
template <class F>
void broadcast_for_each(const Broadcast& bc, F&& f) {
  const std::size_t rank = bc.out.size();
  const std::size_t total = numel_of(bc.out);
  if (total == 0) return;
  if (rank == 0) {
    f(0, 0, 0);
    return;
  }
  const std::size_t last = bc.out[rank - 1];
  const std::size_t sa_last = bc.sa[rank - 1], sb_last = bc.sb[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < total; o += last) {
    for (std::size_t j = 0; j < last; ++j) f(o + j, ia + j * sa_last, ib + j * sb_last);
    // advance odometer over leading axes
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      ia += bc.sa[d];
      ib += bc.sb[d];
      if (idx[d] < bc.out[d]) break;
      ia -= bc.sa[d] * idx[d];
      ib -= bc.sb[d] * idx[d];
      idx[d] = 0;
    }
  }
}

template <class T, class Fwd, class DA, class DB>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, DA da, DB db) {
  Broadcast bc = broadcast_shapes(a.shape(), b.shape());
  std::vector<T> out(numel_of(bc.out));
  const auto& av = a.vec();
  const auto& bv = b.vec();
  if (bc.same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    broadcast_for_each(bc, [&](std::size_t o, std::size_t i, std::size_t j) {
      out[o] = fwd(av[i], bv[j]);
    });
  }
  Shape shape = bc.out;
  return make_result(std::move(shape), std::move(out), {&a, &b},
                     [a, b, bc, da, db](dphdun::detail::Node<T>& self) {
                       const auto& g = self.grad;
                       const auto& av = a.vec();
                       const auto& bv = b.vec();
                       auto* ga = grad_of(a);
                       auto* gb = grad_of(b);
                       if (bc.same) {
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           if (ga) (*ga)[i] += da(av[i], bv[i], g[i]);
                           if (gb) (*gb)[i] += db(av[i], bv[i], g[i]);
                         }
                       } else {
                         broadcast_for_each(bc, [&](std::size_t o, std::size_t i, std::size_t j) {
                           if (ga) (*ga)[i] += da(av[i], bv[j], g[o]);
                           if (gb) (*gb)[j] += db(av[i], bv[j], g[o]);
                         });
                       }
                     });
}

// Elementwise map whose derivative is expressed through (input, output).
template <class T, class Fwd, class Deriv>
Tensor<T> unary(const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  const auto& xv = x.vec();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return make_result(x.shape(), std::move(out), {&x},
                     [x, deriv](dphdun::detail::Node<T>& self) {
                       auto* gx = grad_of(x);
                       const auto& xv = x.vec();
                       for (std::size_t i = 0; i < xv.size(); ++i) {
                         (*gx)[i] += self.grad[i] * deriv(xv[i], self.data[i]);
                       }
                     });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, [](T x, T y) { return x + y; }, [](T, T, T g) { return g; },
      [](T, T, T g) { return g; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, [](T x, T y) { return x - y; }, [](T, T, T g) { return g; },
      [](T, T, T g) { return -g; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, [](T x, T y) { return x * y; }, [](T, T y, T g) { return g * y; },
      [](T x, T, T g) { return g * x; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

// Exact (erf-based) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  const std::size_t n = x.numel();
  const auto& xv = x.vec();
  auto cdf = std::make_shared<std::vector<T>>(n);
  detail::chunked_map(xv.data(), cdf->data(), n,
                      [](const auto& v) { return T(0.5) * (T(1) + (v * T(0.70710678118654752440)).erf()); });
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[i] * (*cdf)[i];
  return detail::make_result(x.shape(), std::move(out), {&x}, [x, cdf](dphdun::detail::Node<T>& self) {
    auto* gx = detail::grad_of(x);
    const auto& xv = x.vec();
    const std::size_t n = xv.size();
    std::vector<T> pdf(n);
    detail::chunked_map(xv.data(), pdf.data(), n,
                        [](const auto& v) { return T(0.39894228040143267794) * (T(-0.5) * v.square()).exp(); });
    for (std::size_t i = 0; i < n; ++i) (*gx)[i] += self.grad[i] * ((*cdf)[i] + xv[i] * pdf[i]);
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.vec()) s += v;
  return detail::make_result(Shape{}, std::vector<T>{s}, {&x}, [x](dphdun::detail::Node<T>& self) {
    auto* gx = detail::grad_of(x);
    for (auto& g : *gx) g += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Mean squared error over all elements.
template <class T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::require(pred.shape() == target.shape(), "mse: shape mismatch " +
                                                      shape_str(pred.shape()) + " vs " +
                                                      shape_str(target.shape()));
  const auto& p = pred.vec();
  const auto& t = target.vec();
  T s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T d = p[i] - t[i];
    s += d * d;
  }
  const T n = static_cast<T>(p.size());
  return detail::make_result(
      Shape{}, std::vector<T>{s / n}, {&pred, &target},
      [pred, target, n](dphdun::detail::Node<T>& self) {
        const auto& p = pred.vec();
        const auto& t = target.vec();
        const T k = T(2) * self.grad[0] / n;
        auto* gp = detail::grad_of(pred);
        auto* gt = detail::grad_of(target);
        for (std::size_t i = 0; i < p.size(); ++i) {
          const T d = k * (p[i] - t[i]);
          if (gp) (*gp)[i] += d;
          if (gt) (*gt)[i] -= d;
        }
      });
}

/// Mean over `axis`, kept as an extent-1 axis.
template <class T>
Tensor<T> reduce_mean(const Tensor<T>& x, std::size_t axis) {
  detail::require(axis < x.dim(), "reduce_mean: axis out of range");
  const auto sp = detail::split_axis(x.shape(), axis);
  detail::require(sp.len > 0, "reduce_mean: empty axis");
  Shape shape = x.shape();
  shape[axis] = 1;
  std::vector<T> out(sp.outer * sp.inner, T(0));
  const auto& xv = x.vec();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[o * sp.inner + i] += xv[(o * sp.len + l) * sp.inner + i];
  const T inv = T(1) / static_cast<T>(sp.len);
  for (auto& v : out) v *= inv;
  return detail::make_result(std::move(shape), std::move(out), {&x},
                             [x, sp, inv](dphdun::detail::Node<T>& self) {
                               auto* gx = detail::grad_of(x);
                               for (std::size_t o = 0; o < sp.outer; ++o)
                                 for (std::size_t l = 0; l < sp.len; ++l)
                                   for (std::size_t i = 0; i < sp.inner; ++i)
                                     (*gx)[(o * sp.len + l) * sp.inner + i] +=
                                         self.grad[o * sp.inner + i] * inv;
                             });
}

/// Max over `axis`, kept as an extent-1 axis. Gradient flows to the first
/// maximal element.
template <class T>
Tensor<T> reduce_max(const Tensor<T>& x, std::size_t axis) {
  detail::require(axis < x.dim(), "reduce_max: axis out of range");
  const auto sp = detail::split_axis(x.shape(), axis);
  detail::require(sp.len > 0, "reduce_max: empty axis");
  Shape shape = x.shape();
  shape[axis] = 1;
  std::vector<T> out(sp.outer * sp.inner);
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
  const auto& xv = x.vec();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = o * sp.len * sp.inner + i;
      for (std::size_t l = 1; l < sp.len; ++l) {
        const std::size_t k = (o * sp.len + l) * sp.inner + i;
        if (xv[k] > xv[best]) best = k;
      }
      out[o * sp.inner + i] = xv[best];
      (*arg)[o * sp.inner + i] = best;
    }
  return detail::make_result(std::move(shape), std::move(out), {&x},
                             [x, arg](dphdun::detail::Node<T>& self) {
                               auto* gx = detail::grad_of(x);
                               for (std::size_t j = 0; j < arg->size(); ++j)
                                 (*gx)[(*arg)[j]] += self.grad[j];
                             });
}

/// [N,C,H,W] -> [N,C,1,1] spatial mean.
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require(x.dim() == 4, "global_avg_pool expects [N,C,H,W], got " + shape_str(x.shape()));
  detail::require(x.size(2) >= 1 && x.size(3) >= 1, "global_avg_pool: empty spatial extent");
  const std::size_t n = x.size(0), c = x.size(1), hw = x.size(2) * x.size(3);
  const auto& xv = x.vec();
  std::vector<T> out(n * c, T(0));
  for (std::size_t k = 0; k < n * c; ++k) {
    T s = 0;
    for (std::size_t p = 0; p < hw; ++p) s += xv[k * hw + p];
    out[k] = s / static_cast<T>(hw);
  }
  return detail::make_result(Shape{n, c, 1, 1}, std::move(out), {&x},
                             [x, hw](dphdun::detail::Node<T>& self) {
                               auto* gx = detail::grad_of(x);
                               const T inv = T(1) / static_cast<T>(hw);
                               for (std::size_t k = 0; k < self.grad.size(); ++k) {
                                 const T g = self.grad[k] * inv;
                                 for (std::size_t p = 0; p < hw; ++p) (*gx)[k * hw + p] += g;
                               }
                             });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::require(numel_of(shape) == x.numel(),
                  "reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  return detail::make_result(std::move(shape), x.vec(), {&x}, [x](dphdun::detail::Node<T>& self) {
    auto* gx = detail::grad_of(x);
    for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += self.grad[i];
  });
}

/// out[i] = x[index[i]]; the index table is shared between forward and backward.
template <class T>
Tensor<T> gather(const Tensor<T>& x, Shape shape,
                 std::shared_ptr<const std::vector<std::size_t>> index) {
  detail::require(numel_of(shape) == index->size(), "gather: index table does not match shape");
  const auto& xv = x.vec();
  std::vector<T> out(index->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[(*index)[i]];
  return detail::make_result(std::move(shape), std::move(out), {&x},
                             [x, index](dphdun::detail::Node<T>& self) {
                               auto* gx = detail::grad_of(x);
                               for (std::size_t i = 0; i < index->size(); ++i)
                                 (*gx)[(*index)[i]] += self.grad[i];
                             });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  detail::require(!parts.empty(), "concat of zero tensors");
  const Shape& first = parts.front().shape();
  detail::require(axis < first.size(), "concat: axis out of range");
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& p : parts) {
    detail::require(p.dim() == first.size(), "concat: rank mismatch");
    for (std::size_t d = 0; d < first.size(); ++d) {
      if (d != axis) {
        detail::require(p.size(d) == first[d], "concat: extent mismatch " +
                                                   shape_str(p.shape()) + " vs " +
                                                   shape_str(first));
      }
    }
    shape[axis] += p.size(axis);
  }
  const auto sp = detail::split_axis(shape, axis);
  std::vector<T> out(numel_of(shape));
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t chunk = p.size(axis) * sp.inner;
    const auto& pv = p.vec();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  out.begin() + static_cast<std::ptrdiff_t>(o * sp.len * sp.inner + offset));
    offset += chunk;
  }
  return detail::make_result_n(
      std::move(shape), std::move(out), parts, [parts, sp, axis](dphdun::detail::Node<T>& self) {
        std::size_t offset = 0;
        for (const auto& p : parts) {
          const std::size_t chunk = p.size(axis) * sp.inner;
          if (auto* gp = detail::grad_of(p)) {
            for (std::size_t o = 0; o < sp.outer; ++o)
              for (std::size_t j = 0; j < chunk; ++j)
                (*gp)[o * chunk + j] += self.grad[o * sp.len * sp.inner + offset + j];
          }
          offset += chunk;
        }
      });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// op(a) * op(b). Accepts 2-D operands, or a batched 3-D `a` with either a
/// batched 3-D or a shared 2-D `b`.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
                 bool trans_b = false) {
  detail::require((a.dim() == 2 && b.dim() == 2) || (a.dim() == 3 && (b.dim() == 2 || b.dim() == 3)),
                  "matmul: unsupported ranks " + shape_str(a.shape()) + " x " +
                      shape_str(b.shape()));
  const bool batched = a.dim() == 3;
  const bool shared_b = batched && b.dim() == 2;
  const std::size_t batch = batched ? a.size(0) : 1;
  if (batched && !shared_b) detail::require(b.size(0) == batch, "matmul: batch mismatch");
  const std::size_t ar = a.size(a.dim() - 2), ac = a.size(a.dim() - 1);
  const std::size_t br = b.size(b.dim() - 2), bc = b.size(b.dim() - 1);
  const std::size_t m = trans_a ? ac : ar, k = trans_a ? ar : ac;
  const std::size_t kb = trans_b ? bc : br, n = trans_b ? br : bc;
  detail::require(k == kb, "matmul: inner extents differ " + shape_str(a.shape()) + " x " +
                               shape_str(b.shape()));
  std::vector<T> out(batch * m * n, T(0));
  const std::size_t sa = ar * ac, sb = shared_b ? 0 : br * bc, sc = m * n;
  for (std::size_t i = 0; i < batch; ++i) {
    detail::gemm_acc(out.data() + i * sc, a.vec().data() + i * sa, ar, ac, trans_a,
                     b.vec().data() + i * sb, br, bc, trans_b);
  }
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  return detail::make_result(
      std::move(shape), std::move(out), {&a, &b},
      [a, b, trans_a, trans_b, batch, ar, ac, br, bc, sa, sb, sc, m, n](dphdun::detail::Node<T>& self) {
        const T* g = self.grad.data();
        auto* ga = detail::grad_of(a);
        auto* gb = detail::grad_of(b);
        for (std::size_t i = 0; i < batch; ++i) {
          const T* av = a.vec().data() + i * sa;
          const T* bv = b.vec().data() + i * sb;
          const T* gi = g + i * sc;
          if (ga) {
            T* d = ga->data() + i * sa;
            if (!trans_a) detail::gemm_acc(d, gi, m, n, false, bv, br, bc, !trans_b);
            else detail::gemm_acc(d, bv, br, bc, trans_b, gi, m, n, true);
          }
          if (gb) {
            T* d = gb->data() + i * sb;
            if (!trans_b) detail::gemm_acc(d, av, ar, ac, !trans_a, gi, m, n, false);
            else detail::gemm_acc(d, gi, m, n, true, av, ar, ac, trans_a);
          }
        }
      });
}

/// Softmax along `axis`, max-subtracted.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  detail::require(axis < x.dim(), "softmax: axis out of range");
  const auto sp = detail::split_axis(x.shape(), axis);
  detail::require(sp.len > 0, "softmax: empty axis");
  const auto& xv = x.vec();
  std::vector<T> out(xv.size());
  if (sp.inner == 1) {
    for (std::size_t o = 0; o < sp.outer; ++o) {
      const T* row = xv.data() + o * sp.len;
      T* dst = out.data() + o * sp.len;
      const T mx = *std::max_element(row, row + sp.len);
      for (std::size_t l = 0; l < sp.len; ++l) dst[l] = row[l] - mx;
      detail::chunked_map(dst, dst, sp.len, [](const auto& v) { return v.exp(); });
      T s = 0;
      for (std::size_t l = 0; l < sp.len; ++l) s += dst[l];
      const T inv = T(1) / s;
      for (std::size_t l = 0; l < sp.len; ++l) dst[l] *= inv;
    }
  } else {
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.len * sp.inner + i;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t l = 0; l < sp.len; ++l) mx = std::max(mx, xv[base + l * sp.inner]);
        T s = 0;
        for (std::size_t l = 0; l < sp.len; ++l) {
          const T e = std::exp(xv[base + l * sp.inner] - mx);
          out[base + l * sp.inner] = e;
          s += e;
        }
        const T inv = T(1) / s;
        for (std::size_t l = 0; l < sp.len; ++l) out[base + l * sp.inner] *= inv;
      }
  }
  return detail::make_result(x.shape(), std::move(out), {&x}, [x, sp](dphdun::detail::Node<T>& self) {
    auto* gx = detail::grad_of(x);
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.len * sp.inner + i;
        T dot = 0;
        for (std::size_t l = 0; l < sp.len; ++l) dot += g[base + l * sp.inner] * y[base + l * sp.inner];
        for (std::size_t l = 0; l < sp.len; ++l) {
          const std::size_t k = base + l * sp.inner;
          (*gx)[k] += y[k] * (g[k] - dot);
        }
      }
  });
}

/// Normalises over `axis` with learnable per-position scale and shift of
/// length shape[axis].
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, std::size_t axis, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  detail::require(axis < x.dim(), "layer_norm: axis out of range");
  const auto sp = detail::split_axis(x.shape(), axis);
  detail::require(gamma.numel() == sp.len && beta.numel() == sp.len,
                  "layer_norm: scale/shift length must equal normalised extent");
  const auto& xv = x.vec();
  const auto& gv = gamma.vec();
  const auto& bv = beta.vec();
  std::vector<T> out(xv.size());
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto inv_std = std::make_shared<std::vector<T>>(sp.outer * sp.inner);
  const T inv_len = T(1) / static_cast<T>(sp.len);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      T mu = 0;
      for (std::size_t l = 0; l < sp.len; ++l) mu += xv[base + l * sp.inner];
      mu *= inv_len;
      T var = 0;
      for (std::size_t l = 0; l < sp.len; ++l) {
        const T d = xv[base + l * sp.inner] - mu;
        var += d * d;
      }
      var *= inv_len;
      const T is = T(1) / std::sqrt(var + eps);
      (*inv_std)[o * sp.inner + i] = is;
      for (std::size_t l = 0; l < sp.len; ++l) {
        const std::size_t k = base + l * sp.inner;
        const T h = (xv[k] - mu) * is;
        (*xhat)[k] = h;
        out[k] = h * gv[l] + bv[l];
      }
    }
  return detail::make_result(
      x.shape(), std::move(out), {&x, &gamma, &beta},
      [x, gamma, beta, sp, xhat, inv_std, inv_len](dphdun::detail::Node<T>& self) {
        auto* gx = detail::grad_of(x);
        auto* gg = detail::grad_of(gamma);
        auto* gb = detail::grad_of(beta);
        const auto& gv = gamma.vec();
        const auto& g = self.grad;
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.len * sp.inner + i;
            T mean_d = 0, mean_dh = 0;
            for (std::size_t l = 0; l < sp.len; ++l) {
              const std::size_t k = base + l * sp.inner;
              const T dh = g[k] * gv[l];
              mean_d += dh;
              mean_dh += dh * (*xhat)[k];
              if (gg) (*gg)[l] += g[k] * (*xhat)[k];
              if (gb) (*gb)[l] += g[k];
            }
            if (!gx) continue;
            mean_d *= inv_len;
            mean_dh *= inv_len;
            const T is = (*inv_std)[o * sp.inner + i];
            for (std::size_t l = 0; l < sp.len; ++l) {
              const std::size_t k = base + l * sp.inner;
              (*gx)[k] += is * (g[k] * gv[l] - mean_d - (*xhat)[k] * mean_dh);
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Convolution

namespace detail {

struct ConvGeometry {
  std::size_t channels, h, w;  // input plane
  std::size_t kh, kw, stride, pad;
  std::size_t oh, ow;          // output plane
};

// Output columns [lo, hi) whose input column ox*stride - pad + kx is in range.
inline std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t kx) {
  const auto s = static_cast<std::ptrdiff_t>(g.stride);
  const auto off = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(g.pad);
  std::ptrdiff_t lo = off >= 0 ? 0 : (-off + s - 1) / s;
  std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(g.w) - 1 - off);
  hi = hi < 0 ? 0 : hi / s + 1;
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(g.ow));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// col[(c*kh+ky)*kw+kx][oy*ow+ox] = in[c][oy*s-p+ky][ox*s-p+kx]
template <class T>
void im2col(const T* in, const ConvGeometry& g, T* col) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((c * g.kh + ky) * g.kw + kx) * plane;
        const auto [lo, hi] = valid_columns(g, kx);
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill_n(dst, g.ow, T(0));
            continue;
          }
          const T* src = in + (c * g.h + static_cast<std::size_t>(iy)) * g.w + (static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(g.pad));
          std::fill_n(dst, lo, T(0));
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride];
          }
          std::fill(dst + hi, dst + g.ow, T(0));
        }
      }
}

// Adjoint of im2col: accumulates col entries back onto the input plane.
template <class T>
void col2im(const T* col, const ConvGeometry& g, T* in) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((c * g.kh + ky) * g.kw + kx) * plane;
        const auto [lo, hi] = valid_columns(g, kx);
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          T* dst = in + (c * g.h + static_cast<std::size_t>(iy)) * g.w + (static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(g.pad));
          const T* src = row + oy * g.ow;
          if (g.stride == 1) {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] += src[ox];
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * g.stride] += src[ox];
          }
        }
      }
}

inline bool is_pointwise(const ConvGeometry& g) {
  return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
}

}  // namespace detail

/// Cross-correlation. input [N,Cin,H,W], weight [Cout,Cin,kH,kW], bias [Cout]
/// or undefined.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t padding = 0) {
  detail::require(input.dim() == 4, "conv2d: input must be [N,C,H,W], got " + shape_str(input.shape()));
  detail::require(weight.dim() == 4, "conv2d: weight must be [Cout,Cin,kH,kW]");
  detail::require(weight.size(1) == input.size(1),
                  "conv2d: input has " + std::to_string(input.size(1)) + " channels, weight expects " +
                      std::to_string(weight.size(1)));
  if (bias.defined()) detail::require(bias.numel() == weight.size(0), "conv2d: bias length mismatch");
  if (stride == 0) throw GeometryError("conv2d: stride must be positive");
  const std::size_t n = input.size(0), cin = input.size(1), h = input.size(2), w = input.size(3);
  const std::size_t cout = weight.size(0), kh = weight.size(2), kw = weight.size(3);
  if (kh % 2 == 0 || kw % 2 == 0) throw GeometryError("conv2d: kernel extents must be odd");
  if (h + 2 * padding < kh || w + 2 * padding < kw) {
    throw GeometryError("conv2d: kernel larger than padded input " + shape_str(input.shape()));
  }
  detail::ConvGeometry g{cin, h, w, kh, kw, stride, padding, (h + 2 * padding - kh) / stride + 1,
                         (w + 2 * padding - kw) / stride + 1};
  const std::size_t plane = g.oh * g.ow, krows = cin * kh * kw;
  std::vector<T> out(n * cout * plane, T(0));
  std::vector<T> col(detail::is_pointwise(g) ? 0 : krows * plane);
  for (std::size_t b = 0; b < n; ++b) {
    const T* src = input.vec().data() + b * cin * h * w;
    if (!detail::is_pointwise(g)) {
      detail::im2col(src, g, col.data());
      src = col.data();
    }
    T* dst = out.data() + b * cout * plane;
    detail::gemm_acc(dst, weight.vec().data(), cout, krows, false, src, krows, plane, false);
    if (bias.defined()) {
      for (std::size_t c = 0; c < cout; ++c) {
        const T bc = bias.vec()[c];
        for (std::size_t p = 0; p < plane; ++p) dst[c * plane + p] += bc;
      }
    }
  }
  return detail::make_result(
      Shape{n, cout, g.oh, g.ow}, std::move(out), {&input, &weight, &bias},
      [input, weight, bias, g, n, cout, plane, krows](dphdun::detail::Node<T>& self) {
        auto* gi = detail::grad_of(input);
        auto* gw = detail::grad_of(weight);
        auto* gb = detail::grad_of(bias);
        const bool pw = detail::is_pointwise(g);
        std::vector<T> col(pw ? 0 : krows * plane);
        std::vector<T> dcol(gi && !pw ? krows * plane : 0);
        const std::size_t in_plane = g.channels * g.h * g.w;
        for (std::size_t b = 0; b < n; ++b) {
          const T* gout = self.grad.data() + b * cout * plane;
          if (gb) {
            for (std::size_t c = 0; c < cout; ++c) {
              T s = 0;
              for (std::size_t p = 0; p < plane; ++p) s += gout[c * plane + p];
              (*gb)[c] += s;
            }
          }
          if (gw) {
            const T* src = input.vec().data() + b * in_plane;
            if (!pw) {
              detail::im2col(src, g, col.data());
              src = col.data();
            }
            detail::gemm_acc(gw->data(), gout, cout, plane, false, src, krows, plane, true);
          }
          if (gi) {
            if (pw) {
              detail::gemm_acc(gi->data() + b * in_plane, weight.vec().data(), cout, krows, true, gout,
                               cout, plane, false);
            } else {
              std::fill(dcol.begin(), dcol.end(), T(0));
              detail::gemm_acc(dcol.data(), weight.vec().data(), cout, krows, true, gout, cout, plane,
                               false);
              detail::col2im(dcol.data(), g, gi->data() + b * in_plane);
            }
          }
        }
      });
}

/// Transposed convolution (adjoint of conv2d w.r.t. its input).
/// input [N,Cin,H,W], weight [Cin,Cout,k,k]; output extent (H-1)*stride-2*pad+k.
template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                           std::size_t stride, std::size_t padding = 0) {
  detail::require(input.dim() == 4 && weight.dim() == 4, "conv_transpose2d: rank-4 operands required");
  detail::require(weight.size(0) == input.size(1), "conv_transpose2d: channel mismatch");
  if (stride == 0) throw GeometryError("conv_transpose2d: stride must be positive");
  const std::size_t n = input.size(0), cin = input.size(1), h = input.size(2), w = input.size(3);
  const std::size_t cout = weight.size(1), kh = weight.size(2), kw = weight.size(3);
  if (bias.defined()) detail::require(bias.numel() == cout, "conv_transpose2d: bias length mismatch");
  if ((h - 1) * stride + kh <= 2 * padding || (w - 1) * stride + kw <= 2 * padding) {
    throw GeometryError("conv_transpose2d: nonpositive output extent");
  }
  const std::size_t oh = (h - 1) * stride + kh - 2 * padding;
  const std::size_t ow = (w - 1) * stride + kw - 2 * padding;
  // Geometry of the forward conv that maps the output plane back onto the input plane.
  detail::ConvGeometry g{cout, oh, ow, kh, kw, stride, padding, h, w};
  const std::size_t plane = h * w, krows = cout * kh * kw, out_plane = oh * ow;
  std::vector<T> out(n * cout * out_plane, T(0));
  std::vector<T> col(krows * plane);
  for (std::size_t b = 0; b < n; ++b) {
    std::fill(col.begin(), col.end(), T(0));
    detail::gemm_acc(col.data(), weight.vec().data(), cin, krows, true,
                     input.vec().data() + b * cin * plane, cin, plane, false);
    T* dst = out.data() + b * cout * out_plane;
    detail::col2im(col.data(), g, dst);
    if (bias.defined()) {
      for (std::size_t c = 0; c < cout; ++c)
        for (std::size_t p = 0; p < out_plane; ++p) dst[c * out_plane + p] += bias.vec()[c];
    }
  }
  return detail::make_result(
      Shape{n, cout, oh, ow}, std::move(out), {&input, &weight, &bias},
      [input, weight, bias, g, n, cin, cout, plane, krows, out_plane](dphdun::detail::Node<T>& self) {
        auto* gi = detail::grad_of(input);
        auto* gw = detail::grad_of(weight);
        auto* gb = detail::grad_of(bias);
        std::vector<T> dcol(krows * plane);
        for (std::size_t b = 0; b < n; ++b) {
          const T* gout = self.grad.data() + b * cout * out_plane;
          if (gb) {
            for (std::size_t c = 0; c < cout; ++c) {
              T s = 0;
              for (std::size_t p = 0; p < out_plane; ++p) s += gout[c * out_plane + p];
              (*gb)[c] += s;
            }
          }
          if (!gi && !gw) continue;
          detail::im2col(gout, g, dcol.data());
          if (gi) {
            detail::gemm_acc(gi->data() + b * cin * plane, weight.vec().data(), cin, krows, false,
                             dcol.data(), krows, plane, false);
          }
          if (gw) {
            detail::gemm_acc(gw->data(), input.vec().data() + b * cin * plane, cin, plane, false,
                             dcol.data(), krows, plane, true);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Resampling

/// Bilinear resize of [N,C,H,W] to [N,C,out_h,out_w] with half-pixel
/// centres: src = (dst + 0.5) * in/out - 0.5, clamped at the borders. A 2x
/// reduction is then exactly the mean of each 2x2 cell.
template <class T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require(x.dim() == 4, "bilinear_resize expects [N,C,H,W]");
  if (out_h == 0 || out_w == 0) throw GeometryError("bilinear_resize: empty output");
  const std::size_t nc = x.size(0) * x.size(1), h = x.size(2), w = x.size(3);
  struct Tap {
    std::size_t i0, i1;
    T w1;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
      if (src < 0) src = 0;
      auto i0 = static_cast<std::size_t>(src);
      if (i0 > in - 1) i0 = in - 1;
      const std::size_t i1 = std::min(i0 + 1, in - 1);
      t[o] = {i0, i1, static_cast<T>(src - static_cast<double>(i0))};
    }
    return t;
  };
  auto ty = std::make_shared<std::vector<Tap>>(taps(h, out_h));
  auto tx = std::make_shared<std::vector<Tap>>(taps(w, out_w));
  std::vector<T> out(nc * out_h * out_w);
  const auto& xv = x.vec();
  for (std::size_t p = 0; p < nc; ++p) {
    const T* src = xv.data() + p * h * w;
    T* dst = out.data() + p * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const Tap& a = (*ty)[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const Tap& b = (*tx)[ox];
        const T top = src[a.i0 * w + b.i0] * (T(1) - b.w1) + src[a.i0 * w + b.i1] * b.w1;
        const T bot = src[a.i1 * w + b.i0] * (T(1) - b.w1) + src[a.i1 * w + b.i1] * b.w1;
        dst[oy * out_w + ox] = top * (T(1) - a.w1) + bot * a.w1;
      }
    }
  }
  Shape shape{x.size(0), x.size(1), out_h, out_w};
  return detail::make_result(std::move(shape), std::move(out), {&x},
                             [x, ty, tx, nc, h, w, out_h, out_w](dphdun::detail::Node<T>& self) {
                               auto* gx = detail::grad_of(x);
                               for (std::size_t p = 0; p < nc; ++p) {
                                 T* dst = gx->data() + p * h * w;
                                 const T* g = self.grad.data() + p * out_h * out_w;
                                 for (std::size_t oy = 0; oy < out_h; ++oy) {
                                   const Tap& a = (*ty)[oy];
                                   for (std::size_t ox = 0; ox < out_w; ++ox) {
                                     const Tap& b = (*tx)[ox];
                                     const T v = g[oy * out_w + ox];
                                     dst[a.i0 * w + b.i0] += v * (T(1) - a.w1) * (T(1) - b.w1);
                                     dst[a.i0 * w + b.i1] += v * (T(1) - a.w1) * b.w1;
                                     dst[a.i1 * w + b.i0] += v * a.w1 * (T(1) - b.w1);
                                     dst[a.i1 * w + b.i1] += v * a.w1 * b.w1;
                                   }
                                 }
                               }
                             });
}

template <class T>
Tensor<T> downsample_half(const Tensor<T>& x) {
  if (x.size(2) % 2 || x.size(3) % 2) {
    throw GeometryError("half-resize needs even extents, got " + shape_str(x.shape()));
  }
  return bilinear_resize(x, x.size(2) / 2, x.size(3) / 2);
}

template <class T>
Tensor<T> upsample_double(const Tensor<T>& x) {
  return bilinear_resize(x, x.size(2) * 2, x.size(3) * 2);
}

// ---------------------------------------------------------------------------
// Attention

/// softmax(q k^T / sqrt(d)) v over [B,T,d] token tensors (single head).
template <class T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  detail::require(q.dim() == 3 && k.shape() == q.shape() && v.dim() == 3 && v.size(1) == q.size(1),
                  "attention: q,k must be [B,T,d] and v [B,T,dv]");
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(q.size(2)));
  auto scores = scale(matmul(q, k, false, true), inv_sqrt_d);
  return matmul(softmax(scores, 2), v);
}

}  // namespace dphdun::ops
