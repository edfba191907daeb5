#pragma once

// Differentiable primitives over Graph<T>. Each op computes its forward value
// eagerly and, when an input is tracked, records a closure that pushes the
// output gradient back to its inputs.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Core>

#include "patentret/graph.hpp"
#include "patentret/tensor.hpp"

namespace patentret {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

namespace detail {

template <class T>
void same_graph(Var<T> a, Var<T> b) {
  if (a.graph != b.graph) throw std::invalid_argument("operands belong to different graphs");
}

template <class T>
void same_shape(const char* op, Var<T> a, Var<T> b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
}

template <class T, class F>
Var<T> unary(OpKind kind, Var<T> x, F&& fwd_and_deriv) {
  // fwd_and_deriv(v) -> pair{y, dy/dv}
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape);
  std::vector<T> deriv(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    auto [y, d] = fwd_and_deriv(xv[i]);
    out[i] = y;
    deriv[i] = d;
  }
  std::size_t xid = x.id;
  return x.graph->record(kind, std::move(out), {xid},
                         [xid, deriv = std::move(deriv)](Graph<T>& g, std::span<const T> go) {
                           auto gx = g.grad_of(xid);
                           for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * deriv[i];
                         });
}

/// For each kernel column j, the output columns [lo, hi) whose input column
/// ox * stride + j - pad falls inside [0, width).
inline std::vector<std::pair<std::size_t, std::size_t>> conv_ranges(std::size_t out_w, std::size_t width,
                                                                   std::size_t kw, std::size_t stride,
                                                                   std::size_t pad) {
  std::vector<std::pair<std::size_t, std::size_t>> r(kw);
  for (std::size_t j = 0; j < kw; ++j) {
    std::size_t lo = 0;
    while (lo < out_w && lo * stride + j < pad) ++lo;
    std::size_t hi = lo;
    while (hi < out_w && hi * stride + j - pad < width) ++hi;
    r[j] = {lo, hi};
  }
  return r;
}

}  // namespace detail

/// [m,k] x [k,n] -> [m,n]
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::same_graph(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  require_rank(av.shape, 2, "matmul");
  require_rank(bv.shape, 2, "matmul");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k)
    throw ShapeError("matmul: inner dimensions differ " + to_string(av.shape) + " x " +
                     to_string(bv.shape));
  Tensor<T> out(Shape{m, n});
  MapMat<T>(out.data.data(), m, n).noalias() =
      CMapMat<T>(av.data.data(), m, k) * CMapMat<T>(bv.data.data(), k, n);
  std::size_t aid = a.id, bid = b.id;
  return a.graph->record(OpKind::matmul, std::move(out), {aid, bid},
                         [aid, bid, m, k, n](Graph<T>& g, std::span<const T> go) {
                           CMapMat<T> dc(go.data(), m, n);
                           if (auto ga = g.grad_of(aid); !ga.empty())
                             MapMat<T>(ga.data(), m, k).noalias() +=
                                 dc * CMapMat<T>(g.value(bid).data.data(), k, n).transpose();
                           if (auto gb = g.grad_of(bid); !gb.empty())
                             MapMat<T>(gb.data(), k, n).noalias() +=
                                 CMapMat<T>(g.value(aid).data.data(), m, k).transpose() * dc;
                         });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::same_graph(a, b);
  detail::same_shape("add", a, b);
  Tensor<T> out = a.value();
  out.requires_grad = false;
  out.grad.reset();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  std::size_t aid = a.id, bid = b.id;
  return a.graph->record(OpKind::add, std::move(out), {aid, bid},
                         [aid, bid](Graph<T>& g, std::span<const T> go) {
                           for (std::size_t id : {aid, bid}) {
                             auto gx = g.grad_of(id);
                             for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
                           }
                         });
}

/// Adds `bias` [C] along axis 1 of x [N,C,...].
template <class T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  detail::same_graph(x, bias);
  const auto& xv = x.value();
  const auto& bv = bias.value();
  if (xv.rank() < 2) throw ShapeError("add_bias: input rank must be >= 2");
  require_rank(bv.shape, 1, "add_bias");
  const std::size_t n = xv.dim(0), c = xv.dim(1), inner = xv.size() / (n * c);
  if (bv.dim(0) != c) throw ShapeError("add_bias: bias length differs from channel count");
  Tensor<T> out(xv.shape);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t base = (i * c + j) * inner;
      for (std::size_t k = 0; k < inner; ++k) out[base + k] = xv[base + k] + bv[j];
    }
  std::size_t xid = x.id, bid = bias.id;
  return x.graph->record(OpKind::add_bias, std::move(out), {xid, bid},
                         [xid, bid, n, c, inner](Graph<T>& g, std::span<const T> go) {
                           if (auto gx = g.grad_of(xid); !gx.empty())
                             for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
                           if (auto gb = g.grad_of(bid); !gb.empty())
                             for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t j = 0; j < c; ++j)
                                 gb[j] += Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(
                                              go.data() + (i * c + j) * inner, inner)
                                              .sum();
                         });
}

/// Elementwise product of equally shaped tensors.
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::same_graph(a, b);
  detail::same_shape("mul", a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(av.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  std::size_t aid = a.id, bid = b.id;
  return a.graph->record(OpKind::mul, std::move(out), {aid, bid},
                         [aid, bid](Graph<T>& g, std::span<const T> go) {
                           const auto& av = g.value(aid);
                           const auto& bv = g.value(bid);
                           if (auto ga = g.grad_of(aid); !ga.empty())
                             for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * bv[i];
                           if (auto gb = g.grad_of(bid); !gb.empty())
                             for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i] * av[i];
                         });
}

template <class T>
Var<T> scale(Var<T> x, std::type_identity_t<T> c) {
  return detail::unary(OpKind::scale, x, [c](T v) { return std::pair{v * c, c}; });
}

template <class T>
Var<T> relu(Var<T> x) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T{0} ? xv[i] : T{0};
  std::size_t xid = x.id;
  Var<T> y = x.graph->record(OpKind::relu, std::move(out), {xid}, nullptr);
  if (x.graph->tracked(y.id)) {
    std::size_t yid = y.id;
    x.graph->set_backward(yid, [xid, yid](Graph<T>& g, std::span<const T> go) {
      auto gx = g.grad_of(xid);
      const auto& yv = g.value(yid);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += yv[i] > T{0} ? go[i] : T{0};
    });
  }
  return y;
}

template <class T>
Var<T> exp(Var<T> x) {
  return detail::unary(OpKind::exp, x, [](T v) {
    T e = std::exp(v);
    return std::pair{e, e};
  });
}

template <class T>
Var<T> log(Var<T> x) {
  return detail::unary(OpKind::log, x, [](T v) {
    if (!(v > T{0})) throw std::domain_error("log: non-positive input");
    return std::pair{std::log(v), T{1} / v};
  });
}

/// Elementwise x^p. Non-integer exponents require positive inputs.
template <class T>
Var<T> power(Var<T> x, std::type_identity_t<T> p) {
  const bool integral = std::floor(p) == p;
  return detail::unary(OpKind::power, x, [p, integral](T v) {
    if (!integral && !(v > T{0})) throw std::domain_error("power: non-positive base");
    return std::pair{std::pow(v, p), p * std::pow(v, p - T{1})};
  });
}

template <class T>
Var<T> reshape(Var<T> x, Shape shape) {
  const auto& xv = x.value();
  if (numel(shape) != xv.size())
    throw ShapeError("reshape: " + to_string(xv.shape) + " -> " + to_string(shape));
  Tensor<T> out(std::move(shape), xv.data);
  std::size_t xid = x.id;
  return x.graph->record(OpKind::reshape, std::move(out), {xid},
                         [xid](Graph<T>& g, std::span<const T> go) {
                           auto gx = g.grad_of(xid);
                           for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
                         });
}

template <class T>
Var<T> sum(Var<T> x) {
  const auto& xv = x.value();
  T acc{0};
  for (T v : xv.data) acc += v;
  std::size_t xid = x.id;
  return x.graph->record(OpKind::sum, Tensor<T>::scalar(acc), {xid},
                         [xid](Graph<T>& g, std::span<const T> go) {
                           auto gx = g.grad_of(xid);
                           for (auto& v : gx) v += go[0];
                         });
}

template <class T>
Var<T> mean(Var<T> x) {
  const auto& xv = x.value();
  T acc{0};
  for (T v : xv.data) acc += v;
  const T inv = T{1} / static_cast<T>(xv.size());
  std::size_t xid = x.id;
  return x.graph->record(OpKind::mean, Tensor<T>::scalar(acc * inv), {xid},
                         [xid, inv](Graph<T>& g, std::span<const T> go) {
                           auto gx = g.grad_of(xid);
                           for (auto& v : gx) v += go[0] * inv;
                         });
}

/// Normalizes a 2-D tensor to unit L2 norm along `axis` (1: rows, 0: columns).
template <class T>
Var<T> l2_normalize(Var<T> x, int axis = 1) {
  const auto& xv = x.value();
  require_rank(xv.shape, 2, "l2_normalize");
  if (axis != 0 && axis != 1) throw std::invalid_argument("l2_normalize: axis must be 0 or 1");
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  const std::size_t count = axis == 1 ? rows : cols;
  const std::size_t len = axis == 1 ? cols : rows;
  auto at = [&](std::size_t v, std::size_t e) { return axis == 1 ? v * cols + e : e * cols + v; };
  std::vector<T> norms(count);
  Tensor<T> out(xv.shape);
  for (std::size_t v = 0; v < count; ++v) {
    T ss{0};
    for (std::size_t e = 0; e < len; ++e) ss += xv[at(v, e)] * xv[at(v, e)];
    const T nrm = std::sqrt(ss);
    if (!(nrm > T{0}))
      throw std::domain_error("l2_normalize: zero-norm " + std::string(axis == 1 ? "row " : "column ") +
                              std::to_string(v));
    norms[v] = nrm;
    for (std::size_t e = 0; e < len; ++e) out[at(v, e)] = xv[at(v, e)] / nrm;
  }
  std::size_t xid = x.id;
  Tensor<T> y = out;
  return x.graph->record(
      OpKind::l2_normalize, std::move(out), {xid},
      [xid, axis, cols, count, len, norms = std::move(norms), y = std::move(y)](
          Graph<T>& g, std::span<const T> go) {
        auto gx = g.grad_of(xid);
        auto at = [&](std::size_t v, std::size_t e) { return axis == 1 ? v * cols + e : e * cols + v; };
        for (std::size_t v = 0; v < count; ++v) {
          T dot{0};
          for (std::size_t e = 0; e < len; ++e) dot += y[at(v, e)] * go[at(v, e)];
          for (std::size_t e = 0; e < len; ++e)
            gx[at(v, e)] += (go[at(v, e)] - y[at(v, e)] * dot) / norms[v];
        }
      });
}

template <class T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  explicit BatchNormState(std::size_t d = 1)
      : running_mean(Shape{d}, T{0}), running_var(Shape{d}, T{1}) {}
};

/// Batch normalization over axis 0 of x [N,d]. Train mode normalizes with
/// batch statistics and updates the running estimates; eval mode uses the
/// running estimates.
template <class T>
Var<T> batchnorm(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormState<T>& state, bool train) {
  detail::same_graph(x, gamma);
  detail::same_graph(x, beta);
  const auto& xv = x.value();
  require_rank(xv.shape, 2, "batchnorm");
  const std::size_t n = xv.dim(0), d = xv.dim(1);
  if (gamma.value().size() != d || beta.value().size() != d ||
      state.running_mean.size() != d || state.running_var.size() != d)
    throw ShapeError("batchnorm: parameter length differs from feature dimension");
  if (train && n < 2)
    throw std::invalid_argument("batchnorm: training mode needs batch size >= 2 (variance undefined)");
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  std::vector<T> mu(d, T{0}), invstd(d);
  if (train) {
    std::vector<T> var(d, T{0});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) mu[j] += xv[i * d + j];
    for (auto& m : mu) m /= static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const T c = xv[i * d + j] - mu[j];
        var[j] += c * c;
      }
    for (std::size_t j = 0; j < d; ++j) {
      const T biased = var[j] / static_cast<T>(n);
      invstd[j] = T{1} / std::sqrt(biased + state.eps);
      const T unbiased = var[j] / static_cast<T>(n - 1);
      state.running_mean[j] = (T{1} - state.momentum) * state.running_mean[j] + state.momentum * mu[j];
      state.running_var[j] = (T{1} - state.momentum) * state.running_var[j] + state.momentum * unbiased;
    }
  } else {
    for (std::size_t j = 0; j < d; ++j) {
      mu[j] = state.running_mean[j];
      invstd[j] = T{1} / std::sqrt(state.running_var[j] + state.eps);
    }
  }
  Tensor<T> xhat(xv.shape);
  Tensor<T> out(xv.shape);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const std::size_t k = i * d + j;
      xhat[k] = (xv[k] - mu[j]) * invstd[j];
      out[k] = gv[j] * xhat[k] + bv[j];
    }
  std::size_t xid = x.id, gid = gamma.id, bid = beta.id;
  return x.graph->record(
      OpKind::batchnorm, std::move(out), {xid, gid, bid},
      [xid, gid, bid, n, d, train, invstd = std::move(invstd), xhat = std::move(xhat)](
          Graph<T>& g, std::span<const T> go) {
        const auto& gv = g.value(gid);
        std::vector<T> sum_dy(d, T{0}), sum_dy_xhat(d, T{0});
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) {
            sum_dy[j] += go[i * d + j];
            sum_dy_xhat[j] += go[i * d + j] * xhat[i * d + j];
          }
        if (auto gg = g.grad_of(gid); !gg.empty())
          for (std::size_t j = 0; j < d; ++j) gg[j] += sum_dy_xhat[j];
        if (auto gb = g.grad_of(bid); !gb.empty())
          for (std::size_t j = 0; j < d; ++j) gb[j] += sum_dy[j];
        auto gx = g.grad_of(xid);
        if (gx.empty()) return;
        const T inv_n = T{1} / static_cast<T>(n);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) {
            const std::size_t k = i * d + j;
            if (train)
              gx[k] += gv[j] * invstd[j] * (go[k] - inv_n * sum_dy[j] - xhat[k] * inv_n * sum_dy_xhat[j]);
            else
              gx[k] += gv[j] * invstd[j] * go[k];
          }
      });
}

inline std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (stride < 1) throw std::invalid_argument("convolution stride must be >= 1");
  if (kernel > in + 2 * pad)
    throw ShapeError("kernel " + std::to_string(kernel) + " larger than padded input " +
                     std::to_string(in + 2 * pad));
  return (in + 2 * pad - kernel) / stride + 1;
}

namespace detail {

struct ConvGeometry {
  std::size_t n, c, h, w, k, kh, kw, stride, pad, ho, wo, p, ckk;
  std::size_t chunk;  // samples lowered per GEMM
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
};

template <class T>
ConvGeometry conv_geometry(const Tensor<T>& xv, const Tensor<T>& wv, std::size_t stride, std::size_t pad) {
  require_rank(xv.shape, 4, "conv2d input");
  require_rank(wv.shape, 4, "conv2d kernel");
  ConvGeometry g;
  g.n = xv.dim(0), g.c = xv.dim(1), g.h = xv.dim(2), g.w = xv.dim(3);
  g.k = wv.dim(0), g.kh = wv.dim(2), g.kw = wv.dim(3);
  if (wv.dim(1) != g.c)
    throw ShapeError("conv2d: input has " + std::to_string(g.c) + " channels, kernel expects " +
                     std::to_string(wv.dim(1)));
  g.stride = stride, g.pad = pad;
  g.ho = conv_out_size(g.h, g.kh, stride, pad);
  g.wo = conv_out_size(g.w, g.kw, stride, pad);
  g.p = g.ho * g.wo, g.ckk = g.c * g.kh * g.kw;
  // Keep each patch matrix around 512 KiB so it stays in cache between the
  // copy and the GEMM.
  g.chunk = std::clamp<std::size_t>((std::size_t{512} << 10) / (g.ckk * g.p * sizeof(T)), 1, g.n);
  g.ranges = conv_ranges(g.wo, g.w, g.kw, stride, pad);
  return g;
}

/// Patch matrix [C*kh*kw, nb*P] of samples [b0, b0+nb); padding written as
/// zero.
template <class T>
void im2col(const T* x, const ConvGeometry& g, std::size_t b0, std::size_t nb, T* col) {
  const std::size_t cols = nb * g.p;
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t ci = 0; ci < g.c; ++ci) {
      const T* src = x + ((b0 + b) * g.c + ci) * g.h * g.w;
      for (std::size_t i = 0; i < g.kh; ++i)
        for (std::size_t j = 0; j < g.kw; ++j) {
          T* row = col + ((ci * g.kh + i) * g.kw + j) * cols + b * g.p;
          const auto [lo, hi] = g.ranges[j];
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            T* dst = row + oy * g.wo;
            const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.h)) {
              std::fill_n(dst, g.wo, T{0});
              continue;
            }
            std::fill_n(dst, lo, T{0});
            const T* srow = src + iy * g.w + j - g.pad;  // indexed by ox * stride, valid on [lo, hi)
            if (g.stride == 1)
              std::copy(srow + lo, srow + hi, dst + lo);
            else
              for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = srow[ox * g.stride];
            std::fill(dst + hi, dst + g.wo, T{0});
          }
        }
    }
}

/// Scatter-adds a patch-matrix gradient of samples [b0, b0+nb) onto gx.
template <class T>
void col2im_add(const T* dcol, const ConvGeometry& g, std::size_t b0, std::size_t nb, T* gx) {
  const std::size_t cols = nb * g.p;
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t ci = 0; ci < g.c; ++ci) {
      T* dst = gx + ((b0 + b) * g.c + ci) * g.h * g.w;
      for (std::size_t i = 0; i < g.kh; ++i)
        for (std::size_t j = 0; j < g.kw; ++j) {
          const T* row = dcol + ((ci * g.kh + i) * g.kw + j) * cols + b * g.p;
          const auto [lo, hi] = g.ranges[j];
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            const T* src = row + oy * g.wo;
            T* drow = dst + iy * g.w + j - g.pad;
            for (std::size_t ox = lo; ox < hi; ++ox) drow[ox * g.stride] += src[ox];
          }
        }
    }
}

/// out = [relu](conv(x, w) [+ bias]) in NCHW.
template <class T>
Tensor<T> conv_forward(const Tensor<T>& xv, const Tensor<T>& wv, const Tensor<T>* bias, bool relu,
                       const ConvGeometry& g) {
  Tensor<T> out(Shape{g.n, g.k, g.ho, g.wo});
  CMapMat<T> kernel(wv.data.data(), g.k, g.ckk);
  RowMat<T> col(g.ckk, g.chunk * g.p), prod(g.k, g.chunk * g.p);
  for (std::size_t b0 = 0; b0 < g.n; b0 += g.chunk) {
    const std::size_t nb = std::min(g.chunk, g.n - b0), cols = nb * g.p;
    im2col(xv.data.data(), g, b0, nb, col.data());
    MapMat<T>(prod.data(), g.k, cols).noalias() = kernel * CMapMat<T>(col.data(), g.ckk, cols);
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t ki = 0; ki < g.k; ++ki) {
        const T* src = prod.data() + ki * cols + b * g.p;
        T* dst = out.data.data() + ((b0 + b) * g.k + ki) * g.p;
        const T shift = bias ? (*bias)[ki] : T{0};
        if (relu)
          for (std::size_t q = 0; q < g.p; ++q) dst[q] = std::max(src[q] + shift, T{0});
        else
          for (std::size_t q = 0; q < g.p; ++q) dst[q] = src[q] + shift;
      }
  }
  return out;
}

/// Backward of conv_forward. `relu_out`, when given, is the forward output
/// whose positive entries pass the gradient.
template <class T>
void conv_backward(Graph<T>& graph, std::size_t xid, std::size_t wid, std::optional<std::size_t> bid,
                   std::span<const T> go, const Tensor<T>* relu_out, const ConvGeometry& g) {
  auto gw = graph.grad_of(wid);
  auto gx = graph.grad_of(xid);
  std::span<T> gb = bid ? graph.grad_of(*bid) : std::span<T>{};
  const T* x = graph.value(xid).data.data();
  CMapMat<T> kernel(graph.value(wid).data.data(), g.k, g.ckk);
  RowMat<T> col(g.ckk, g.chunk * g.p), dout(g.k, g.chunk * g.p), dcol(g.ckk, g.chunk * g.p);
  for (std::size_t b0 = 0; b0 < g.n; b0 += g.chunk) {
    const std::size_t nb = std::min(g.chunk, g.n - b0), cols = nb * g.p;
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t ki = 0; ki < g.k; ++ki) {
        const std::size_t off = ((b0 + b) * g.k + ki) * g.p;
        T* dst = dout.data() + ki * cols + b * g.p;
        if (relu_out)
          for (std::size_t q = 0; q < g.p; ++q) dst[q] = (*relu_out)[off + q] > T{0} ? go[off + q] : T{0};
        else
          std::copy_n(go.data() + off, g.p, dst);
      }
    CMapMat<T> d(dout.data(), g.k, cols);
    if (!gb.empty())
      for (std::size_t ki = 0; ki < g.k; ++ki) gb[ki] += d.row(static_cast<Eigen::Index>(ki)).sum();
    if (!gw.empty()) {
      im2col(x, g, b0, nb, col.data());
      MapMat<T>(gw.data(), g.k, g.ckk).noalias() += d * CMapMat<T>(col.data(), g.ckk, cols).transpose();
    }
    if (!gx.empty()) {
      MapMat<T>(dcol.data(), g.ckk, cols).noalias() = kernel.transpose() * d;
      col2im_add(dcol.data(), g, b0, nb, gx.data());
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation of x [N,C,H,W] with kernel [K,C,kh,kw], lowered to
/// GEMMs over cache-sized groups of samples.
template <class T>
Var<T> conv2d(Var<T> x, Var<T> kernel, std::size_t stride = 1, std::size_t pad = 0) {
  detail::same_graph(x, kernel);
  const auto geom = detail::conv_geometry(x.value(), kernel.value(), stride, pad);
  Tensor<T> out = detail::conv_forward(x.value(), kernel.value(), static_cast<const Tensor<T>*>(nullptr),
                                       /*relu=*/false, geom);
  std::size_t xid = x.id, wid = kernel.id;
  return x.graph->record(OpKind::conv2d, std::move(out), {xid, wid},
                         [=](Graph<T>& g, std::span<const T> go) {
                           detail::conv_backward(g, xid, wid, std::nullopt, go, static_cast<const Tensor<T>*>(nullptr), geom);
                         });
}

namespace detail {

/// Geometry of a channels-last convolution: x [N,H,W,C], kernel [K,C,kh,kw].
struct NhwcGeometry {
  std::size_t n, h, w, c, k, kh, kw, stride, pad, ho, wo, p, ckk, chunk;
};

template <class T>
NhwcGeometry nhwc_geometry(const Tensor<T>& xv, const Tensor<T>& wv, std::size_t stride, std::size_t pad) {
  require_rank(xv.shape, 4, "channels-last conv input");
  require_rank(wv.shape, 4, "conv kernel");
  NhwcGeometry g;
  g.n = xv.dim(0), g.h = xv.dim(1), g.w = xv.dim(2), g.c = xv.dim(3);
  g.k = wv.dim(0), g.kh = wv.dim(2), g.kw = wv.dim(3);
  if (wv.dim(1) != g.c)
    throw ShapeError("conv: input has " + std::to_string(g.c) + " channels, kernel expects " +
                     std::to_string(wv.dim(1)));
  g.stride = stride, g.pad = pad;
  g.ho = conv_out_size(g.h, g.kh, stride, pad);
  g.wo = conv_out_size(g.w, g.kw, stride, pad);
  g.p = g.ho * g.wo, g.ckk = g.c * g.kh * g.kw;
  g.chunk = std::clamp<std::size_t>((std::size_t{512} << 10) / (g.ckk * g.p * sizeof(T)), 1, g.n);
  return g;
}

/// Patch rows [nb*P, kh*kw*C] of samples [b0, b0+nb), taps ordered (i, j, c).
/// For fixed (oy, ox, i) the kw taps are one contiguous run of kw*C values
/// unless the window hangs over the left or right edge.
template <class T>
void im2row(const T* x, const NhwcGeometry& g, std::size_t b0, std::size_t nb, T* rows) {
  const std::size_t run = g.kw * g.c;
  for (std::size_t b = 0; b < nb; ++b) {
    const T* img = x + (b0 + b) * g.h * g.w * g.c;
    for (std::size_t oy = 0; oy < g.ho; ++oy)
      for (std::size_t ox = 0; ox < g.wo; ++ox) {
        T* dst = rows + ((b * g.ho + oy) * g.wo + ox) * g.ckk;
        const long ix0 = static_cast<long>(ox * g.stride) - static_cast<long>(g.pad);
        const bool inside = ix0 >= 0 && ix0 + static_cast<long>(g.kw) <= static_cast<long>(g.w);
        for (std::size_t i = 0; i < g.kh; ++i, dst += run) {
          const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            for (std::size_t e = 0; e < run; ++e) dst[e] = T{0};
            continue;
          }
          const T* src_row = img + static_cast<std::size_t>(iy) * g.w * g.c;
          if (inside) {
            const T* src = src_row + static_cast<std::size_t>(ix0) * g.c;
            for (std::size_t e = 0; e < run; ++e) dst[e] = src[e];
            continue;
          }
          for (std::size_t j = 0; j < g.kw; ++j) {
            const long ix = ix0 + static_cast<long>(j);
            T* d = dst + j * g.c;
            if (ix < 0 || ix >= static_cast<long>(g.w))
              for (std::size_t ci = 0; ci < g.c; ++ci) d[ci] = T{0};
            else
              for (std::size_t ci = 0; ci < g.c; ++ci) d[ci] = src_row[static_cast<std::size_t>(ix) * g.c + ci];
          }
        }
      }
  }
}

template <class T>
void row2im_add(const T* rows, const NhwcGeometry& g, std::size_t b0, std::size_t nb, T* gx) {
  const std::size_t run = g.kw * g.c;
  for (std::size_t b = 0; b < nb; ++b) {
    T* img = gx + (b0 + b) * g.h * g.w * g.c;
    for (std::size_t oy = 0; oy < g.ho; ++oy)
      for (std::size_t ox = 0; ox < g.wo; ++ox) {
        const T* src = rows + ((b * g.ho + oy) * g.wo + ox) * g.ckk;
        const long ix0 = static_cast<long>(ox * g.stride) - static_cast<long>(g.pad);
        const bool inside = ix0 >= 0 && ix0 + static_cast<long>(g.kw) <= static_cast<long>(g.w);
        for (std::size_t i = 0; i < g.kh; ++i, src += run) {
          const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          T* dst_row = img + static_cast<std::size_t>(iy) * g.w * g.c;
          if (inside) {
            T* dst = dst_row + static_cast<std::size_t>(ix0) * g.c;
            for (std::size_t e = 0; e < run; ++e) dst[e] += src[e];
            continue;
          }
          for (std::size_t j = 0; j < g.kw; ++j) {
            const long ix = ix0 + static_cast<long>(j);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            T* dst = dst_row + static_cast<std::size_t>(ix) * g.c;
            for (std::size_t ci = 0; ci < g.c; ++ci) dst[ci] += src[j * g.c + ci];
          }
        }
      }
  }
}

/// Kernel [K,C,kh,kw] -> [K, kh*kw*C] with taps ordered (i, j, c).
template <class T>
RowMat<T> kernel_to_taps(const Tensor<T>& wv, const NhwcGeometry& g) {
  RowMat<T> r(g.k, g.ckk);
  for (std::size_t ki = 0; ki < g.k; ++ki)
    for (std::size_t ci = 0; ci < g.c; ++ci)
      for (std::size_t i = 0; i < g.kh; ++i)
        for (std::size_t j = 0; j < g.kw; ++j)
          r(ki, (i * g.kw + j) * g.c + ci) = wv[((ki * g.c + ci) * g.kh + i) * g.kw + j];
  return r;
}

/// Single input channel: the patch row is only kh*kw values, too short for
/// a GEMM to pay off, so walk the window directly with the K outputs as one
/// vector. `taps_t` is [kh*kw, K].
template <class T, int KS = Eigen::Dynamic>
void conv1_forward(const T* x, const NhwcGeometry& g, const T* taps_t, const T* bias, T* out) {
  if constexpr (KS == Eigen::Dynamic) {
    // A compile-time width keeps the accumulator in registers.
    switch (g.k) {
      case 8: return conv1_forward<T, 8>(x, g, taps_t, bias, out);
      case 16: return conv1_forward<T, 16>(x, g, taps_t, bias, out);
      case 32: return conv1_forward<T, 32>(x, g, taps_t, bias, out);
      default: break;
    }
  }
  using Vec = Eigen::Array<T, KS, 1>;
  const auto kn = static_cast<Eigen::Index>(g.k);
  const Eigen::Map<const Vec> bv(bias, kn);
  Vec acc(kn);
  for (std::size_t b = 0; b < g.n; ++b) {
    const T* img = x + b * g.h * g.w;
    for (std::size_t oy = 0; oy < g.ho; ++oy)
      for (std::size_t ox = 0; ox < g.wo; ++ox) {
        acc.setZero();
        for (std::size_t i = 0; i < g.kh; ++i) {
          const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t j = 0; j < g.kw; ++j) {
            const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            const T xv = img[static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)];
            acc += xv * Eigen::Map<const Vec>(taps_t + (i * g.kw + j) * g.k, kn);
          }
        }
        Eigen::Map<Vec>(out + ((b * g.ho + oy) * g.wo + ox) * g.k, kn) = (acc + bv).max(T{0});
      }
  }
}

/// Kernel gradient for the single-channel case, accumulated into [kh*kw, K].
template <class T, int KS = Eigen::Dynamic>
void conv1_kernel_grad(const T* x, const NhwcGeometry& g, const T* dout, std::size_t b0, std::size_t nb, T* dtaps_t) {
  if constexpr (KS == Eigen::Dynamic) {
    switch (g.k) {
      case 8: return conv1_kernel_grad<T, 8>(x, g, dout, b0, nb, dtaps_t);
      case 16: return conv1_kernel_grad<T, 16>(x, g, dout, b0, nb, dtaps_t);
      case 32: return conv1_kernel_grad<T, 32>(x, g, dout, b0, nb, dtaps_t);
      default: break;
    }
  }
  using Vec = Eigen::Array<T, KS, 1>;
  const auto kn = static_cast<Eigen::Index>(g.k);
  for (std::size_t b = 0; b < nb; ++b) {
    const T* img = x + (b0 + b) * g.h * g.w;
    for (std::size_t oy = 0; oy < g.ho; ++oy)
      for (std::size_t ox = 0; ox < g.wo; ++ox) {
        const Eigen::Map<const Vec> d(dout + ((b * g.ho + oy) * g.wo + ox) * g.k, kn);
        for (std::size_t i = 0; i < g.kh; ++i) {
          const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t j = 0; j < g.kw; ++j) {
            const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            const T xv = img[static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)];
            Eigen::Map<Vec>(dtaps_t + (i * g.kw + j) * g.k, kn) += xv * d;
          }
        }
      }
  }
}

}  // namespace detail

/// relu(conv(x, kernel) + bias) on channels-last tensors: x [N,H,W,C],
/// kernel [K,C,kh,kw], bias [K] -> [N,H',W',K]. One node, no intermediate
/// pre-activation buffer.
template <class T>
Var<T> conv_bias_relu(Var<T> x, Var<T> kernel, Var<T> bias, std::size_t stride = 1, std::size_t pad = 0) {
  detail::same_graph(x, kernel);
  detail::same_graph(x, bias);
  const auto g = detail::nhwc_geometry(x.value(), kernel.value(), stride, pad);
  const auto& bv = bias.value();
  if (bv.shape != Shape{g.k})
    throw ShapeError("conv_bias_relu: bias shape " + to_string(bv.shape) + " for " + std::to_string(g.k) +
                     " output channels");
  const RowMat<T> taps = detail::kernel_to_taps(kernel.value(), g);
  Tensor<T> out(Shape{g.n, g.ho, g.wo, g.k});
  const T* xd = x.value().data.data();
  if (g.c == 1) {
    const RowMat<T> taps_t = taps.transpose();
    detail::conv1_forward(xd, g, taps_t.data(), bv.data.data(), out.data.data());
  }
  // Patch rows are kept for the kernel gradient when one will be needed.
  const bool keep_rows = g.c != 1 && x.graph->tracked(kernel.id);
  auto saved = std::make_shared<std::vector<T>>();
  std::vector<T> scratch;
  if (keep_rows) saved->resize(g.n * g.p * g.ckk);
  else if (g.c != 1) scratch.resize(g.chunk * g.p * g.ckk);
  for (std::size_t b0 = 0; g.c != 1 && b0 < g.n; b0 += g.chunk) {
    const std::size_t nb = std::min(g.chunk, g.n - b0), m = nb * g.p;
    T* rows = keep_rows ? saved->data() + b0 * g.p * g.ckk : scratch.data();
    detail::im2row(xd, g, b0, nb, rows);
    MapMat<T> o(out.data.data() + b0 * g.p * g.k, m, g.k);
    o.noalias() = CMapMat<T>(rows, m, g.ckk) * taps.transpose();
    for (std::size_t r = 0; r < m; ++r) {
      T* v = o.data() + r * g.k;
      for (std::size_t ki = 0; ki < g.k; ++ki) v[ki] = std::max(v[ki] + bv[ki], T{0});
    }
  }
  std::size_t xid = x.id, wid = kernel.id, bid = bias.id;
  Var<T> y = x.graph->record(OpKind::conv_bias_relu, std::move(out), {xid, wid, bid}, nullptr);
  std::size_t yid = y.id;
  x.graph->set_backward(yid, [=](Graph<T>& gr, std::span<const T> go) {
    const auto& yv = gr.value(yid);
    auto gx = gr.grad_of(xid);
    auto gw = gr.grad_of(wid);
    auto gb = gr.grad_of(bid);
    const RowMat<T> taps = detail::kernel_to_taps(gr.value(wid), g);
    RowMat<T> dtaps = RowMat<T>::Zero(g.k, g.ckk);
    RowMat<T> dtaps_t = RowMat<T>::Zero(g.c == 1 ? g.ckk : 0, g.k);
    RowMat<T> rows(saved->empty() ? g.chunk * g.p : 0, g.ckk), drows(g.chunk * g.p, g.ckk), dout(g.chunk * g.p, g.k);
    const T* xd = gr.value(xid).data.data();
    for (std::size_t b0 = 0; b0 < g.n; b0 += g.chunk) {
      const std::size_t nb = std::min(g.chunk, g.n - b0), m = nb * g.p, off = b0 * g.p * g.k;
      for (std::size_t e = 0; e < m * g.k; ++e) dout.data()[e] = yv[off + e] > T{0} ? go[off + e] : T{0};
      CMapMat<T> d(dout.data(), m, g.k);
      if (!gb.empty())
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t ki = 0; ki < g.k; ++ki) gb[ki] += dout.data()[r * g.k + ki];
      if (!gw.empty() && g.c == 1) {
        detail::conv1_kernel_grad(xd, g, dout.data(), b0, nb, dtaps_t.data());
      } else if (!gw.empty()) {
        const T* r = rows.data();
        if (saved->empty())
          detail::im2row(xd, g, b0, nb, rows.data());
        else
          r = saved->data() + b0 * g.p * g.ckk;
        dtaps.noalias() += d.transpose() * CMapMat<T>(r, m, g.ckk);
      }
      if (!gx.empty()) {
        MapMat<T>(drows.data(), m, g.ckk).noalias() = d * taps;
        detail::row2im_add(drows.data(), g, b0, nb, gx.data());
      }
    }
    if (g.c == 1) dtaps = dtaps_t.transpose();
    if (!gw.empty())
      for (std::size_t ki = 0; ki < g.k; ++ki)
        for (std::size_t ci = 0; ci < g.c; ++ci)
          for (std::size_t i = 0; i < g.kh; ++i)
            for (std::size_t j = 0; j < g.kw; ++j)
              gw[((ki * g.c + ci) * g.kh + i) * g.kw + j] += dtaps(ki, (i * g.kw + j) * g.c + ci);
  });
  return y;
}

/// Channels-last [N,H,W,C] -> channels-first [N,C,H,W].
template <class T>
Var<T> nhwc_to_nchw(Var<T> x) {
  const auto& xv = x.value();
  require_rank(xv.shape, 4, "nhwc_to_nchw");
  const std::size_t n = xv.dim(0), hw = xv.dim(1) * xv.dim(2), c = xv.dim(3);
  Tensor<T> out(Shape{n, c, xv.dim(1), xv.dim(2)});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t q = 0; q < hw; ++q)
      for (std::size_t ci = 0; ci < c; ++ci) out[(b * c + ci) * hw + q] = xv[(b * hw + q) * c + ci];
  std::size_t xid = x.id;
  return x.graph->record(OpKind::permute, std::move(out), {xid}, [=](Graph<T>& g, std::span<const T> go) {
    auto gx = g.grad_of(xid);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t q = 0; q < hw; ++q)
        for (std::size_t ci = 0; ci < c; ++ci) gx[(b * hw + q) * c + ci] += go[(b * c + ci) * hw + q];
  });
}

/// Max pooling over windows of size `window` (no padding). Ties resolve to the
/// first position in row-major window order.
template <class T>
Var<T> max_pool(Var<T> x, std::size_t window = 2, std::size_t stride = 2) {
  const auto& xv = x.value();
  require_rank(xv.shape, 4, "max_pool");
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::size_t ho = conv_out_size(h, window, stride, 0);
  const std::size_t wo = conv_out_size(w, window, stride, 0);
  Tensor<T> out(Shape{n, c, ho, wo});
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t plane = 0; plane < n * c; ++plane)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = plane * h * w + oy * stride * w + ox * stride;
        for (std::size_t i = 0; i < window; ++i)
          for (std::size_t j = 0; j < window; ++j) {
            const std::size_t idx = plane * h * w + (oy * stride + i) * w + ox * stride + j;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (plane * ho + oy) * wo + ox;
        out[o] = xv[best];
        argmax[o] = best;
      }
  std::size_t xid = x.id;
  return x.graph->record(OpKind::max_pool, std::move(out), {xid},
                         [xid, argmax = std::move(argmax)](Graph<T>& g, std::span<const T> go) {
                           auto gx = g.grad_of(xid);
                           for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += go[o];
                         });
}

/// Generalized-mean pooling of x [N,C,H,W] with a per-channel exponent p [C]:
///   f = (mean_hw max(x, eps)^p)^(1/p)
/// Differentiable in both x and p. Inputs must be nonnegative. The mean is
/// taken over (z / max z)^p so large exponents do not overflow.
template <class T>
Var<T> gem_pool(Var<T> x, Var<T> p, std::type_identity_t<T> eps = T(1e-6)) {
  detail::same_graph(x, p);
  const auto& xv = x.value();
  const auto& pv = p.value();
  require_rank(xv.shape, 4, "gem_pool");
  const std::size_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  if (pv.size() != c) throw ShapeError("gem_pool: exponent length differs from channel count");
  for (T v : xv.data)
    if (v < T{0}) throw std::domain_error("gem_pool: negative activation");
  for (T v : pv.data)
    if (!(v > T{0})) throw std::domain_error("gem_pool: exponent must be positive");
  Tensor<T> out(Shape{n, c});
  std::vector<T> peak(n * c), ratio_mean(n * c);
  std::vector<T> ratio_pow(xv.size());  // (z / peak)^p, reused by backward
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t o = b * c + ch;
      const T* z = xv.data.data() + o * hw;
      T* rp = ratio_pow.data() + o * hw;
      const T pk = pv[ch];
      T mx = eps;
      for (std::size_t i = 0; i < hw; ++i) mx = std::max(mx, z[i]);
      T acc{0};
      for (std::size_t i = 0; i < hw; ++i) {
        rp[i] = std::pow(std::max(z[i], eps) / mx, pk);
        acc += rp[i];
      }
      peak[o] = mx;
      ratio_mean[o] = acc / static_cast<T>(hw);
      out[o] = mx * std::pow(ratio_mean[o], T{1} / pk);
    }
  std::size_t xid = x.id, pid = p.id;
  Tensor<T> f = out;
  return x.graph->record(
      OpKind::gem_pool, std::move(out), {xid, pid},
      [=, peak = std::move(peak), ratio_mean = std::move(ratio_mean), ratio_pow = std::move(ratio_pow),
       f = std::move(f)](Graph<T>& g, std::span<const T> go) {
        const auto& xv = g.value(xid);
        const auto& pv = g.value(pid);
        auto gx = g.grad_of(xid);
        auto gp = g.grad_of(pid);
        const T inv_hw = T{1} / static_cast<T>(hw);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t o = b * c + ch;
            const T pk = pv[ch], mr = ratio_mean[o], fo = f[o], gout = go[o];
            const T* z = xv.data.data() + o * hw;
            const T* rp = ratio_pow.data() + o * hw;
            if (!gx.empty()) {
              // d f / d x_i = f * r_i / (x_i * mean r * |Z|), zero below the floor
              const T coef = gout * fo / mr * inv_hw;
              T* dz = gx.data() + o * hw;
              for (std::size_t i = 0; i < hw; ++i)
                if (z[i] > eps) dz[i] += coef * rp[i] / z[i];
            }
            if (!gp.empty()) {
              // d f / d p = f / p * (E_r[log z] - log peak - log(mean r) / p)
              T acc{0};
              for (std::size_t i = 0; i < hw; ++i) acc += rp[i] * std::log(std::max(z[i], eps));
              const T wlog = acc * inv_hw / mr;
              gp[ch] += gout * fo / pk * (wlog - std::log(peak[o]) - std::log(mr) / pk);
            }
          }
      });
}

/// Mean softmax cross-entropy of logits [N,C] against integer labels.
template <class T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> labels) {
  const auto& lv = logits.value();
  require_rank(lv.shape, 2, "cross_entropy");
  const std::size_t n = lv.dim(0), c = lv.dim(1);
  if (labels.size() != n) throw ShapeError("cross_entropy: label count differs from batch size");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(c) + ")");
  std::vector<T> prob(n * c);
  T total{0};
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = lv.data.data() + i * c;
    const T mx = *std::max_element(row, row + c);
    T z{0};
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const T logz = std::log(z) + mx;
    for (std::size_t j = 0; j < c; ++j) prob[i * c + j] = std::exp(row[j] - logz);
    total += logz - row[labels[i]];
  }
  std::vector<int> lab(labels.begin(), labels.end());
  std::size_t lid = logits.id;
  return logits.graph->record(
      OpKind::cross_entropy, Tensor<T>::scalar(total / static_cast<T>(n)), {lid},
      [lid, n, c, prob = std::move(prob), lab = std::move(lab)](Graph<T>& g, std::span<const T> go) {
        auto gl = g.grad_of(lid);
        const T s = go[0] / static_cast<T>(n);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j)
            gl[i * c + j] += s * (prob[i * c + j] - (static_cast<int>(j) == lab[i] ? T{1} : T{0}));
      });
}

/// Angular-margin logits from a cosine matrix [N,C]: the target column becomes
/// s*cos(theta + margin), every other column s*cos(theta). cos(theta + margin)
/// is expanded as c*cos(m) - sin(theta)*sin(m) with sin(theta) taken from c
/// clamped to [-1+1e-7, 1-1e-7].
template <class T>
Var<T> arcface_margin(Var<T> cosines, std::span<const int> labels, std::type_identity_t<T> s,
                      std::type_identity_t<T> margin) {
  const auto& cv = cosines.value();
  require_rank(cv.shape, 2, "arcface_margin");
  const std::size_t n = cv.dim(0), c = cv.dim(1);
  if (labels.size() != n) throw ShapeError("arcface_margin: label count differs from batch size");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      throw std::out_of_range("arcface_margin: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(c) + ")");
  const T cos_m = std::cos(margin), sin_m = std::sin(margin);
  const T lim = T{1} - T(1e-7);
  Tensor<T> out(cv.shape);
  std::vector<T> target_deriv(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = s * cv[i * c + j];
    const std::size_t t = i * c + static_cast<std::size_t>(labels[i]);
    const T ct = cv[t];
    const T cc = std::clamp(ct, -lim, lim);
    const T sin_t = std::sqrt(T{1} - cc * cc);
    out[t] = s * (ct * cos_m - sin_t * sin_m);
    // d/dc of the sine term vanishes where the clamp is active.
    const T dsin = (ct > -lim && ct < lim) ? cc / sin_t : T{0};
    target_deriv[i] = s * (cos_m + dsin * sin_m);
  }
  std::vector<int> lab(labels.begin(), labels.end());
  std::size_t cid = cosines.id;
  return cosines.graph->record(
      OpKind::arcface_margin, std::move(out), {cid},
      [cid, n, c, s, lab = std::move(lab), target_deriv = std::move(target_deriv)](
          Graph<T>& g, std::span<const T> go) {
        auto gc = g.grad_of(cid);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const std::size_t k = i * c + j;
            gc[k] += go[k] * (static_cast<int>(j) == lab[i] ? target_deriv[i] : s);
          }
      });
}

}  // namespace patentret
