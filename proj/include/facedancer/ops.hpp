// SPDX-License-Identifier: Apache-2.0
//
// Differentiable tensor operations. Linear operators come in adjoint pairs
// (conv / conv input-grad / conv weight-grad, pool / pool adjoint, resize /
// resize adjoint, slice / pad, gather / scatter, reduce / broadcast) so that
// each backward rule is expressible with recorded operations.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <memory>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "facedancer/autodiff.hpp"

namespace facedancer {

struct ConvGeom {
  int stride = 1;
  int pad = 0;
};

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw ShapeMismatch(std::string(op) + ": shapes " + to_string(a) + " and " + to_string(b));
}

inline void require_rank(const Shape& s, std::size_t r, const char* op) {
  if (s.size() != r)
    throw ShapeMismatch(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                        to_string(s));
}

struct ConvDims {
  std::int64_t n, c, h, w, o, kh, kw, ho, wo;
  int stride, pad;
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
  std::int64_t ckk() const { return c * kh * kw; }
  std::int64_t hw_out() const { return ho * wo; }
};

inline ConvDims conv_dims(const Shape& in, const Shape& w, ConvGeom g) {
  require_rank(in, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  if (in[1] != w[1])
    throw ShapeMismatch("conv2d: input channels " + std::to_string(in[1]) +
                        " vs weight " + to_string(w));
  ConvDims d{in[0], in[1], in[2], in[3], w[0], w[2], w[3], 0, 0, g.stride, g.pad};
  d.ho = (d.h + 2 * g.pad - d.kh) / g.stride + 1;
  d.wo = (d.w + 2 * g.pad - d.kw) / g.stride + 1;
  if (d.ho <= 0 || d.wo <= 0) throw ShapeMismatch("conv2d: empty output for " + to_string(in));
  return d;
}

// Output columns [lo, hi) read in-bounds input for kernel offset k.
inline std::pair<std::int64_t, std::int64_t> valid_cols(const ConvDims& d, std::int64_t k) {
  const std::int64_t off = k - d.pad;
  std::int64_t lo = off >= 0 ? 0 : (-off + d.stride - 1) / d.stride;
  std::int64_t hi = d.w - off <= 0 ? 0 : (d.w - off + d.stride - 1) / d.stride;
  hi = std::min(hi, d.wo);
  lo = std::min(lo, hi);
  return {lo, hi};
}

template <typename T>
void im2col(const T* x, const ConvDims& d, T* col) {
  const std::int64_t hw = d.hw_out();
  for (std::int64_t c = 0; c < d.c; ++c)
    for (std::int64_t ky = 0; ky < d.kh; ++ky)
      for (std::int64_t kx = 0; kx < d.kw; ++kx) {
        T* row = col + ((c * d.kh + ky) * d.kw + kx) * hw;
        const T* plane = x + c * d.h * d.w;
        const auto [lo, hi] = valid_cols(d, kx);
        const std::int64_t off = kx - d.pad;
        for (std::int64_t oy = 0; oy < d.ho; ++oy) {
          const std::int64_t iy = oy * d.stride - d.pad + ky;
          T* dst = row + oy * d.wo;
          if (iy < 0 || iy >= d.h) {
            std::fill(dst, dst + d.wo, T(0));
            continue;
          }
          const T* src = plane + iy * d.w + off;
          std::fill(dst, dst + lo, T(0));
          if (d.stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * d.stride];
          }
          std::fill(dst + hi, dst + d.wo, T(0));
        }
      }
}

template <typename T>
void col2im(const T* col, const ConvDims& d, T* x) {
  const std::int64_t hw = d.hw_out();
  for (std::int64_t c = 0; c < d.c; ++c)
    for (std::int64_t ky = 0; ky < d.kh; ++ky)
      for (std::int64_t kx = 0; kx < d.kw; ++kx) {
        const T* row = col + ((c * d.kh + ky) * d.kw + kx) * hw;
        T* plane = x + c * d.h * d.w;
        const auto [lo, hi] = valid_cols(d, kx);
        const std::int64_t off = kx - d.pad;
        for (std::int64_t oy = 0; oy < d.ho; ++oy) {
          const std::int64_t iy = oy * d.stride - d.pad + ky;
          if (iy < 0 || iy >= d.h) continue;
          const T* src = row + oy * d.wo;
          T* dst = plane + iy * d.w + off;
          if (d.stride == 1) {
            for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox] += src[ox];
          } else {
            for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox * d.stride] += src[ox];
          }
        }
      }
}

template <typename T>
Tensor<T> conv_forward(const Tensor<T>& x, const Tensor<T>& w, ConvGeom g) {
  const ConvDims d = conv_dims(x.shape(), w.shape(), g);
  Tensor<T> out(Shape{d.n, d.o, d.ho, d.wo});
  CMatMap<T> wm(w.data(), d.o, d.ckk());
  std::vector<T> col(d.pointwise() ? 0 : static_cast<std::size_t>(d.ckk() * d.hw_out()));
  for (std::int64_t n = 0; n < d.n; ++n) {
    const T* xn = x.data() + n * d.c * d.h * d.w;
    const T* cp = xn;
    if (!d.pointwise()) {
      im2col(xn, d, col.data());
      cp = col.data();
    }
    MatMap<T>(out.data() + n * d.o * d.hw_out(), d.o, d.hw_out()).noalias() =
        wm * CMatMap<T>(cp, d.ckk(), d.hw_out());
  }
  return out;
}

template <typename T>
Tensor<T> conv_input_grad(const Tensor<T>& g, const Tensor<T>& w, const Shape& in_shape,
                          ConvGeom geom) {
  const ConvDims d = conv_dims(in_shape, w.shape(), geom);
  require_same_shape(g.shape(), Shape{d.n, d.o, d.ho, d.wo}, "conv2d input-grad");
  Tensor<T> dx(in_shape);
  CMatMap<T> wm(w.data(), d.o, d.ckk());
  std::vector<T> col(d.pointwise() ? 0 : static_cast<std::size_t>(d.ckk() * d.hw_out()));
  for (std::int64_t n = 0; n < d.n; ++n) {
    CMatMap<T> gn(g.data() + n * d.o * d.hw_out(), d.o, d.hw_out());
    T* dxn = dx.data() + n * d.c * d.h * d.w;
    if (d.pointwise()) {
      MatMap<T>(dxn, d.c, d.hw_out()).noalias() = wm.transpose() * gn;
    } else {
      MatMap<T>(col.data(), d.ckk(), d.hw_out()).noalias() = wm.transpose() * gn;
      col2im(col.data(), d, dxn);
    }
  }
  return dx;
}

template <typename T>
Tensor<T> conv_weight_grad(const Tensor<T>& x, const Tensor<T>& g, const Shape& w_shape,
                           ConvGeom geom) {
  const ConvDims d = conv_dims(x.shape(), w_shape, geom);
  require_same_shape(g.shape(), Shape{d.n, d.o, d.ho, d.wo}, "conv2d weight-grad");
  Tensor<T> dw(w_shape);
  MatMap<T> dwm(dw.data(), d.o, d.ckk());
  std::vector<T> col(d.pointwise() ? 0 : static_cast<std::size_t>(d.ckk() * d.hw_out()));
  for (std::int64_t n = 0; n < d.n; ++n) {
    const T* xn = x.data() + n * d.c * d.h * d.w;
    const T* cp = xn;
    if (!d.pointwise()) {
      im2col(xn, d, col.data());
      cp = col.data();
    }
    dwm.noalias() += CMatMap<T>(g.data() + n * d.o * d.hw_out(), d.o, d.hw_out()) *
                     CMatMap<T>(cp, d.ckk(), d.hw_out()).transpose();
  }
  return dw;
}

// Half-pixel bilinear sampling weights along one axis (edge clamped).
struct Interp1D {
  std::vector<std::int64_t> i0, i1;
  std::vector<double> w1;
};

inline Interp1D interp_axis(std::int64_t in, std::int64_t out) {
  Interp1D r;
  r.i0.resize(out);
  r.i1.resize(out);
  r.w1.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    std::int64_t i0 = static_cast<std::int64_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    r.i0[o] = i0;
    r.i1[o] = std::min(i0 + 1, in - 1);
    r.w1[o] = src - static_cast<double>(i0);
  }
  return r;
}

template <typename T>
Tensor<T> resize_forward(const Tensor<T>& x, std::int64_t ho, std::int64_t wo) {
  require_rank(x.shape(), 4, "resize_bilinear");
  const auto [n, c, h, w] = std::array{x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
  const Interp1D ry = interp_axis(h, ho), rx = interp_axis(w, wo);
  Tensor<T> out(Shape{n, c, ho, wo});
  for (std::int64_t p = 0; p < n * c; ++p) {
    const T* src = x.data() + p * h * w;
    T* dst = out.data() + p * ho * wo;
    for (std::int64_t oy = 0; oy < ho; ++oy) {
      const T wy1 = static_cast<T>(ry.w1[oy]), wy0 = T(1) - wy1;
      const T* r0 = src + ry.i0[oy] * w;
      const T* r1 = src + ry.i1[oy] * w;
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        const T wx1 = static_cast<T>(rx.w1[ox]), wx0 = T(1) - wx1;
        dst[oy * wo + ox] = wy0 * (wx0 * r0[rx.i0[ox]] + wx1 * r0[rx.i1[ox]]) +
                            wy1 * (wx0 * r1[rx.i0[ox]] + wx1 * r1[rx.i1[ox]]);
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> resize_adjoint(const Tensor<T>& g, std::int64_t h, std::int64_t w) {
  require_rank(g.shape(), 4, "resize_bilinear adjoint");
  const auto [n, c, ho, wo] = std::array{g.dim(0), g.dim(1), g.dim(2), g.dim(3)};
  const Interp1D ry = interp_axis(h, ho), rx = interp_axis(w, wo);
  Tensor<T> out(Shape{n, c, h, w});
  for (std::int64_t p = 0; p < n * c; ++p) {
    const T* src = g.data() + p * ho * wo;
    T* dst = out.data() + p * h * w;
    for (std::int64_t oy = 0; oy < ho; ++oy) {
      const T wy1 = static_cast<T>(ry.w1[oy]), wy0 = T(1) - wy1;
      T* r0 = dst + ry.i0[oy] * w;
      T* r1 = dst + ry.i1[oy] * w;
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        const T wx1 = static_cast<T>(rx.w1[ox]), wx0 = T(1) - wx1;
        const T v = src[oy * wo + ox];
        r0[rx.i0[ox]] += wy0 * wx0 * v;
        r0[rx.i1[ox]] += wy0 * wx1 * v;
        r1[rx.i0[ox]] += wy1 * wx0 * v;
        r1[rx.i1[ox]] += wy1 * wx1 * v;
      }
    }
  }
  return out;
}

template <typename T, typename F>
Tensor<T> map_unary(const Tensor<T>& x, F f) {
  Tensor<T> out(x.shape());
  const T* a = x.data();
  T* o = out.data();
  for (std::int64_t i = 0; i < x.size(); ++i) o[i] = f(a[i]);
  return out;
}

template <typename T, typename F>
Tensor<T> map_binary(const Tensor<T>& x, const Tensor<T>& y, F f, const char* op) {
  require_same_shape(x.shape(), y.shape(), op);
  Tensor<T> out(x.shape());
  const T* a = x.data();
  const T* b = y.data();
  T* o = out.data();
  for (std::int64_t i = 0; i < x.size(); ++i) o[i] = f(a[i], b[i]);
  return out;
}

// Rows x inner layout for channel broadcasting: target (N, C, rest...).
inline std::int64_t inner_size(const Shape& s) {
  std::int64_t r = 1;
  for (std::size_t i = 2; i < s.size(); ++i) r *= s[i];
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return make_result<T>("add", detail::map_binary(a.value(), b.value(), std::plus<T>(), "add"),
                        {a, b}, [](const BackwardContext<T>& c) {
                          return std::vector<Var<T>>{c.grad, c.grad};
                        });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s);

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return make_result<T>("sub", detail::map_binary(a.value(), b.value(), std::minus<T>(), "sub"),
                        {a, b}, [](const BackwardContext<T>& c) {
                          std::vector<Var<T>> r(2);
                          if (c.needs(0)) r[0] = c.grad;
                          if (c.needs(1)) r[1] = scale(c.grad, T(-1));
                          return r;
                        });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return make_result<T>("mul",
                        detail::map_binary(a.value(), b.value(), std::multiplies<T>(), "mul"),
                        {a, b}, [a, b](const BackwardContext<T>& c) {
                          std::vector<Var<T>> r(2);
                          if (c.needs(0)) r[0] = mul(c.grad, b);
                          if (c.needs(1)) r[1] = mul(c.grad, a);
                          return r;
                        });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return make_result<T>("div",
                        detail::map_binary(a.value(), b.value(), std::divides<T>(), "div"),
                        {a, b}, [b](const BackwardContext<T>& c) {
                          std::vector<Var<T>> r(2);
                          const Var<T> ga = div(c.grad, b);
                          if (c.needs(0)) r[0] = ga;
                          if (c.needs(1)) r[1] = scale(mul(ga, c.out), T(-1));
                          return r;
                        });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  return make_result<T>("scale", detail::map_unary(a.value(), [s](T v) { return v * s; }), {a},
                        [s](const BackwardContext<T>& c) {
                          return std::vector<Var<T>>{scale(c.grad, s)};
                        });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  return make_result<T>("add_scalar", detail::map_unary(a.value(), [s](T v) { return v + s; }),
                        {a},
                        [](const BackwardContext<T>& c) { return std::vector<Var<T>>{c.grad}; });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  return make_result<T>("square", detail::map_unary(a.value(), [](T v) { return v * v; }), {a},
                        [a](const BackwardContext<T>& c) {
                          return std::vector<Var<T>>{scale(mul(c.grad, a), T(2))};
                        });
}

template <typename T>
Var<T> sqrt(const Var<T>& a) {
  return make_result<T>("sqrt", detail::map_unary(a.value(), [](T v) { return std::sqrt(v); }),
                        {a}, [](const BackwardContext<T>& c) {
                          return std::vector<Var<T>>{div(scale(c.grad, T(0.5)), c.out)};
                        });
}

template <typename T>
Var<T> rsqrt(const Var<T>& a) {
  return make_result<T>(
      "rsqrt", detail::map_unary(a.value(), [](T v) { return T(1) / std::sqrt(v); }), {a},
      [](const BackwardContext<T>& c) {
        const Var<T> cube = mul(mul(c.out, c.out), c.out);
        return std::vector<Var<T>>{scale(mul(c.grad, cube), T(-0.5))};
      });
}

template <typename T>
Var<T> abs(const Var<T>& a) {
  Tensor<T> sign = detail::map_unary(a.value(), [](T v) { return T((v > 0) - (v < 0)); });
  return make_result<T>("abs", detail::map_unary(a.value(), [](T v) { return std::abs(v); }),
                        {a}, [sign = std::move(sign)](const BackwardContext<T>& c) {
                          return std::vector<Var<T>>{mul(c.grad, Var<T>::constant(sign))};
                        });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope = T(0.2)) {
  Tensor<T> mask = detail::map_unary(a.value(), [slope](T v) { return v > 0 ? T(1) : slope; });
  Tensor<T> out = detail::map_binary(a.value(), mask, std::multiplies<T>(), "leaky_relu");
  return make_result<T>("leaky_relu", std::move(out), {a},
                        [mask = std::move(mask)](const BackwardContext<T>& c) {
                          return std::vector<Var<T>>{mul(c.grad, Var<T>::constant(mask))};
                        });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  return leaky_relu(a, T(0));
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return make_result<T>(
      "sigmoid", detail::map_unary(a.value(), [](T v) { return T(1) / (T(1) + std::exp(-v)); }),
      {a}, [](const BackwardContext<T>& c) {
        const Var<T> d = mul(c.out, add_scalar(scale(c.out, T(-1)), T(1)));
        return std::vector<Var<T>>{mul(c.grad, d)};
      });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  return make_result<T>("tanh", detail::map_unary(a.value(), [](T v) { return std::tanh(v); }),
                        {a}, [](const BackwardContext<T>& c) {
                          const Var<T> d = add_scalar(scale(square(c.out), T(-1)), T(1));
                          return std::vector<Var<T>>{mul(c.grad, d)};
                        });
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts

template <typename T>
Var<T> broadcast_scalar(const Var<T>& s, const Shape& shape);

template <typename T>
Var<T> sum(const Var<T>& a) {
  T acc = 0;
  for (T v : a.value().span()) acc += v;
  const Shape in_shape = a.shape();
  return make_result<T>("sum", Tensor<T>::scalar(acc), {a},
                        [in_shape](const BackwardContext<T>& c) {
                          return std::vector<Var<T>>{broadcast_scalar(c.grad, in_shape)};
                        });
}

template <typename T>
Var<T> broadcast_scalar(const Var<T>& s, const Shape& shape) {
  if (s.size() != 1) throw ShapeMismatch("broadcast_scalar of " + to_string(s.shape()));
  return make_result<T>("broadcast_scalar", Tensor<T>(shape, s.value()[0]), {s},
                        [](const BackwardContext<T>& c) {
                          return std::vector<Var<T>>{sum(c.grad)};
                        });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

template <typename T>
Var<T> broadcast_samples(const Var<T>& v, const Shape& shape);

// Sum over every non-batch axis: (N, ...) -> (N).
template <typename T>
Var<T> reduce_samples(const Var<T>& a) {
  const Shape in_shape = a.shape();
  const std::int64_t n = in_shape.at(0), inner = a.size() / n;
  Tensor<T> out(Shape{n});
  for (std::int64_t i = 0; i < n; ++i) {
    T acc = 0;
    const T* p = a.value().data() + i * inner;
    for (std::int64_t j = 0; j < inner; ++j) acc += p[j];
    out[i] = acc;
  }
  return make_result<T>("reduce_samples", std::move(out), {a},
                        [in_shape](const BackwardContext<T>& c) {
                          return std::vector<Var<T>>{broadcast_samples(c.grad, in_shape)};
                        });
}

template <typename T>
Var<T> broadcast_samples(const Var<T>& v, const Shape& shape) {
  const std::int64_t n = shape.at(0), inner = numel(shape) / n;
  if (v.shape() != Shape{n}) throw ShapeMismatch("broadcast_samples of " + to_string(v.shape()));
  Tensor<T> out(shape);
  for (std::int64_t i = 0; i < n; ++i)
    std::fill(out.data() + i * inner, out.data() + (i + 1) * inner, v.value()[i]);
  return make_result<T>("broadcast_samples", std::move(out), {v},
                        [](const BackwardContext<T>& c) {
                          return std::vector<Var<T>>{reduce_samples(c.grad)};
                        });
}

template <typename T>
Var<T> broadcast_channels(const Var<T>& v, const Shape& shape);

// Sums (N, C, ...) down to `to`, which is either (C) or (N, C).
template <typename T>
Var<T> reduce_channels(const Var<T>& a, const Shape& to) {
  const Shape in_shape = a.shape();
  const std::int64_t n = in_shape.at(0), ch = in_shape.at(1), inner = detail::inner_size(in_shape);
  const bool per_sample = to.size() == 2;
  if (!(to == Shape{ch} || to == Shape{n, ch}))
    throw ShapeMismatch("reduce_channels " + to_string(in_shape) + " -> " + to_string(to));
  Tensor<T> out(to);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t k = 0; k < ch; ++k) {
      const T* p = a.value().data() + (i * ch + k) * inner;
      T acc = 0;
      for (std::int64_t j = 0; j < inner; ++j) acc += p[j];
      out[per_sample ? i * ch + k : k] += acc;
    }
  return make_result<T>("reduce_channels", std::move(out), {a},
                        [in_shape](const BackwardContext<T>& c) {
                          return std::vector<Var<T>>{broadcast_channels(c.grad, in_shape)};
                        });
}

// Broadcasts (C) or (N, C) over the trailing axes of `shape` = (N, C, ...).
template <typename T>
Var<T> broadcast_channels(const Var<T>& v, const Shape& shape) {
  const std::int64_t n = shape.at(0), ch = shape.at(1), inner = detail::inner_size(shape);
  const Shape vs = v.shape();
  const bool per_sample = vs.size() == 2;
  if (!(vs == Shape{ch} || vs == Shape{n, ch}))
    throw ShapeMismatch("broadcast_channels " + to_string(vs) + " -> " + to_string(shape));
  Tensor<T> out(shape);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t k = 0; k < ch; ++k) {
      const T val = v.value()[per_sample ? i * ch + k : k];
      T* p = out.data() + (i * ch + k) * inner;
      std::fill(p, p + inner, val);
    }
  return make_result<T>("broadcast_channels", std::move(out), {v},
                        [vs](const BackwardContext<T>& c) {
                          return std::vector<Var<T>>{reduce_channels(c.grad, vs)};
                        });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  const Shape in_shape = a.shape();
  return make_result<T>("reshape", a.value().reshaped(std::move(shape)), {a},
                        [in_shape](const BackwardContext<T>& c) {
                          return std::vector<Var<T>>{reshape(c.grad, in_shape)};
                        });
}

template <typename T>
Var<T> flatten(const Var<T>& a) {
  const std::int64_t n = a.shape().at(0);
  return reshape(a, Shape{n, a.size() / n});
}

template <typename T>
Var<T> pad_channels(const Var<T>& a, std::int64_t offset, std::int64_t total);

template <typename T>
Var<T> slice_channels(const Var<T>& a, std::int64_t offset, std::int64_t count) {
  const Shape s = a.shape();
  const std::int64_t n = s.at(0), ch = s.at(1), inner = detail::inner_size(s);
  if (offset < 0 || offset + count > ch) throw ShapeMismatch("slice_channels out of range");
  Shape os = s;
  os[1] = count;
  Tensor<T> out(os);
  for (std::int64_t i = 0; i < n; ++i)
    std::copy_n(a.value().data() + (i * ch + offset) * inner, count * inner,
                out.data() + i * count * inner);
  return make_result<T>("slice_channels", std::move(out), {a},
                        [offset, ch](const BackwardContext<T>& c) {
                          return std::vector<Var<T>>{pad_channels(c.grad, offset, ch)};
                        });
}

template <typename T>
Var<T> pad_channels(const Var<T>& a, std::int64_t offset, std::int64_t total) {
  const Shape s = a.shape();
  const std::int64_t n = s.at(0), ch = s.at(1), inner = detail::inner_size(s);
  Shape os = s;
  os[1] = total;
  Tensor<T> out(os);
  for (std::int64_t i = 0; i < n; ++i)
    std::copy_n(a.value().data() + i * ch * inner, ch * inner,
                out.data() + (i * total + offset) * inner);
  return make_result<T>("pad_channels", std::move(out), {a},
                        [offset, ch](const BackwardContext<T>& c) {
                          return std::vector<Var<T>>{slice_channels(c.grad, offset, ch)};
                        });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_channels of nothing");
  Shape s = parts[0].shape();
  const std::int64_t n = s.at(0), inner = detail::inner_size(s);
  std::int64_t total = 0;
  std::vector<std::int64_t> counts;
  for (const auto& p : parts) {
    Shape ps = p.shape();
    if (ps.size() != s.size() || ps[0] != n || detail::inner_size(ps) != inner)
      throw ShapeMismatch("concat_channels: " + to_string(ps) + " vs " + to_string(s));
    counts.push_back(ps[1]);
    total += ps[1];
  }
  s[1] = total;
  Tensor<T> out(s);
  std::int64_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::int64_t i = 0; i < n; ++i)
      std::copy_n(parts[k].value().data() + i * counts[k] * inner, counts[k] * inner,
                  out.data() + (i * total + off) * inner);
    off += counts[k];
  }
  return make_result<T>("concat_channels", std::move(out), parts,
                        [counts](const BackwardContext<T>& c) {
                          std::vector<Var<T>> r(counts.size());
                          std::int64_t o = 0;
                          for (std::size_t k = 0; k < counts.size(); ++k) {
                            if (c.needs(k)) r[k] = slice_channels(c.grad, o, counts[k]);
                            o += counts[k];
                          }
                          return r;
                        });
}

// ---------------------------------------------------------------------------
// Dense algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool ta = false, bool tb = false) {
  detail::require_rank(a.shape(), 2, "matmul lhs");
  detail::require_rank(b.shape(), 2, "matmul rhs");
  const std::int64_t m = ta ? a.shape()[1] : a.shape()[0];
  const std::int64_t ka = ta ? a.shape()[0] : a.shape()[1];
  const std::int64_t kb = tb ? b.shape()[1] : b.shape()[0];
  const std::int64_t nn = tb ? b.shape()[0] : b.shape()[1];
  if (ka != kb)
    throw ShapeMismatch("matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  Tensor<T> out(Shape{m, nn});
  detail::CMatMap<T> am(a.value().data(), a.shape()[0], a.shape()[1]);
  detail::CMatMap<T> bm(b.value().data(), b.shape()[0], b.shape()[1]);
  detail::MatMap<T> om(out.data(), m, nn);
  if (!ta && !tb) om.noalias() = am * bm;
  else if (ta && !tb) om.noalias() = am.transpose() * bm;
  else if (!ta && tb) om.noalias() = am * bm.transpose();
  else om.noalias() = am.transpose() * bm.transpose();
  return make_result<T>("matmul", std::move(out), {a, b},
                        [a, b, ta, tb](const BackwardContext<T>& c) {
                          std::vector<Var<T>> r(2);
                          if (c.needs(0))
                            r[0] = ta ? matmul(b, c.grad, tb, true) : matmul(c.grad, b, false, !tb);
                          if (c.needs(1))
                            r[1] = tb ? matmul(c.grad, a, true, ta) : matmul(a, c.grad, !ta, false);
                          return r;
                        });
}

template <typename T>
Var<T> conv2d_input_grad(const Var<T>& g, const Var<T>& w, const Shape& in_shape, ConvGeom geom);
template <typename T>
Var<T> conv2d_weight_grad(const Var<T>& x, const Var<T>& g, const Shape& w_shape, ConvGeom geom);

// Cross-correlation of NCHW input with OIHW weights, zero padding.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, ConvGeom geom = {}) {
  const Shape xs = x.shape(), ws = w.shape();
  return make_result<T>("conv2d", detail::conv_forward(x.value(), w.value(), geom), {x, w},
                        [x, w, xs, ws, geom](const BackwardContext<T>& c) {
                          std::vector<Var<T>> r(2);
                          if (c.needs(0)) r[0] = conv2d_input_grad(c.grad, w, xs, geom);
                          if (c.needs(1)) r[1] = conv2d_weight_grad(x, c.grad, ws, geom);
                          return r;
                        });
}

template <typename T>
Var<T> conv2d_input_grad(const Var<T>& g, const Var<T>& w, const Shape& in_shape, ConvGeom geom) {
  const Shape ws = w.shape();
  return make_result<T>("conv2d_input_grad",
                        detail::conv_input_grad(g.value(), w.value(), in_shape, geom), {g, w},
                        [g, w, ws, geom](const BackwardContext<T>& c) {
                          std::vector<Var<T>> r(2);
                          if (c.needs(0)) r[0] = conv2d(c.grad, w, geom);
                          if (c.needs(1)) r[1] = conv2d_weight_grad(c.grad, g, ws, geom);
                          return r;
                        });
}

template <typename T>
Var<T> conv2d_weight_grad(const Var<T>& x, const Var<T>& g, const Shape& w_shape, ConvGeom geom) {
  const Shape xs = x.shape();
  return make_result<T>("conv2d_weight_grad",
                        detail::conv_weight_grad(x.value(), g.value(), w_shape, geom), {x, g},
                        [x, g, xs, geom](const BackwardContext<T>& c) {
                          std::vector<Var<T>> r(2);
                          if (c.needs(0)) r[0] = conv2d_input_grad(g, c.grad, xs, geom);
                          if (c.needs(1)) r[1] = conv2d(x, c.grad, geom);
                          return r;
                        });
}

// ---------------------------------------------------------------------------
// Resampling

template <typename T>
Var<T> avg_pool2_adjoint(const Var<T>& g);

// 2x2 average pooling with stride 2.
template <typename T>
Var<T> avg_pool2(const Var<T>& a) {
  detail::require_rank(a.shape(), 4, "avg_pool2");
  const Shape s = a.shape();
  const std::int64_t h = s[2], w = s[3];
  if (h % 2 || w % 2) throw ShapeMismatch("avg_pool2 needs even spatial size, got " + to_string(s));
  Tensor<T> out(Shape{s[0], s[1], h / 2, w / 2});
  for (std::int64_t p = 0; p < s[0] * s[1]; ++p) {
    const T* src = a.value().data() + p * h * w;
    T* dst = out.data() + p * (h / 2) * (w / 2);
    for (std::int64_t y = 0; y < h / 2; ++y)
      for (std::int64_t x = 0; x < w / 2; ++x)
        dst[y * (w / 2) + x] = T(0.25) * (src[2 * y * w + 2 * x] + src[2 * y * w + 2 * x + 1] +
                                          src[(2 * y + 1) * w + 2 * x] +
                                          src[(2 * y + 1) * w + 2 * x + 1]);
  }
  return make_result<T>("avg_pool2", std::move(out), {a}, [](const BackwardContext<T>& c) {
    return std::vector<Var<T>>{avg_pool2_adjoint(c.grad)};
  });
}

template <typename T>
Var<T> avg_pool2_adjoint(const Var<T>& g) {
  const Shape s = g.shape();
  const std::int64_t h = s[2] * 2, w = s[3] * 2;
  Tensor<T> out(Shape{s[0], s[1], h, w});
  for (std::int64_t p = 0; p < s[0] * s[1]; ++p) {
    const T* src = g.value().data() + p * s[2] * s[3];
    T* dst = out.data() + p * h * w;
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) dst[y * w + x] = T(0.25) * src[(y / 2) * s[3] + x / 2];
  }
  return make_result<T>("avg_pool2_adjoint", std::move(out), {g},
                        [](const BackwardContext<T>& c) {
                          return std::vector<Var<T>>{avg_pool2(c.grad)};
                        });
}

template <typename T>
Var<T> resize_bilinear_adjoint(const Var<T>& g, std::int64_t h, std::int64_t w);

// Bilinear resize with half-pixel centers and clamped edges.
template <typename T>
Var<T> resize_bilinear(const Var<T>& a, std::int64_t ho, std::int64_t wo) {
  const std::int64_t h = a.shape().at(2), w = a.shape().at(3);
  if (h == ho && w == wo) return a;
  return make_result<T>("resize_bilinear", detail::resize_forward(a.value(), ho, wo), {a},
                        [h, w](const BackwardContext<T>& c) {
                          return std::vector<Var<T>>{resize_bilinear_adjoint(c.grad, h, w)};
                        });
}

template <typename T>
Var<T> resize_bilinear_adjoint(const Var<T>& g, std::int64_t h, std::int64_t w) {
  const std::int64_t ho = g.shape().at(2), wo = g.shape().at(3);
  return make_result<T>("resize_bilinear_adjoint", detail::resize_adjoint(g.value(), h, w), {g},
                        [ho, wo](const BackwardContext<T>& c) {
                          return std::vector<Var<T>>{resize_bilinear(c.grad, ho, wo)};
                        });
}

template <typename T>
Var<T> upsample2(const Var<T>& a) {
  return resize_bilinear(a, a.shape().at(2) * 2, a.shape().at(3) * 2);
}

template <typename T>
Var<T> gather(const Var<T>& a, std::shared_ptr<const std::vector<std::int64_t>> idx, Shape out);

// out[idx[i]] += g[i]; adjoint of gather.
template <typename T>
Var<T> scatter_add(const Var<T>& g, std::shared_ptr<const std::vector<std::int64_t>> idx,
                   Shape out_shape) {
  Tensor<T> out(out_shape);
  const auto& ix = *idx;
  for (std::size_t i = 0; i < ix.size(); ++i) out[ix[i]] += g.value()[static_cast<std::int64_t>(i)];
  const Shape gs = g.shape();
  return make_result<T>("scatter_add", std::move(out), {g},
                        [idx, gs](const BackwardContext<T>& c) {
                          return std::vector<Var<T>>{gather(c.grad, idx, gs)};
                        });
}

template <typename T>
Var<T> gather(const Var<T>& a, std::shared_ptr<const std::vector<std::int64_t>> idx, Shape out) {
  Tensor<T> res(out);
  const auto& ix = *idx;
  for (std::size_t i = 0; i < ix.size(); ++i) res[static_cast<std::int64_t>(i)] = a.value()[ix[i]];
  const Shape as = a.shape();
  return make_result<T>("gather", std::move(res), {a}, [idx, as](const BackwardContext<T>& c) {
    return std::vector<Var<T>>{scatter_add(c.grad, idx, as)};
  });
}

// 3x3 max pooling, stride 2, padding 1.
template <typename T>
Var<T> max_pool3s2(const Var<T>& a) {
  detail::require_rank(a.shape(), 4, "max_pool3s2");
  const Shape s = a.shape();
  const std::int64_t h = s[2], w = s[3], ho = (h - 1) / 2 + 1, wo = (w - 1) / 2 + 1;
  auto idx = std::make_shared<std::vector<std::int64_t>>();
  idx->reserve(static_cast<std::size_t>(s[0] * s[1] * ho * wo));
  for (std::int64_t p = 0; p < s[0] * s[1]; ++p) {
    const T* src = a.value().data() + p * h * w;
    for (std::int64_t oy = 0; oy < ho; ++oy)
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        std::int64_t best = -1;
        for (std::int64_t ky = -1; ky <= 1; ++ky)
          for (std::int64_t kx = -1; kx <= 1; ++kx) {
            const std::int64_t y = oy * 2 + ky, x = ox * 2 + kx;
            if (y < 0 || y >= h || x < 0 || x >= w) continue;
            const std::int64_t i = y * w + x;
            if (best < 0 || src[i] > src[best]) best = i;
          }
        idx->push_back(p * h * w + best);
      }
  }
  return gather(a, std::shared_ptr<const std::vector<std::int64_t>>(std::move(idx)),
                Shape{s[0], s[1], ho, wo});
}

// 2x2 max pooling, stride 2 (odd trailing rows/columns are dropped).
template <typename T>
Var<T> max_pool2(const Var<T>& a) {
  detail::require_rank(a.shape(), 4, "max_pool2");
  const Shape s = a.shape();
  const std::int64_t h = s[2], w = s[3], ho = h / 2, wo = w / 2;
  auto idx = std::make_shared<std::vector<std::int64_t>>();
  idx->reserve(static_cast<std::size_t>(s[0] * s[1] * ho * wo));
  for (std::int64_t p = 0; p < s[0] * s[1]; ++p) {
    const T* src = a.value().data() + p * h * w;
    for (std::int64_t oy = 0; oy < ho; ++oy)
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        std::int64_t best = (oy * 2) * w + ox * 2;
        for (std::int64_t i : {best + 1, best + w, best + w + 1})
          if (src[i] > src[best]) best = i;
        idx->push_back(p * h * w + best);
      }
  }
  return gather(a, std::shared_ptr<const std::vector<std::int64_t>>(std::move(idx)),
                Shape{s[0], s[1], ho, wo});
}

// ---------------------------------------------------------------------------
// Composite helpers

template <typename T>
Var<T> mean_channels(const Var<T>& a) {
  const Shape s = a.shape();
  return scale(reduce_channels(a, Shape{s[0], s[1]}), T(1) / static_cast<T>(detail::inner_size(s)));
}

// Per-sample, per-channel normalization to zero mean and unit variance.
template <typename T>
Var<T> instance_norm(const Var<T>& x, T eps = T(1e-5)) {
  const Shape s = x.shape();
  if (detail::inner_size(s) < 2)
    throw ShapeMismatch("instance_norm needs >= 2 spatial positions, got " + to_string(s));
  const Var<T> centered = sub(x, broadcast_channels(mean_channels(x), s));
  const Var<T> var = mean_channels(square(centered));
  return mul(centered, broadcast_channels(rsqrt(add_scalar(var, eps)), s));
}

// Per-sample cosine similarity of flattened tensors: (N, ...) x (N, ...) -> (N).
template <typename T>
Var<T> cosine_similarity_rows(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "cosine similarity");
  const Var<T> dot = reduce_samples(mul(a, b));
  const Var<T> na = reduce_samples(square(a));
  const Var<T> nb = reduce_samples(square(b));
  for (std::int64_t i = 0; i < na.size(); ++i)
    if (!(na.value()[i] > 0) || !(nb.value()[i] > 0))
      throw ZeroVector("cosine similarity of a zero vector");
  return mul(dot, rsqrt(mul(na, nb)));
}

}  // namespace facedancer
