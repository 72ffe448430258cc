#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <map>
#include <mutex>
#include <numbers>
#include <string>
#include <vector>

#include "lada/fft.hpp"
#include "lada/tape.hpp"
#include "lada/tensor.hpp"

// Differentiable primitives. Every op records one tape entry whose closure
// accumulates into the gradient buffers of its operands.
namespace lada::ops {

enum class Padding { zero, toroidal };
enum class Activation { relu, leaky_relu, tanh, sigmoid, softplus };

inline constexpr double kLeakySlope = 0.2;

namespace detail {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using VecX = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <class T>
void require_same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw ValidationError("operands live on different tapes");
}

template <class T>
void require_same_dims(Var<T> a, Var<T> b, const char* op) {
  if (a.dims() != b.dims()) {
    throw ValidationError(std::string(op) + ": shape mismatch " + dims_to_string(a.dims()) + " vs " +
                          dims_to_string(b.dims()));
  }
}

inline void require_rank(const Dims& d, int rank, const char* op) {
  if (static_cast<int>(d.size()) != rank) {
    throw ValidationError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + dims_to_string(d));
  }
}

inline int wrap(int i, int n) { return ((i % n) + n) % n; }

/// Output extent of a "same"-padded strided convolution.
inline int strided_extent(int n, int stride) { return (n + stride - 1) / stride; }

/// Output columns ox with 0 <= ox·stride + off < n fall in [lo, hi).
inline std::pair<int, int> interior_range(int off, int n, int stride, int out) {
  const int lo = off < 0 ? (-off + stride - 1) / stride : 0;
  const int hi = std::min(out, (n - off + stride - 1) / stride);
  return {std::min(lo, out), std::max(std::min(lo, out), hi)};
}

template <class T>
void im2col(const T* x, int C, int H, int W, int kh, int kw, int stride, Padding pad, int Ho, int Wo, T* cols) {
  const int ph = kh / 2, pw = kw / 2;
  const std::size_t plane = static_cast<std::size_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c) {
    const T* xc = x + static_cast<std::size_t>(c) * H * W;
    for (int dy = 0; dy < kh; ++dy) {
      for (int dx = 0; dx < kw; ++dx) {
        T* dst = cols + (static_cast<std::size_t>(c * kh + dy) * kw + dx) * plane;
        const int off = dx - pw;
        const auto [lo, hi] = interior_range(off, W, stride, Wo);
        for (int oy = 0; oy < Ho; ++oy) {
          int iy = oy * stride + dy - ph;
          T* row = dst + static_cast<std::size_t>(oy) * Wo;
          if (pad == Padding::zero && (iy < 0 || iy >= H)) {
            std::fill(row, row + Wo, T(0));
            continue;
          }
          iy = wrap(iy, H);
          const T* src = xc + static_cast<std::size_t>(iy) * W;
          for (int ox = 0; ox < lo; ++ox) row[ox] = pad == Padding::zero ? T(0) : src[wrap(ox * stride + off, W)];
          if (stride == 1) {
            std::copy(src + lo + off, src + hi + off, row + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) row[ox] = src[ox * stride + off];
          }
          for (int ox = hi; ox < Wo; ++ox) row[ox] = pad == Padding::zero ? T(0) : src[wrap(ox * stride + off, W)];
        }
      }
    }
  }
}

template <class T>
void col2im(const T* cols, int C, int H, int W, int kh, int kw, int stride, Padding pad, int Ho, int Wo, T* gx) {
  const int ph = kh / 2, pw = kw / 2;
  const std::size_t plane = static_cast<std::size_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c) {
    T* gc = gx + static_cast<std::size_t>(c) * H * W;
    for (int dy = 0; dy < kh; ++dy) {
      for (int dx = 0; dx < kw; ++dx) {
        const T* src = cols + (static_cast<std::size_t>(c * kh + dy) * kw + dx) * plane;
        const int off = dx - pw;
        const auto [lo, hi] = interior_range(off, W, stride, Wo);
        for (int oy = 0; oy < Ho; ++oy) {
          int iy = oy * stride + dy - ph;
          if (pad == Padding::zero && (iy < 0 || iy >= H)) continue;
          iy = wrap(iy, H);
          T* dst = gc + static_cast<std::size_t>(iy) * W;
          const T* row = src + static_cast<std::size_t>(oy) * Wo;
          for (int ox = lo; ox < hi; ++ox) dst[ox * stride + off] += row[ox];
          if (pad == Padding::toroidal) {
            for (int ox = 0; ox < lo; ++ox) dst[wrap(ox * stride + off, W)] += row[ox];
            for (int ox = hi; ox < Wo; ++ox) dst[wrap(ox * stride + off, W)] += row[ox];
          }
        }
      }
    }
  }
}

template <class T>
T activate(Activation kind, T x) {
  switch (kind) {
    case Activation::relu: return x > T(0) ? x : T(0);
    case Activation::leaky_relu: return x > T(0) ? x : static_cast<T>(kLeakySlope) * x;
    case Activation::tanh: {
      // Rounds to ±1 for |x| ≳ 9 in float; keep the open range the callers rely on.
      const T edge = std::nextafter(T(1), T(0));
      return std::clamp(std::tanh(x), -edge, edge);
    }
    case Activation::sigmoid: return T(1) / (T(1) + std::exp(-x));
    case Activation::softplus: return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
  }
  return x;
}

/// Derivative given the input `x` and output `y`.
template <class T>
T activate_grad(Activation kind, T x, T y) {
  switch (kind) {
    case Activation::relu: return x > T(0) ? T(1) : T(0);
    case Activation::leaky_relu: return x > T(0) ? T(1) : static_cast<T>(kLeakySlope);
    case Activation::tanh: return T(1) - y * y;
    case Activation::sigmoid: return y * (T(1) - y);
    case Activation::softplus: return T(1) / (T(1) + std::exp(-x));
  }
  return T(1);
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  detail::require_same_dims(a, b, "add");
  BasicTensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const BasicTensor<T>& g, [[maybe_unused]] const BasicTensor<T>& res) {
    for (Var<T> v : {a, b}) {
      if (T* gv = t.grad_buffer(v)) {
        for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
      }
    }
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  detail::require_same_dims(a, b, "sub");
  BasicTensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const BasicTensor<T>& g, [[maybe_unused]] const BasicTensor<T>& res) {
    if (T* ga = t.grad_buffer(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (T* gb = t.grad_buffer(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  detail::require_same_dims(a, b, "mul");
  BasicTensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const BasicTensor<T>& g, [[maybe_unused]] const BasicTensor<T>& res) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (T* ga = t.grad_buffer(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (T* gb = t.grad_buffer(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <class T>
Var<T> div(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  detail::require_same_dims(a, b, "div");
  BasicTensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const BasicTensor<T>& g, [[maybe_unused]] const BasicTensor<T>& res) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (T* ga = t.grad_buffer(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
    }
    if (T* gb = t.grad_buffer(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

template <class T>
Var<T> scale(Var<T> a, T c) {
  BasicTensor<T> out = a.value();
  for (auto& v : out.values()) v *= c;
  return a.tape->record(std::move(out), {a}, [a, c](Tape<T>& t, const BasicTensor<T>& g, [[maybe_unused]] const BasicTensor<T>& res) {
    T* ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

template <class T>
Var<T> add_scalar(Var<T> a, T c) {
  BasicTensor<T> out = a.value();
  for (auto& v : out.values()) v += c;
  return a.tape->record(std::move(out), {a}, [a](Tape<T>& t, const BasicTensor<T>& g, [[maybe_unused]] const BasicTensor<T>& res) {
    T* ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <class T>
Var<T> square(Var<T> a) {
  return mul(a, a);
}

template <class T>
Var<T> sum(Var<T> a) {
  const auto& av = a.value();
  double s = 0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i];
  return a.tape->record(BasicTensor<T>::scalar(static_cast<T>(s)), {a}, [a](Tape<T>& t, const BasicTensor<T>& g, [[maybe_unused]] const BasicTensor<T>& res) {
    T* ga = t.grad_buffer(a);
    const std::size_t n = a.value().size();
    for (std::size_t i = 0; i < n; ++i) ga[i] += g[0];
  });
}

template <class T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

template <class T>
Var<T> apply_activation(Var<T> x, Activation kind) {
  BasicTensor<T> out = x.value();
  if (kind == Activation::relu || kind == Activation::leaky_relu) {
    double margin = std::numeric_limits<double>::infinity();
    for (T v : out.values()) margin = std::min(margin, static_cast<double>(std::abs(v)));
    x.tape->note_kink_distance(margin);
  }
  for (auto& v : out.values()) v = detail::activate(kind, v);
  return x.tape->record(std::move(out), {x}, [x, kind](Tape<T>& t, const BasicTensor<T>& g, const BasicTensor<T>& res) {
    const auto& xv = x.value();
    T* gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * detail::activate_grad(kind, xv[i], res[i]);
  });
}

template <class T>
Var<T> relu(Var<T> x) {
  return apply_activation(x, Activation::relu);
}
template <class T>
Var<T> leaky_relu(Var<T> x) {
  return apply_activation(x, Activation::leaky_relu);
}
template <class T>
Var<T> tanh(Var<T> x) {
  return apply_activation(x, Activation::tanh);
}
template <class T>
Var<T> sigmoid(Var<T> x) {
  return apply_activation(x, Activation::sigmoid);
}
template <class T>
Var<T> softplus(Var<T> x) {
  return apply_activation(x, Activation::softplus);
}

/// New constant holding the same value; gradients stop here.
template <class T>
Var<T> detach(Var<T> x) {
  return x.tape->constant(x.value());
}

// ---------------------------------------------------------------- shape ops

template <class T>
Var<T> reshape(Var<T> x, Dims dims) {
  BasicTensor<T> out = x.value().reshaped(std::move(dims));
  return x.tape->record(std::move(out), {x}, [x](Tape<T>& t, const BasicTensor<T>& g, [[maybe_unused]] const BasicTensor<T>& res) {
    T* gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

/// Concatenation along the leading axis; trailing extents must agree.
template <class T>
Var<T> concat(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ValidationError("concat: no operands");
  Dims dims = parts[0].dims();
  int lead = 0;
  for (const auto& p : parts) {
    detail::require_same_tape(parts[0], p);
    const Dims& d = p.dims();
    if (d.size() != dims.size() || !std::equal(d.begin() + 1, d.end(), dims.begin() + 1)) {
      throw ValidationError("concat: trailing extents differ: " + dims_to_string(d) + " vs " + dims_to_string(dims));
    }
    lead += d[0];
  }
  dims[0] = lead;
  BasicTensor<T> out(dims);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    std::copy(v.data(), v.data() + v.size(), out.data() + off);
    off += v.size();
  }
  return parts[0].tape->record(std::move(out), parts, [parts](Tape<T>& t, const BasicTensor<T>& g, [[maybe_unused]] const BasicTensor<T>& res) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t n = p.value().size();
      if (T* gp = t.grad_buffer(p)) {
        for (std::size_t i = 0; i < n; ++i) gp[i] += g[off + i];
      }
      off += n;
    }
  });
}

/// Rows [begin, begin + count) of the leading axis.
template <class T>
Var<T> slice(Var<T> x, int begin, int count) {
  Dims dims = x.dims();
  if (begin < 0 || count <= 0 || begin + count > dims[0]) throw ValidationError("slice: range out of bounds");
  const std::size_t inner = x.value().size() / static_cast<std::size_t>(dims[0]);
  dims[0] = count;
  BasicTensor<T> out(dims);
  const T* src = x.value().data() + inner * begin;
  std::copy(src, src + out.size(), out.data());
  return x.tape->record(std::move(out), {x}, [x, begin, inner](Tape<T>& t, const BasicTensor<T>& g, [[maybe_unused]] const BasicTensor<T>& res) {
    T* gx = t.grad_buffer(x) + inner * begin;
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

// ---------------------------------------------------------------- layers

/// out = W·x + b with W [m×n], x [n], b [m].
template <class T>
Var<T> dense(Var<T> x, Var<T> W, Var<T> b) {
  detail::require_same_tape(x, W);
  detail::require_same_tape(x, b);
  const Dims& wd = W.dims();
  if (wd.size() != 2 || x.value().size() != static_cast<std::size_t>(wd[1]) || b.value().size() != static_cast<std::size_t>(wd[0])) {
    throw ValidationError("dense: shape mismatch W" + dims_to_string(wd) + " x" + dims_to_string(x.dims()) + " b" +
                          dims_to_string(b.dims()));
  }
  const int m = wd[0], n = wd[1];
  BasicTensor<T> out(Dims{m});
  Eigen::Map<const detail::MatR<T>> Wm(W.value().data(), m, n);
  Eigen::Map<const detail::VecX<T>> xv(x.value().data(), n);
  Eigen::Map<const detail::VecX<T>> bv(b.value().data(), m);
  Eigen::Map<detail::VecX<T>> ov(out.data(), m);
  ov.noalias() = Wm * xv;
  ov += bv;
  return x.tape->record(std::move(out), {x, W, b}, [x, W, b, m, n](Tape<T>& t, const BasicTensor<T>& g, [[maybe_unused]] const BasicTensor<T>& res) {
    Eigen::Map<const detail::VecX<T>> gv(g.data(), m);
    if (T* gx = t.grad_buffer(x)) {
      Eigen::Map<const detail::MatR<T>> Wm(W.value().data(), m, n);
      Eigen::Map<detail::VecX<T>>(gx, n).noalias() += Wm.transpose() * gv;
    }
    if (T* gW = t.grad_buffer(W)) {
      Eigen::Map<const detail::VecX<T>> xv(x.value().data(), n);
      Eigen::Map<detail::MatR<T>>(gW, m, n).noalias() += gv * xv.transpose();
    }
    if (T* gb = t.grad_buffer(b)) {
      for (int i = 0; i < m; ++i) gb[i] += g[i];
    }
  });
}

/// Cross-correlation of x [Cin×H×W] with k [Cout×Cin×kh×kw], "same" padding,
/// output sampled every `stride` pixels.
template <class T>
Var<T> conv2d(Var<T> x, Var<T> k, int stride = 1, Padding pad = Padding::zero) {
  detail::require_same_tape(x, k);
  const Dims& xd = x.dims();
  const Dims& kd = k.dims();
  detail::require_rank(xd, 3, "conv2d input");
  detail::require_rank(kd, 4, "conv2d kernel");
  if (kd[2] % 2 == 0 || kd[3] % 2 == 0) throw ValidationError("conv2d: kernel extents must be odd, got " + dims_to_string(kd));
  if (stride < 1) throw ValidationError("conv2d: stride must be >= 1");
  if (kd[1] != xd[0]) throw ValidationError("conv2d: channel mismatch " + dims_to_string(xd) + " vs " + dims_to_string(kd));
  const int C = xd[0], H = xd[1], W = xd[2];
  const int Co = kd[0], kh = kd[2], kw = kd[3];
  const int Ho = detail::strided_extent(H, stride), Wo = detail::strided_extent(W, stride);
  const int K = C * kh * kw, P = Ho * Wo;
  const bool pointwise = kh == 1 && kw == 1 && stride == 1;

  detail::MatR<T> cols;  // left uninitialized; im2col writes every entry
  if (!pointwise) {
    cols.resize(K, P);
    detail::im2col(x.value().data(), C, H, W, kh, kw, stride, pad, Ho, Wo, cols.data());
  }
  const T* colp = pointwise ? x.value().data() : cols.data();
  BasicTensor<T> out(Dims{Co, Ho, Wo});
  Eigen::Map<const detail::MatR<T>> Km(k.value().data(), Co, K);
  Eigen::Map<const detail::MatR<T>> Cm(colp, K, P);
  Eigen::Map<detail::MatR<T>>(out.data(), Co, P).noalias() = Km * Cm;

  return x.tape->record(std::move(out), {x, k},
                        [x, k, stride, pad, C, H, W, Co, kh, kw, Ho, Wo, K, P, pointwise,
                         cols = std::move(cols)](Tape<T>& t, const BasicTensor<T>& g, [[maybe_unused]] const BasicTensor<T>& res) {
                          Eigen::Map<const detail::MatR<T>> G(g.data(), Co, P);
                          const T* colp = pointwise ? x.value().data() : cols.data();
                          if (T* gk = t.grad_buffer(k)) {
                            Eigen::Map<const detail::MatR<T>> Cm(colp, K, P);
                            Eigen::Map<detail::MatR<T>>(gk, Co, K).noalias() += G * Cm.transpose();
                          }
                          if (T* gx = t.grad_buffer(x)) {
                            Eigen::Map<const detail::MatR<T>> Km(k.value().data(), Co, K);
                            if (pointwise) {
                              Eigen::Map<detail::MatR<T>>(gx, K, P).noalias() += Km.transpose() * G;
                            } else {
                              detail::MatR<T> gcols = Km.transpose() * G;
                              detail::col2im(gcols.data(), C, H, W, kh, kw, stride, pad, Ho, Wo, gx);
                            }
                          }
                        });
}

/// y[c,...] = x[c,...]·scale[c] + shift[c].
template <class T>
Var<T> channel_affine(Var<T> x, Var<T> scale_c, Var<T> shift_c) {
  const int C = x.dims()[0];
  if (scale_c.value().size() != static_cast<std::size_t>(C) || shift_c.value().size() != static_cast<std::size_t>(C)) {
    throw ValidationError("channel_affine: per-channel vectors must have " + std::to_string(C) + " entries");
  }
  const std::size_t plane = x.value().size() / C;
  BasicTensor<T> out = x.value();
  for (int c = 0; c < C; ++c) {
    const T s = scale_c.value()[c], b = shift_c.value()[c];
    T* p = out.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) p[i] = p[i] * s + b;
  }
  return x.tape->record(std::move(out), {x, scale_c, shift_c},
                        [x, scale_c, shift_c, C, plane](Tape<T>& t, const BasicTensor<T>& g, [[maybe_unused]] const BasicTensor<T>& res) {
                          T* gx = t.grad_buffer(x);
                          T* gs = t.grad_buffer(scale_c);
                          T* gb = t.grad_buffer(shift_c);
                          const auto& xv = x.value();
                          for (int c = 0; c < C; ++c) {
                            const T* gp = g.data() + c * plane;
                            const T* xp = xv.data() + c * plane;
                            const T s = scale_c.value()[c];
                            T acc_s = 0, acc_b = 0;
                            for (std::size_t i = 0; i < plane; ++i) {
                              acc_s += gp[i] * xp[i];
                              acc_b += gp[i];
                              if (gx) gx[c * plane + i] += gp[i] * s;
                            }
                            if (gs) gs[c] += acc_s;
                            if (gb) gb[c] += acc_b;
                          }
                        });
}

/// y[c,...] = x[c,...] + b[c].
template <class T>
Var<T> add_channel_bias(Var<T> x, Var<T> b) {
  const int C = x.dims()[0];
  if (b.value().size() != static_cast<std::size_t>(C)) throw ValidationError("add_channel_bias: bias length mismatch");
  const std::size_t plane = x.value().size() / C;
  BasicTensor<T> out = x.value();
  for (int c = 0; c < C; ++c) {
    T* p = out.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) p[i] += b.value()[c];
  }
  return x.tape->record(std::move(out), {x, b}, [x, b, C, plane](Tape<T>& t, const BasicTensor<T>& g, [[maybe_unused]] const BasicTensor<T>& res) {
    if (T* gx = t.grad_buffer(x)) {
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (T* gb = t.grad_buffer(b)) {
      for (int c = 0; c < C; ++c) {
        T acc = 0;
        for (std::size_t i = 0; i < plane; ++i) acc += g[c * plane + i];
        gb[c] += acc;
      }
    }
  });
}

/// y[c] = x[c] + gain[c]·map, with a single-channel map [1×H×W].
template <class T>
Var<T> add_scaled_map(Var<T> x, Var<T> gain, Var<T> map) {
  const Dims& xd = x.dims();
  detail::require_rank(xd, 3, "add_scaled_map");
  const int C = xd[0];
  const std::size_t plane = static_cast<std::size_t>(xd[1]) * xd[2];
  if (map.value().size() != plane || gain.value().size() != static_cast<std::size_t>(C)) {
    throw ValidationError("add_scaled_map: map " + dims_to_string(map.dims()) + " or gain does not match " +
                          dims_to_string(xd));
  }
  BasicTensor<T> out = x.value();
  const auto& mv = map.value();
  for (int c = 0; c < C; ++c) {
    const T s = gain.value()[c];
    T* p = out.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) p[i] += s * mv[i];
  }
  return x.tape->record(std::move(out), {x, gain, map}, [x, gain, map, C, plane](Tape<T>& t, const BasicTensor<T>& g, [[maybe_unused]] const BasicTensor<T>& res) {
    T* gx = t.grad_buffer(x);
    T* gg = t.grad_buffer(gain);
    T* gm = t.grad_buffer(map);
    const auto& mv = map.value();
    for (int c = 0; c < C; ++c) {
      const T* gp = g.data() + c * plane;
      const T s = gain.value()[c];
      T acc = 0;
      for (std::size_t i = 0; i < plane; ++i) {
        if (gx) gx[c * plane + i] += gp[i];
        if (gm) gm[i] += gp[i] * s;
        acc += gp[i] * mv[i];
      }
      if (gg) gg[c] += acc;
    }
  });
}

namespace detail {

/// Rows of the DFT matrix for the retained frequencies of one axis:
/// re/im [R × n] with entries exp(−2πi·k_r·j/n). Cached for the process
/// lifetime; backward closures hold references into the cache.
template <class T>
struct TruncatedDft {
  std::vector<int> freqs;
  MatR<T> re, im;
};

template <class T>
const TruncatedDft<T>& truncated_dft(int n, int modes) {
  static std::map<std::pair<int, int>, TruncatedDft<T>> cache;
  static std::mutex mutex;
  std::lock_guard lock(mutex);
  auto it = cache.find({n, modes});
  if (it != cache.end()) return it->second;
  TruncatedDft<T> d;
  d.freqs = fft::retained_indices(n, modes);
  const int R = static_cast<int>(d.freqs.size());
  d.re.resize(R, n);
  d.im.resize(R, n);
  for (int r = 0; r < R; ++r) {
    for (int j = 0; j < n; ++j) {
      const double ang = -2.0 * std::numbers::pi * static_cast<double>((static_cast<long>(d.freqs[r]) * j) % n) / n;
      d.re(r, j) = static_cast<T>(std::cos(ang));
      d.im(r, j) = static_cast<T>(std::sin(ang));
    }
  }
  return cache.emplace(std::make_pair(n, modes), std::move(d)).first->second;
}

/// Retained spectrum of C real H×W planes; outputs [C × Rh × Rw] re/im.
template <class T>
void truncated_forward(const T* x, int C, int H, int W, const TruncatedDft<T>& dr, const TruncatedDft<T>& dc, T* s_re,
                       T* s_im) {
  const int Rh = static_cast<int>(dr.freqs.size()), Rw = static_cast<int>(dc.freqs.size());
  Eigen::Map<const MatR<T>> X(x, static_cast<Eigen::Index>(C) * H, W);
  const MatR<T> a_re = X * dc.re.transpose();
  const MatR<T> a_im = X * dc.im.transpose();
  const std::size_t R = static_cast<std::size_t>(Rh) * Rw;
  for (int c = 0; c < C; ++c) {
    const auto ar = a_re.middleRows(static_cast<Eigen::Index>(c) * H, H);
    const auto ai = a_im.middleRows(static_cast<Eigen::Index>(c) * H, H);
    Eigen::Map<MatR<T>>(s_re + c * R, Rh, Rw).noalias() = dr.re * ar - dr.im * ai;
    Eigen::Map<MatR<T>>(s_im + c * R, Rh, Rw).noalias() = dr.re * ai + dr.im * ar;
  }
}

/// out[c] += scale · Re(unnormalized inverse DFT of the retained spectrum).
template <class T>
void truncated_inverse_real(const T* s_re, const T* s_im, int C, int H, int W, const TruncatedDft<T>& dr,
                            const TruncatedDft<T>& dc, T scale, T* out) {
  const int Rh = static_cast<int>(dr.freqs.size()), Rw = static_cast<int>(dc.freqs.size());
  const std::size_t R = static_cast<std::size_t>(Rh) * Rw;
  MatR<T> b_re(static_cast<Eigen::Index>(C) * H, Rw), b_im(static_cast<Eigen::Index>(C) * H, Rw);
  for (int c = 0; c < C; ++c) {
    Eigen::Map<const MatR<T>> yr(s_re + c * R, Rh, Rw), yi(s_im + c * R, Rh, Rw);
    b_re.middleRows(static_cast<Eigen::Index>(c) * H, H).noalias() = dr.re.transpose() * yr + dr.im.transpose() * yi;
    b_im.middleRows(static_cast<Eigen::Index>(c) * H, H).noalias() = dr.re.transpose() * yi - dr.im.transpose() * yr;
  }
  Eigen::Map<MatR<T>> O(out, static_cast<Eigen::Index>(C) * H, W);
  O.noalias() += scale * (b_re * dc.re + b_im * dc.im);
}

}  // namespace detail

/// Channel-mixing spectral layer. x [Cin×H×W], mix [Cout×Cin×Rh×Rw×2] holding
/// complex weights (re, im) for the retained frequencies of each axis
/// (indices k with min(k, n−k) ≤ modes). Output is the real part of the
/// inverse transform. Only the retained rows of the DFT are ever formed, as
/// dense matrices.
template <class T>
Var<T> spectral_conv(Var<T> x, Var<T> mix, int modes) {
  detail::require_same_tape(x, mix);
  const Dims& xd = x.dims();
  const Dims& md = mix.dims();
  detail::require_rank(xd, 3, "spectral_conv input");
  detail::require_rank(md, 5, "spectral_conv mix");
  const int C = xd[0], H = xd[1], W = xd[2];
  if (!fft::is_power_of_two(H) || !fft::is_power_of_two(W)) {
    throw ValidationError("spectral_conv: extents must be powers of two, got " + dims_to_string(xd));
  }
  if (modes < 0 || modes > H / 2 || modes > W / 2) throw ValidationError("spectral_conv: modes out of range");
  const auto& dr = detail::truncated_dft<T>(H, modes);
  const auto& dc = detail::truncated_dft<T>(W, modes);
  const int Rh = static_cast<int>(dr.freqs.size()), Rw = static_cast<int>(dc.freqs.size());
  if (md[1] != C || md[2] != Rh || md[3] != Rw || md[4] != 2) {
    throw ValidationError("spectral_conv: mix " + dims_to_string(md) + " does not match input " + dims_to_string(xd) +
                          " with modes " + std::to_string(modes));
  }
  const int Co = md[0];
  const std::size_t N = static_cast<std::size_t>(H) * W;
  const std::size_t R = static_cast<std::size_t>(Rh) * Rw;

  std::vector<T> sx_re(C * R), sx_im(C * R);
  detail::truncated_forward(x.value().data(), C, H, W, dr, dc, sx_re.data(), sx_im.data());

  // Per-frequency complex channel mix.
  const T* mw = mix.value().data();
  std::vector<T> y_re(Co * R, T(0)), y_im(Co * R, T(0));
  for (int o = 0; o < Co; ++o) {
    for (int c = 0; c < C; ++c) {
      const T* w = mw + (static_cast<std::size_t>(o) * C + c) * R * 2;
      const T* xr = sx_re.data() + c * R;
      const T* xi = sx_im.data() + c * R;
      T* yr = y_re.data() + o * R;
      T* yi = y_im.data() + o * R;
      for (std::size_t f = 0; f < R; ++f) {
        yr[f] += w[2 * f] * xr[f] - w[2 * f + 1] * xi[f];
        yi[f] += w[2 * f] * xi[f] + w[2 * f + 1] * xr[f];
      }
    }
  }
  BasicTensor<T> out(Dims{Co, H, W});
  detail::truncated_inverse_real(y_re.data(), y_im.data(), Co, H, W, dr, dc, T(1) / static_cast<T>(N), out.data());

  return x.tape->record(
      std::move(out), {x, mix},
      [x, mix, C, H, W, Co, N, R, &dr, &dc, sx_re = std::move(sx_re), sx_im = std::move(sx_im)](
          Tape<T>& t, const BasicTensor<T>& g, [[maybe_unused]] const BasicTensor<T>& res) {
        // Adjoint of Re(IDFT(·))/N restricted to the retained grid is DFT(·)/N.
        std::vector<T> gy_re(Co * R), gy_im(Co * R);
        detail::truncated_forward(g.data(), Co, H, W, dr, dc, gy_re.data(), gy_im.data());
        const T inv_n = T(1) / static_cast<T>(N);
        for (auto& v : gy_re) v *= inv_n;
        for (auto& v : gy_im) v *= inv_n;
        const T* mw = mix.value().data();
        if (T* gm = t.grad_buffer(mix)) {
          for (int o = 0; o < Co; ++o) {
            for (int c = 0; c < C; ++c) {
              T* p = gm + (static_cast<std::size_t>(o) * C + c) * R * 2;
              const T* gr = gy_re.data() + o * R;
              const T* gi = gy_im.data() + o * R;
              const T* xr = sx_re.data() + c * R;
              const T* xi = sx_im.data() + c * R;
              // gy · conj(x)
              for (std::size_t f = 0; f < R; ++f) {
                p[2 * f] += gr[f] * xr[f] + gi[f] * xi[f];
                p[2 * f + 1] += gi[f] * xr[f] - gr[f] * xi[f];
              }
            }
          }
        }
        if (T* gx = t.grad_buffer(x)) {
          // Σ_o conj(w) · gy, then the unnormalized inverse.
          std::vector<T> gs_re(C * R, T(0)), gs_im(C * R, T(0));
          for (int o = 0; o < Co; ++o) {
            for (int c = 0; c < C; ++c) {
              const T* w = mw + (static_cast<std::size_t>(o) * C + c) * R * 2;
              const T* gr = gy_re.data() + o * R;
              const T* gi = gy_im.data() + o * R;
              T* sr = gs_re.data() + c * R;
              T* si = gs_im.data() + c * R;
              for (std::size_t f = 0; f < R; ++f) {
                sr[f] += w[2 * f] * gr[f] + w[2 * f + 1] * gi[f];
                si[f] += w[2 * f] * gi[f] - w[2 * f + 1] * gr[f];
              }
            }
          }
          detail::truncated_inverse_real(gs_re.data(), gs_im.data(), C, H, W, dr, dc, T(1), gx);
        }
      });
}

/// Mix tensor extents for spectral_conv on an h×w grid.
inline Dims spectral_mix_dims(int out_channels, int in_channels, int h, int w, int modes) {
  return Dims{out_channels, in_channels, static_cast<int>(fft::retained_indices(h, modes).size()),
              static_cast<int>(fft::retained_indices(w, modes).size()), 2};
}

template <class T>
Var<T> global_avg_pool(Var<T> x) {
  const Dims& xd = x.dims();
  detail::require_rank(xd, 3, "global_avg_pool");
  const int C = xd[0];
  const std::size_t plane = static_cast<std::size_t>(xd[1]) * xd[2];
  BasicTensor<T> out(Dims{C});
  for (int c = 0; c < C; ++c) {
    double acc = 0;
    const T* p = x.value().data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) acc += p[i];
    out[c] = static_cast<T>(acc / static_cast<double>(plane));
  }
  return x.tape->record(std::move(out), {x}, [x, C, plane](Tape<T>& t, const BasicTensor<T>& g, [[maybe_unused]] const BasicTensor<T>& res) {
    T* gx = t.grad_buffer(x);
    for (int c = 0; c < C; ++c) {
      const T v = g[c] / static_cast<T>(plane);
      for (std::size_t i = 0; i < plane; ++i) gx[c * plane + i] += v;
    }
  });
}

/// Mean over non-overlapping f×f blocks.
template <class T>
Var<T> avg_pool(Var<T> x, int f) {
  const Dims& xd = x.dims();
  detail::require_rank(xd, 3, "avg_pool");
  const int C = xd[0], H = xd[1], W = xd[2];
  if (f < 1 || H % f || W % f) throw ValidationError("avg_pool: factor must divide extents");
  const int Ho = H / f, Wo = W / f;
  const T inv = T(1) / static_cast<T>(f * f);
  BasicTensor<T> out(Dims{C, Ho, Wo});
  const auto& xv = x.value();
  for (int c = 0; c < C; ++c) {
    for (int y = 0; y < H; ++y) {
      for (int xx = 0; xx < W; ++xx) out.at(c, y / f, xx / f) += xv.at(c, y, xx) * inv;
    }
  }
  return x.tape->record(std::move(out), {x}, [x, C, H, W, f, inv](Tape<T>& t, const BasicTensor<T>& g, [[maybe_unused]] const BasicTensor<T>& res) {
    T* gx = t.grad_buffer(x);
    const int Wo = W / f;
    for (int c = 0; c < C; ++c) {
      for (int y = 0; y < H; ++y) {
        for (int xx = 0; xx < W; ++xx) {
          gx[(static_cast<std::size_t>(c) * H + y) * W + xx] +=
              g[(static_cast<std::size_t>(c) * (H / f) + y / f) * Wo + xx / f] * inv;
        }
      }
    }
  });
}

/// Nearest-neighbour 2× replication.
template <class T>
Var<T> upsample2x(Var<T> x) {
  const Dims& xd = x.dims();
  detail::require_rank(xd, 3, "upsample2x");
  const int C = xd[0], H = xd[1], W = xd[2];
  BasicTensor<T> out(Dims{C, 2 * H, 2 * W});
  const auto& xv = x.value();
  for (int c = 0; c < C; ++c) {
    for (int y = 0; y < 2 * H; ++y) {
      const T* src = xv.data() + (static_cast<std::size_t>(c) * H + y / 2) * W;
      T* dst = out.data() + (static_cast<std::size_t>(c) * 2 * H + y) * 2 * W;
      for (int xx = 0; xx < 2 * W; ++xx) dst[xx] = src[xx / 2];
    }
  }
  return x.tape->record(std::move(out), {x}, [x, C, H, W](Tape<T>& t, const BasicTensor<T>& g, [[maybe_unused]] const BasicTensor<T>& res) {
    T* gx = t.grad_buffer(x);
    for (int c = 0; c < C; ++c) {
      for (int y = 0; y < 2 * H; ++y) {
        const T* src = g.data() + (static_cast<std::size_t>(c) * 2 * H + y) * 2 * W;
        T* dst = gx + (static_cast<std::size_t>(c) * H + y / 2) * W;
        for (int xx = 0; xx < 2 * W; ++xx) dst[xx / 2] += src[xx];
      }
    }
  });
}

// ---------------------------------------------------------------- two-class heads

namespace detail {

inline void require_two_channels(const Dims& d, const char* op) {
  if (d.size() != 3 || d[0] != 2) throw ValidationError(std::string(op) + ": logits must be 2×H×W, got " + dims_to_string(d));
}

/// Stable two-way softmax at one pixel.
template <class T>
void softmax2(T a, T b, T& pa, T& pb) {
  const T m = std::max(a, b);
  const T ea = std::exp(a - m), eb = std::exp(b - m);
  const T s = ea + eb;
  pa = ea / s;
  pb = eb / s;
}

}  // namespace detail

/// Per-pixel softmax over the two channels.
template <class T>
Var<T> softmax_channels(Var<T> logits) {
  const Dims& d = logits.dims();
  detail::require_two_channels(d, "softmax_channels");
  const std::size_t plane = static_cast<std::size_t>(d[1]) * d[2];
  BasicTensor<T> out(d);
  const auto& lv = logits.value();
  for (std::size_t i = 0; i < plane; ++i) detail::softmax2(lv[i], lv[plane + i], out[i], out[plane + i]);
  return logits.tape->record(std::move(out), {logits}, [logits, plane](Tape<T>& t, const BasicTensor<T>& g, const BasicTensor<T>& p) {
    T* gl = t.grad_buffer(logits);
    for (std::size_t i = 0; i < plane; ++i) {
      const T dot = p[i] * g[i] + p[plane + i] * g[plane + i];
      gl[i] += p[i] * (g[i] - dot);
      gl[plane + i] += p[plane + i] * (g[plane + i] - dot);
    }
  });
}

/// Mean over pixels of −log softmax(logits)[target]; target is H×W with values in {0, 1}.
template <class T>
Var<T> softmax_ce(Var<T> logits, const BasicTensor<T>& target) {
  const Dims& d = logits.dims();
  detail::require_two_channels(d, "softmax_ce");
  const std::size_t plane = static_cast<std::size_t>(d[1]) * d[2];
  if (target.size() != plane) throw ValidationError("softmax_ce: target does not match logits " + dims_to_string(d));
  for (std::size_t i = 0; i < plane; ++i) {
    if (target[i] != T(0) && target[i] != T(1)) throw ValidationError("softmax_ce: target values must be 0 or 1");
  }
  const auto& lv = logits.value();
  double loss = 0;
  for (std::size_t i = 0; i < plane; ++i) {
    const double a = lv[i], b = lv[plane + i];
    const double m = std::max(a, b);
    const double lse = m + std::log(std::exp(a - m) + std::exp(b - m));
    loss += lse - (target[i] == T(1) ? b : a);
  }
  loss /= static_cast<double>(plane);
  return logits.tape->record(BasicTensor<T>::scalar(static_cast<T>(loss)), {logits},
                             [logits, target, plane](Tape<T>& t, const BasicTensor<T>& g, [[maybe_unused]] const BasicTensor<T>& res) {
                               T* gl = t.grad_buffer(logits);
                               const auto& lv = logits.value();
                               const T s = g[0] / static_cast<T>(plane);
                               for (std::size_t i = 0; i < plane; ++i) {
                                 T pa, pb;
                                 detail::softmax2(lv[i], lv[plane + i], pa, pb);
                                 const T tb = target[i];
                                 gl[i] += s * (pa - (T(1) - tb));
                                 gl[plane + i] += s * (pb - tb);
                               }
                             });
}

/// Soft-target variant: mean over pixels of −Σ_c target[c]·log softmax(logits)[c],
/// target being a 2×H×W probability field.
template <class T>
Var<T> softmax_ce_soft(Var<T> logits, const BasicTensor<T>& target) {
  const Dims& d = logits.dims();
  detail::require_two_channels(d, "softmax_ce_soft");
  if (target.dims() != d) throw ValidationError("softmax_ce_soft: target must match logits " + dims_to_string(d));
  const std::size_t plane = static_cast<std::size_t>(d[1]) * d[2];
  const auto& lv = logits.value();
  double loss = 0;
  for (std::size_t i = 0; i < plane; ++i) {
    const double a = lv[i], b = lv[plane + i];
    const double m = std::max(a, b);
    const double lse = m + std::log(std::exp(a - m) + std::exp(b - m));
    loss += target[i] * (lse - a) + target[plane + i] * (lse - b);
  }
  loss /= static_cast<double>(plane);
  return logits.tape->record(BasicTensor<T>::scalar(static_cast<T>(loss)), {logits},
                             [logits, target, plane](Tape<T>& t, const BasicTensor<T>& g, [[maybe_unused]] const BasicTensor<T>& res) {
                               T* gl = t.grad_buffer(logits);
                               const auto& lv = logits.value();
                               const T s = g[0] / static_cast<T>(plane);
                               for (std::size_t i = 0; i < plane; ++i) {
                                 T pa, pb;
                                 detail::softmax2(lv[i], lv[plane + i], pa, pb);
                                 const T ta = target[i], tb = target[plane + i];
                                 gl[i] += s * (pa * (ta + tb) - ta);
                                 gl[plane + i] += s * (pb * (ta + tb) - tb);
                               }
                             });
}

}  // namespace lada::ops
