#pragma once

// Primitive differentiable operations recorded on a Tape.
//
// All reductions accumulate in a fixed sequential order so that results are
// reproducible bit-for-bit for a given build.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "crcda/error.hpp"
#include "crcda/tape.hpp"
#include "crcda/tensor.hpp"

namespace crcda {

/// Floor applied to probabilities before taking logarithms.
inline constexpr double kProbFloor = 1e-12;

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
void same_shape(Var<T> a, Var<T> b, const char* op) {
  require(a.tape == b.tape, std::string(op) + ": operands on different tapes");
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class T>
void add_into(std::vector<T>& dst, std::span<const T> src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

// Layout [outer, channels, inner] for an axis-1 view of a tensor of rank >= 2.
struct Axis1 {
  std::size_t outer, channels, inner;
};

inline Axis1 axis1(const Shape& s) {
  require(s.size() >= 2, "axis-1 op needs rank >= 2, got " + shape_str(s));
  std::size_t inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
  return {s[0], s[1], inner};
}

struct ConvGeom {
  std::size_t n, ci, h, w, co, k, stride, pad, ho, wo;
  std::size_t patch() const { return ci * k * k; }
  std::size_t pixels() const { return ho * wo; }
};

template <class T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.ci; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = cols + ((c * g.k + ky) * g.k + kx) * g.pixels();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
          T* dst = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* cols, const ConvGeom& g, T* dx) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.ci; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = cols + ((c * g.k + ky) * g.k + kx) * g.pixels();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          T* dst = dx + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const T* src = row + oy * g.wo;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Dense product of [m,k] and [k,n].
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  require(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0],
          "matmul: incompatible shapes " + shape_str(sa) + " x " + shape_str(sb));
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  Tensor<T> out({m, n});
  detail::MatMap<T>(out.data().data(), m, n).noalias() =
      detail::ConstMatMap<T>(a.value().data().data(), m, k) * detail::ConstMatMap<T>(b.value().data().data(), k, n);
  const bool ng = a.needs_grad() || b.needs_grad();
  return a.tape->push(std::move(out), ng, [a, b, m, k, n](Tape<T>& t, std::span<const T> g) {
    detail::ConstMatMap<T> G(g.data(), m, n);
    if (t.needs_grad(a.id)) {
      detail::MatMap<T>(t.grad(a.id).data(), m, k).noalias() +=
          G * detail::ConstMatMap<T>(t.value(b.id).data().data(), k, n).transpose();
    }
    if (t.needs_grad(b.id)) {
      detail::MatMap<T>(t.grad(b.id).data(), k, n).noalias() +=
          detail::ConstMatMap<T>(t.value(a.id).data().data(), m, k).transpose() * G;
    }
  });
}

/// 2-D convolution, square kernel, zero padding of kernel/2, given stride.
/// x: [N, Cin, H, W], weight: [Cout, Cin, k, k], bias: [Cout].
template <class T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, std::size_t stride) {
  const Shape& sx = x.shape();
  const Shape& sw = weight.shape();
  require(sx.size() == 4, "conv2d: input must be [N,C,H,W], got " + shape_str(sx));
  require(sw.size() == 4 && sw[2] == sw[3] && sw[1] == sx[1],
          "conv2d: weight " + shape_str(sw) + " incompatible with input " + shape_str(sx));
  require(bias.shape() == Shape{sw[0]}, "conv2d: bias must be [Cout]");
  require(stride >= 1, "conv2d: stride must be >= 1");
  detail::ConvGeom g{sx[0], sx[1], sx[2], sx[3], sw[0], sw[2], stride, sw[2] / 2, 0, 0};
  require(g.h + 2 * g.pad >= g.k && g.w + 2 * g.pad >= g.k, "conv2d: kernel larger than padded input");
  g.ho = (g.h + 2 * g.pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * g.pad - g.k) / stride + 1;

  const bool direct = g.k == 1 && stride == 1;  // columns are the input itself
  const std::size_t in_sz = g.ci * g.h * g.w;
  const std::size_t col_sz = g.patch() * g.pixels();
  std::vector<T> cols;
  if (!direct) cols.resize(g.n * col_sz);

  Tensor<T> out({g.n, g.co, g.ho, g.wo});
  const T* xd = x.value().data().data();
  detail::ConstMatMap<T> W(weight.value().data().data(), g.co, g.patch());
  const T* bd = bias.value().data().data();
  for (std::size_t n = 0; n < g.n; ++n) {
    const T* c = xd + n * in_sz;
    if (!direct) {
      detail::im2col(xd + n * in_sz, g, cols.data() + n * col_sz);
      c = cols.data() + n * col_sz;
    }
    detail::MatMap<T> O(out.data().data() + n * g.co * g.pixels(), g.co, g.pixels());
    O.noalias() = W * detail::ConstMatMap<T>(c, g.patch(), g.pixels());
    for (std::size_t o = 0; o < g.co; ++o) O.row(o).array() += bd[o];
  }

  const bool ng = x.needs_grad() || weight.needs_grad() || bias.needs_grad();
  return x.tape->push(std::move(out), ng,
                      [x, weight, bias, g, direct, in_sz, col_sz, cols = std::move(cols)](Tape<T>& t,
                                                                                       std::span<const T> gout) {
    const std::size_t out_sz = g.co * g.pixels();
    const T* xd = t.value(x.id).data().data();
    if (t.needs_grad(weight.id)) {
      detail::MatMap<T> dW(t.grad(weight.id).data(), g.co, g.patch());
      for (std::size_t n = 0; n < g.n; ++n) {
        const T* c = direct ? xd + n * in_sz : cols.data() + n * col_sz;
        dW.noalias() += detail::ConstMatMap<T>(gout.data() + n * out_sz, g.co, g.pixels()) *
                        detail::ConstMatMap<T>(c, g.patch(), g.pixels()).transpose();
      }
    }
    if (t.needs_grad(bias.id)) {
      auto& db = t.grad(bias.id);
      for (std::size_t n = 0; n < g.n; ++n)
        for (std::size_t o = 0; o < g.co; ++o) {
          const T* row = gout.data() + n * out_sz + o * g.pixels();
          T s = T(0);
          for (std::size_t p = 0; p < g.pixels(); ++p) s += row[p];
          db[o] += s;
        }
    }
    if (t.needs_grad(x.id)) {
      auto& dx = t.grad(x.id);
      detail::ConstMatMap<T> W(t.value(weight.id).data().data(), g.co, g.patch());
      std::vector<T> dcols(direct ? 0 : col_sz);
      for (std::size_t n = 0; n < g.n; ++n) {
        detail::ConstMatMap<T> G(gout.data() + n * out_sz, g.co, g.pixels());
        if (direct) {
          detail::MatMap<T>(dx.data() + n * in_sz, g.patch(), g.pixels()).noalias() += W.transpose() * G;
        } else {
          detail::MatMap<T>(dcols.data(), g.patch(), g.pixels()).noalias() = W.transpose() * G;
          detail::col2im_add(dcols.data(), g, dx.data() + n * in_sz);
        }
      }
    }
  });
}

/// Rectifier, max{x, 0}. The subgradient at 0 is taken as 0.
template <class T>
Var<T> relu(Var<T> x) {
  Tensor<T> out(x.shape());
  auto xd = x.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > T(0) ? xd[i] : T(0);
  return x.tape->push(std::move(out), x.needs_grad(), [x](Tape<T>& t, std::span<const T> g) {
    auto xd = t.value(x.id).data();
    auto& dx = t.grad(x.id);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xd[i] > T(0)) dx[i] += g[i];
  });
}

/// Same operation as relu(); used where the clamp reads better than a rectifier.
template <class T>
Var<T> clamp_min0(Var<T> x) {
  return relu(x);
}

/// Softmax over axis 1, stabilised by subtracting the per-position maximum.
template <class T>
Var<T> softmax_channels(Var<T> x) {
  const auto ax = detail::axis1(x.shape());
  Tensor<T> out(x.shape());
  auto xd = x.value().data();
  for (std::size_t o = 0; o < ax.outer; ++o) {
    for (std::size_t i = 0; i < ax.inner; ++i) {
      const std::size_t base = o * ax.channels * ax.inner + i;
      T mx = xd[base];
      for (std::size_t c = 1; c < ax.channels; ++c) mx = std::max(mx, xd[base + c * ax.inner]);
      T z = T(0);
      for (std::size_t c = 0; c < ax.channels; ++c) {
        const T e = std::exp(xd[base + c * ax.inner] - mx);
        out[base + c * ax.inner] = e;
        z += e;
      }
      for (std::size_t c = 0; c < ax.channels; ++c) out[base + c * ax.inner] /= z;
    }
  }
  const std::size_t self = x.tape->size();
  return x.tape->push(std::move(out), x.needs_grad(), [x, ax, self](Tape<T>& t, std::span<const T> g) {
    auto y = t.value(self).data();
    auto& dx = t.grad(x.id);
    for (std::size_t o = 0; o < ax.outer; ++o) {
      for (std::size_t i = 0; i < ax.inner; ++i) {
        const std::size_t base = o * ax.channels * ax.inner + i;
        T dot = T(0);
        for (std::size_t c = 0; c < ax.channels; ++c) dot += g[base + c * ax.inner] * y[base + c * ax.inner];
        for (std::size_t c = 0; c < ax.channels; ++c) {
          const std::size_t k = base + c * ax.inner;
          dx[k] += y[k] * (g[k] - dot);
        }
      }
    }
  });
}

/// Natural log of max{x, 1e-12}; zero gradient where the floor is active.
template <class T>
Var<T> log_floor(Var<T> x) {
  const T floor = static_cast<T>(kProbFloor);
  Tensor<T> out(x.shape());
  auto xd = x.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(xd[i], floor));
  return x.tape->push(std::move(out), x.needs_grad(), [x, floor](Tape<T>& t, std::span<const T> g) {
    auto xd = t.value(x.id).data();
    auto& dx = t.grad(x.id);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xd[i] > floor) dx[i] += g[i] / xd[i];
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  auto ad = a.value().data();
  auto bd = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return a.tape->push(std::move(out), a.needs_grad() || b.needs_grad(), [a, b](Tape<T>& t, std::span<const T> g) {
    if (t.needs_grad(a.id)) {
      auto bd = t.value(b.id).data();
      auto& da = t.grad(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bd[i];
    }
    if (t.needs_grad(b.id)) {
      auto ad = t.value(a.id).data();
      auto& db = t.grad(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * ad[i];
    }
  });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  auto ad = a.value().data();
  auto bd = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  return a.tape->push(std::move(out), a.needs_grad() || b.needs_grad(), [a, b](Tape<T>& t, std::span<const T> g) {
    if (t.needs_grad(a.id)) detail::add_into(t.grad(a.id), g);
    if (t.needs_grad(b.id)) detail::add_into(t.grad(b.id), g);
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  auto ad = a.value().data();
  auto bd = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  return a.tape->push(std::move(out), a.needs_grad() || b.needs_grad(), [a, b](Tape<T>& t, std::span<const T> g) {
    if (t.needs_grad(a.id)) detail::add_into(t.grad(a.id), g);
    if (t.needs_grad(b.id)) {
      auto& db = t.grad(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
    }
  });
}

/// y = scale * x + shift, elementwise.
template <class T>
Var<T> affine(Var<T> x, T scale, T shift = T(0)) {
  Tensor<T> out(x.shape());
  auto xd = x.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * xd[i] + shift;
  return x.tape->push(std::move(out), x.needs_grad(), [x, scale](Tape<T>& t, std::span<const T> g) {
    auto& dx = t.grad(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += scale * g[i];
  });
}

template <class T>
Var<T> scale(Var<T> x, T s) {
  return affine(x, s, T(0));
}

template <class T>
Var<T> sigmoid(Var<T> x) {
  Tensor<T> out(x.shape());
  auto xd = x.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = xd[i];
    if (v >= T(0)) {
      out[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      out[i] = e / (T(1) + e);
    }
  }
  const std::size_t self = x.tape->size();
  return x.tape->push(std::move(out), x.needs_grad(), [x, self](Tape<T>& t, std::span<const T> g) {
    auto y = t.value(self).data();
    auto& dx = t.grad(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * y[i] * (T(1) - y[i]);
  });
}

/// Sum of all entries, shape [1].
template <class T>
Var<T> sum(Var<T> x) {
  T s = T(0);
  for (T v : x.value().data()) s += v;
  return x.tape->push(Tensor<T>({1}, std::vector<T>{s}), x.needs_grad(), [x](Tape<T>& t, std::span<const T> g) {
    auto& dx = t.grad(x.id);
    for (auto& d : dx) d += g[0];
  });
}

/// Mean of all entries, shape [1].
template <class T>
Var<T> mean(Var<T> x) {
  const T inv = T(1) / static_cast<T>(x.size());
  T s = T(0);
  for (T v : x.value().data()) s += v;
  return x.tape->push(Tensor<T>({1}, std::vector<T>{s * inv}), x.needs_grad(),
                      [x, inv](Tape<T>& t, std::span<const T> g) {
                        auto& dx = t.grad(x.id);
                        const T d = g[0] * inv;
                        for (auto& v : dx) v += d;
                      });
}

/// Sum over axis 1 keeping the axis: [N, C, ...] -> [N, 1, ...].
template <class T>
Var<T> sum_channels(Var<T> x, T factor = T(1)) {
  const auto ax = detail::axis1(x.shape());
  Shape s = x.shape();
  s[1] = 1;
  Tensor<T> out(s);
  auto xd = x.value().data();
  for (std::size_t o = 0; o < ax.outer; ++o)
    for (std::size_t i = 0; i < ax.inner; ++i) {
      T acc = T(0);
      for (std::size_t c = 0; c < ax.channels; ++c) acc += xd[(o * ax.channels + c) * ax.inner + i];
      out[o * ax.inner + i] = acc * factor;
    }
  return x.tape->push(std::move(out), x.needs_grad(), [x, ax, factor](Tape<T>& t, std::span<const T> g) {
    auto& dx = t.grad(x.id);
    for (std::size_t o = 0; o < ax.outer; ++o)
      for (std::size_t i = 0; i < ax.inner; ++i) {
        const T d = g[o * ax.inner + i] * factor;
        for (std::size_t c = 0; c < ax.channels; ++c) dx[(o * ax.channels + c) * ax.inner + i] += d;
      }
  });
}

/// Mean over axis 1 keeping the axis: [N, C, ...] -> [N, 1, ...].
/// Computed as x_0 + sum_c (x_c - x_0) / C so that equal entries give back x_0
/// exactly; the derivative is still 1/C per entry.
template <class T>
Var<T> mean_channels(Var<T> x) {
  const auto ax = detail::axis1(x.shape());
  const T inv = T(1) / static_cast<T>(ax.channels);
  Shape s = x.shape();
  s[1] = 1;
  Tensor<T> out(s);
  auto xd = x.value().data();
  for (std::size_t o = 0; o < ax.outer; ++o)
    for (std::size_t i = 0; i < ax.inner; ++i) {
      const T x0 = xd[o * ax.channels * ax.inner + i];
      T acc = T(0);
      for (std::size_t c = 1; c < ax.channels; ++c) acc += xd[(o * ax.channels + c) * ax.inner + i] - x0;
      out[o * ax.inner + i] = x0 + acc * inv;
    }
  return x.tape->push(std::move(out), x.needs_grad(), [x, ax, inv](Tape<T>& t, std::span<const T> g) {
    auto& dx = t.grad(x.id);
    for (std::size_t o = 0; o < ax.outer; ++o)
      for (std::size_t i = 0; i < ax.inner; ++i) {
        const T d = g[o * ax.inner + i] * inv;
        for (std::size_t c = 0; c < ax.channels; ++c) dx[(o * ax.channels + c) * ax.inner + i] += d;
      }
  });
}

/// Repeat a [N, 1, ...] tensor along axis 1 to `channels` copies.
template <class T>
Var<T> broadcast_channels(Var<T> x, std::size_t channels) {
  const auto ax = detail::axis1(x.shape());
  require(ax.channels == 1, "broadcast_channels: axis 1 must have size 1");
  Shape s = x.shape();
  s[1] = channels;
  Tensor<T> out(s);
  auto xd = x.value().data();
  for (std::size_t o = 0; o < ax.outer; ++o)
    for (std::size_t c = 0; c < channels; ++c)
      std::copy_n(xd.data() + o * ax.inner, ax.inner, out.data().data() + (o * channels + c) * ax.inner);
  return x.tape->push(std::move(out), x.needs_grad(), [x, ax, channels](Tape<T>& t, std::span<const T> g) {
    auto& dx = t.grad(x.id);
    for (std::size_t o = 0; o < ax.outer; ++o)
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t i = 0; i < ax.inner; ++i) dx[o * ax.inner + i] += g[(o * channels + c) * ax.inner + i];
  });
}

/// Concatenate along axis 1; all other dimensions must agree.
template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), "concat_channels: no inputs");
  const Shape& s0 = parts[0].shape();
  const auto ax0 = detail::axis1(s0);
  std::size_t total = 0;
  bool ng = false;
  for (const auto& p : parts) {
    Shape s = p.shape();
    require(p.tape == parts[0].tape, "concat_channels: operands on different tapes");
    require(s.size() == s0.size(), "concat_channels: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      require(i == 1 || s[i] == s0[i], "concat_channels: shape mismatch " + shape_str(s) + " vs " + shape_str(s0));
    total += s[1];
    ng = ng || p.needs_grad();
  }
  Shape so = s0;
  so[1] = total;
  Tensor<T> out(so);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t ch = p.shape()[1];
    auto pd = p.value().data();
    for (std::size_t o = 0; o < ax0.outer; ++o)
      std::copy_n(pd.data() + o * ch * ax0.inner, ch * ax0.inner,
                  out.data().data() + (o * total + off) * ax0.inner);
    off += ch;
  }
  return parts[0].tape->push(std::move(out), ng, [parts, total, ax0](Tape<T>& t, std::span<const T> g) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t ch = t.value(p.id).shape()[1];
      if (t.needs_grad(p.id)) {
        auto& dp = t.grad(p.id);
        for (std::size_t o = 0; o < ax0.outer; ++o) {
          const T* src = g.data() + (o * total + off) * ax0.inner;
          T* dst = dp.data() + o * ch * ax0.inner;
          for (std::size_t i = 0; i < ch * ax0.inner; ++i) dst[i] += src[i];
        }
      }
      off += ch;
    }
  });
}

/// Nearest-neighbour upsampling of [N, C, h, w] by integer factors.
template <class T>
Var<T> upsample_nearest(Var<T> x, std::size_t fh, std::size_t fw) {
  const Shape& s = x.shape();
  require(s.size() == 4, "upsample_nearest: input must be [N,C,H,W]");
  require(fh >= 1 && fw >= 1, "upsample_nearest: factors must be >= 1");
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3], H = h * fh, W = w * fw;
  Tensor<T> out({s[0], s[1], H, W});
  auto xd = x.value().data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < H; ++y) {
      const T* src = xd.data() + (p * h + y / fh) * w;
      T* dst = out.data().data() + (p * H + y) * W;
      for (std::size_t xx = 0; xx < W; ++xx) dst[xx] = src[xx / fw];
    }
  return x.tape->push(std::move(out), x.needs_grad(), [x, planes, h, w, fh, fw](Tape<T>& t, std::span<const T> g) {
    auto& dx = t.grad(x.id);
    const std::size_t H = h * fh, W = w * fw;
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < H; ++y) {
        const T* src = g.data() + (p * H + y) * W;
        T* dst = dx.data() + (p * h + y / fh) * w;
        for (std::size_t xx = 0; xx < W; ++xx) dst[xx / fw] += src[xx];
      }
  });
}

/// Non-overlapping average pooling with window = stride = (kh, kw).
template <class T>
Var<T> avg_pool(Var<T> x, std::size_t kh, std::size_t kw) {
  const Shape& s = x.shape();
  require(s.size() == 4, "avg_pool: input must be [N,C,H,W]");
  require(kh >= 1 && kw >= 1 && s[2] % kh == 0 && s[3] % kw == 0,
          "avg_pool: window must divide the spatial size " + shape_str(s));
  const std::size_t planes = s[0] * s[1], H = s[2], W = s[3], h = H / kh, w = W / kw;
  const T inv = T(1) / static_cast<T>(kh * kw);
  Tensor<T> out({s[0], s[1], h, w});
  auto xd = x.value().data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        T acc = T(0);
        for (std::size_t dy = 0; dy < kh; ++dy)
          for (std::size_t dx = 0; dx < kw; ++dx) acc += xd[(p * H + i * kh + dy) * W + j * kw + dx];
        out[(p * h + i) * w + j] = acc * inv;
      }
  return x.tape->push(std::move(out), x.needs_grad(),
                      [x, planes, H, W, h, w, kh, kw, inv](Tape<T>& t, std::span<const T> g) {
                        auto& dxv = t.grad(x.id);
                        for (std::size_t p = 0; p < planes; ++p)
                          for (std::size_t i = 0; i < h; ++i)
                            for (std::size_t j = 0; j < w; ++j) {
                              const T d = g[(p * h + i) * w + j] * inv;
                              for (std::size_t dy = 0; dy < kh; ++dy)
                                for (std::size_t dx = 0; dx < kw; ++dx) dxv[(p * H + i * kh + dy) * W + j * kw + dx] += d;
                            }
                      });
}

/// Identity forward; backward hands upstream exactly -lambda times the incoming gradient.
template <class T>
Var<T> grad_reverse(Var<T> x, T lambda) {
  require(lambda >= T(0), "grad_reverse: lambda must be nonnegative");
  Tensor<T> out = x.value();
  out.set_requires_grad(false);
  const T factor = -lambda;
  return x.tape->push(std::move(out), x.needs_grad(), [x, factor](Tape<T>& t, std::span<const T> g) {
    auto& dx = t.grad(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += factor * g[i];
  });
}

}  // namespace crcda
