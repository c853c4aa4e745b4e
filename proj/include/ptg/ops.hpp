#pragma once

// Differentiable tensor operations. Every op takes the tape of the current
// forward pass first; results require a gradient iff the tape is recording
// and some operand requires one. Layout is channels-last (h, w, c).

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ptg/errors.hpp"
#include "ptg/tape.hpp"
#include "ptg/tensor.hpp"

namespace ptg {

namespace detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMatrix = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMapMatrix = Eigen::Map<const RowMatrix<T>>;

inline void expect(bool ok, const std::string& message) {
  if (!ok) throw DimensionError(message);
}

inline void expect_rank(const Shape& shape, std::size_t rank, const char* op, const char* arg) {
  expect(shape.size() == rank, std::string(op) + ": " + arg + " must have rank " +
                                   std::to_string(rank) + ", got " + shape_string(shape));
}

inline void expect_same(const Shape& a, const Shape& b, const char* op) {
  if (a.size() != b.size())
    throw DimensionError(std::string(op) + ": rank mismatch " + shape_string(a) + " vs " +
                         shape_string(b));
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i])
      throw DimensionError(std::string(op) + ": axis " + std::to_string(i) + " differs (" +
                           std::to_string(a[i]) + " vs " + std::to_string(b[i]) + ")");
}

template <class T, class Fwd, class Deriv>
Tensor<T> unary(Tape<T>& tape, const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  const bool track = tape.tracks(x);
  Tensor<T> out(x.shape(), track);
  auto xs = x.data();
  auto ys = out.data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = fwd(xs[i]);
  if (track) {
    tape.push([xn = x.node(), yn = out.node(), deriv] {
      if (yn->grad.empty()) return;
      auto& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i)
        gx[i] += yn->grad[i] * deriv(xn->data[i], yn->data[i]);
    });
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::expect_same(a.shape(), b.shape(), "add");
  const bool track = tape.tracks(a, b);
  Tensor<T> out(a.shape(), track);
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] + b[i];
  if (track) {
    tape.push([an = a.node(), bn = b.node(), on = out.node()] {
      if (on->grad.empty()) return;
      for (auto* n : {an.get(), bn.get()}) {
        if (!n->requires_grad) continue;
        auto& g = n->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::expect_same(a.shape(), b.shape(), "sub");
  const bool track = tape.tracks(a, b);
  Tensor<T> out(a.shape(), track);
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] - b[i];
  if (track) {
    tape.push([an = a.node(), bn = b.node(), on = out.node()] {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        auto& g = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        auto& g = bn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= on->grad[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::expect_same(a.shape(), b.shape(), "mul");
  const bool track = tape.tracks(a, b);
  Tensor<T> out(a.shape(), track);
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * b[i];
  if (track) {
    tape.push([an = a.node(), bn = b.node(), on = out.node()] {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        auto& g = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        auto& g = bn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * an->data[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scalar_mul(Tape<T>& tape, const Tensor<T>& x, T s) {
  return detail::unary(tape, x, [s](T v) { return s * v; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add_scalar(Tape<T>& tape, const Tensor<T>& x, T s) {
  return detail::unary(tape, x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> square(Tape<T>& tape, const Tensor<T>& x) {
  return detail::unary(tape, x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <class T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& x) {
  return detail::unary(
      tape, x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
  return detail::unary(
      tape, x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> tanh(Tape<T>& tape, const Tensor<T>& x) {
  return detail::unary(
      tape, x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

/// x * sigmoid(x). Smooth, so finite-difference checks never straddle a kink.
template <class T>
Tensor<T> silu(Tape<T>& tape, const Tensor<T>& x) {
  return detail::unary(
      tape, x, [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T v, T) {
        const T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  const bool track = tape.tracks(x);
  T acc = T(0);
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc, track);
  if (track) {
    tape.push([xn = x.node(), on = out.node()] {
      if (on->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (auto& v : g) v += on->grad[0];
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x) {
  return scalar_mul(tape, sum(tape, x), T(1) / static_cast<T>(x.numel()));
}

/// mean(|a - b|) as a scalar tensor. The subgradient at a == b is 0.
template <class T>
Tensor<T> mean_abs_error(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::expect_same(a.shape(), b.shape(), "mean_abs_error");
  const bool track = tape.tracks(a, b);
  const T inv_n = T(1) / static_cast<T>(a.numel());
  T acc = T(0);
  for (std::size_t i = 0; i < a.numel(); ++i) acc += std::abs(a[i] - b[i]);
  Tensor<T> out = Tensor<T>::scalar(acc * inv_n, track);
  if (track) {
    tape.push([an = a.node(), bn = b.node(), on = out.node(), inv_n] {
      if (on->grad.empty()) return;
      const T g0 = on->grad[0] * inv_n;
      auto sign = [](T d) { return d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0)); };
      if (an->requires_grad) {
        auto& g = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * sign(an->data[i] - bn->data[i]);
      }
      if (bn->requires_grad) {
        auto& g = bn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= g0 * sign(an->data[i] - bn->data[i]);
      }
    });
  }
  return out;
}

/// (h, w, c) -> (c): spatial mean per channel.
template <class T>
Tensor<T> global_avg_pool(Tape<T>& tape, const Tensor<T>& x) {
  detail::expect_rank(x.shape(), 3, "global_avg_pool", "input");
  const std::size_t hw = x.dim(0) * x.dim(1), c = x.dim(2);
  const bool track = tape.tracks(x);
  Tensor<T> out(Shape{c}, track);
  auto o = out.data();
  auto xs = x.data();
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t ch = 0; ch < c; ++ch) o[ch] += xs[p * c + ch];
  const T inv = T(1) / static_cast<T>(hw);
  for (auto& v : o) v *= inv;
  if (track) {
    tape.push([xn = x.node(), on = out.node(), hw, c, inv] {
      if (on->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t ch = 0; ch < c; ++ch) g[p * c + ch] += on->grad[ch] * inv;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape plumbing

template <class T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape) {
  detail::expect(shape_numel(shape) == x.numel(),
                 "reshape: " + shape_string(x.shape()) + " cannot become " + shape_string(shape));
  const bool track = tape.tracks(x);
  std::vector<T> values(x.data().begin(), x.data().end());
  Tensor<T> out(std::move(shape), std::move(values), track);
  if (track) {
    tape.push([xn = x.node(), on = out.node()] {
      if (on->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
    });
  }
  return out;
}

/// Concatenates along the last axis; all leading axes must agree.
template <class T>
Tensor<T> concat_channels(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
  detail::expect(!parts.empty(), "concat_channels: no operands");
  const Shape& first = parts.front().shape();
  const std::size_t rank = first.size();
  std::size_t total = 0;
  bool track = false;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Shape& s = parts[i].shape();
    detail::expect(s.size() == rank, "concat_channels: operand " + std::to_string(i) +
                                         " has rank " + std::to_string(s.size()));
    for (std::size_t a = 0; a + 1 < rank; ++a)
      detail::expect(s[a] == first[a], "concat_channels: operand " + std::to_string(i) +
                                           " differs on axis " + std::to_string(a) + " (" +
                                           std::to_string(s[a]) + " vs " +
                                           std::to_string(first[a]) + ")");
    total += s.back();
    track = track || tape.tracks(parts[i]);
  }
  Shape out_shape = first;
  out_shape.back() = total;
  Tensor<T> out(out_shape, track);
  const std::size_t positions = out.numel() / total;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t c = p.shape().back();
    auto src = p.data();
    auto dst = out.data();
    for (std::size_t q = 0; q < positions; ++q)
      std::copy_n(src.begin() + q * c, c, dst.begin() + q * total + off);
    off += c;
  }
  if (track) {
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    tape.push([nodes, offsets, on = out.node(), positions, total] {
      if (on->grad.empty()) return;
      for (std::size_t i = 0; i < nodes.size(); ++i) {
        auto& n = *nodes[i];
        if (!n.requires_grad) continue;
        const std::size_t c = n.shape.back();
        auto& g = n.grad_buffer();
        for (std::size_t q = 0; q < positions; ++q)
          for (std::size_t ch = 0; ch < c; ++ch)
            g[q * c + ch] += on->grad[q * total + offsets[i] + ch];
      }
    });
  }
  return out;
}

/// Repeats a (c) vector at every location of an (h, w, c) map.
template <class T>
Tensor<T> tile_spatial(Tape<T>& tape, const Tensor<T>& v, std::size_t h, std::size_t w) {
  detail::expect_rank(v.shape(), 1, "tile_spatial", "vector");
  const std::size_t c = v.dim(0);
  const bool track = tape.tracks(v);
  Tensor<T> out(Shape{h, w, c}, track);
  auto o = out.data();
  for (std::size_t p = 0; p < h * w; ++p) std::copy_n(v.data().begin(), c, o.begin() + p * c);
  if (track) {
    tape.push([vn = v.node(), on = out.node(), hw = h * w, c] {
      if (on->grad.empty()) return;
      auto& g = vn->grad_buffer();
      for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t ch = 0; ch < c; ++ch) g[ch] += on->grad[p * c + ch];
    });
  }
  return out;
}

/// x (h, w, c) times a single-channel map m (h, w, 1) broadcast over channels.
template <class T>
Tensor<T> mul_spatial(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& m) {
  detail::expect_rank(x.shape(), 3, "mul_spatial", "input");
  detail::expect_rank(m.shape(), 3, "mul_spatial", "map");
  detail::expect(m.dim(2) == 1, "mul_spatial: map axis 2 must be 1, got " + std::to_string(m.dim(2)));
  detail::expect(m.dim(0) == x.dim(0), "mul_spatial: axis 0 differs");
  detail::expect(m.dim(1) == x.dim(1), "mul_spatial: axis 1 differs");
  const std::size_t hw = x.dim(0) * x.dim(1), c = x.dim(2);
  const bool track = tape.tracks(x, m);
  Tensor<T> out(x.shape(), track);
  auto o = out.data();
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t ch = 0; ch < c; ++ch) o[p * c + ch] = x[p * c + ch] * m[p];
  if (track) {
    tape.push([xn = x.node(), mn = m.node(), on = out.node(), hw, c] {
      if (on->grad.empty()) return;
      if (xn->requires_grad) {
        auto& g = xn->grad_buffer();
        for (std::size_t p = 0; p < hw; ++p)
          for (std::size_t ch = 0; ch < c; ++ch) g[p * c + ch] += on->grad[p * c + ch] * mn->data[p];
      }
      if (mn->requires_grad) {
        auto& g = mn->grad_buffer();
        for (std::size_t p = 0; p < hw; ++p) {
          T acc = T(0);
          for (std::size_t ch = 0; ch < c; ++ch) acc += on->grad[p * c + ch] * xn->data[p * c + ch];
          g[p] += acc;
        }
      }
    });
  }
  return out;
}

/// x (h, w, c) scaled per channel by s (c).
template <class T>
Tensor<T> mul_channels(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& s) {
  detail::expect_rank(x.shape(), 3, "mul_channels", "input");
  detail::expect_rank(s.shape(), 1, "mul_channels", "scale");
  detail::expect(s.dim(0) == x.dim(2), "mul_channels: axis 2 of input (" + std::to_string(x.dim(2)) +
                                           ") differs from scale length (" +
                                           std::to_string(s.dim(0)) + ")");
  const std::size_t hw = x.dim(0) * x.dim(1), c = x.dim(2);
  const bool track = tape.tracks(x, s);
  Tensor<T> out(x.shape(), track);
  auto o = out.data();
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t ch = 0; ch < c; ++ch) o[p * c + ch] = x[p * c + ch] * s[ch];
  if (track) {
    tape.push([xn = x.node(), sn = s.node(), on = out.node(), hw, c] {
      if (on->grad.empty()) return;
      if (xn->requires_grad) {
        auto& g = xn->grad_buffer();
        for (std::size_t p = 0; p < hw; ++p)
          for (std::size_t ch = 0; ch < c; ++ch) g[p * c + ch] += on->grad[p * c + ch] * sn->data[ch];
      }
      if (sn->requires_grad) {
        auto& g = sn->grad_buffer();
        for (std::size_t p = 0; p < hw; ++p)
          for (std::size_t ch = 0; ch < c; ++ch) g[ch] += on->grad[p * c + ch] * xn->data[p * c + ch];
      }
    });
  }
  return out;
}

/// Bilinear resampling of an (h, w, c) map with half-pixel centres and edge
/// clamping.
template <class T>
Tensor<T> bilinear_resize(Tape<T>& tape, const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::expect_rank(x.shape(), 3, "bilinear_resize", "input");
  detail::expect(out_h > 0 && out_w > 0, "bilinear_resize: target size must be positive");
  struct Tap {
    std::size_t i0, i1;
    T w1;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> result(out);
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(src));
      const std::size_t i1 = std::min(i0 + 1, in - 1);
      result[o] = {i0, i1, static_cast<T>(src - static_cast<double>(i0))};
    }
    return result;
  };
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  auto ty = taps(h, out_h);
  auto tx = taps(w, out_w);
  const bool track = tape.tracks(x);
  Tensor<T> out(Shape{out_h, out_w, c}, track);
  auto o = out.data();
  auto xs = x.data();
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const auto& a = ty[oy];
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const auto& b = tx[ox];
      const T w00 = (T(1) - a.w1) * (T(1) - b.w1), w01 = (T(1) - a.w1) * b.w1;
      const T w10 = a.w1 * (T(1) - b.w1), w11 = a.w1 * b.w1;
      for (std::size_t ch = 0; ch < c; ++ch) {
        o[(oy * out_w + ox) * c + ch] = w00 * xs[(a.i0 * w + b.i0) * c + ch] +
                                        w01 * xs[(a.i0 * w + b.i1) * c + ch] +
                                        w10 * xs[(a.i1 * w + b.i0) * c + ch] +
                                        w11 * xs[(a.i1 * w + b.i1) * c + ch];
      }
    }
  }
  if (track) {
    tape.push([xn = x.node(), on = out.node(), ty = std::move(ty), tx = std::move(tx), w, c] {
      if (on->grad.empty()) return;
      auto& g = xn->grad_buffer();
      const std::size_t out_w = tx.size();
      for (std::size_t oy = 0; oy < ty.size(); ++oy) {
        const auto& a = ty[oy];
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const auto& b = tx[ox];
          const T w00 = (T(1) - a.w1) * (T(1) - b.w1), w01 = (T(1) - a.w1) * b.w1;
          const T w10 = a.w1 * (T(1) - b.w1), w11 = a.w1 * b.w1;
          for (std::size_t ch = 0; ch < c; ++ch) {
            const T go = on->grad[(oy * out_w + ox) * c + ch];
            g[(a.i0 * w + b.i0) * c + ch] += w00 * go;
            g[(a.i0 * w + b.i1) * c + ch] += w01 * go;
            g[(a.i1 * w + b.i0) * c + ch] += w10 * go;
            g[(a.i1 * w + b.i1) * c + ch] += w11 * go;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dense algebra

/// a (n, k) times b (k, m).
template <class T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::expect_rank(a.shape(), 2, "matmul", "lhs");
  detail::expect_rank(b.shape(), 2, "matmul", "rhs");
  detail::expect(a.dim(1) == b.dim(0), "matmul: lhs axis 1 (" + std::to_string(a.dim(1)) +
                                           ") differs from rhs axis 0 (" +
                                           std::to_string(b.dim(0)) + ")");
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  const bool track = tape.tracks(a, b);
  Tensor<T> out(Shape{n, m}, track);
  using CM = detail::ConstMapMatrix<T>;
  using MM = detail::MapMatrix<T>;
  MM(out.data().data(), n, m).noalias() = CM(a.data().data(), n, k) * CM(b.data().data(), k, m);
  if (track) {
    tape.push([an = a.node(), bn = b.node(), on = out.node(), n, k, m] {
      if (on->grad.empty()) return;
      CM go(on->grad.data(), n, m);
      if (an->requires_grad)
        MM(an->grad_buffer().data(), n, k).noalias() += go * CM(bn->data.data(), k, m).transpose();
      if (bn->requires_grad)
        MM(bn->grad_buffer().data(), k, m).noalias() += CM(an->data.data(), n, k).transpose() * go;
    });
  }
  return out;
}

/// a (n, k) times transpose(b) with b (m, k).
template <class T>
Tensor<T> matmul_nt(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::expect_rank(a.shape(), 2, "matmul_nt", "lhs");
  detail::expect_rank(b.shape(), 2, "matmul_nt", "rhs");
  detail::expect(a.dim(1) == b.dim(1), "matmul_nt: lhs axis 1 (" + std::to_string(a.dim(1)) +
                                           ") differs from rhs axis 1 (" +
                                           std::to_string(b.dim(1)) + ")");
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(0);
  const bool track = tape.tracks(a, b);
  Tensor<T> out(Shape{n, m}, track);
  using CM = detail::ConstMapMatrix<T>;
  using MM = detail::MapMatrix<T>;
  MM(out.data().data(), n, m).noalias() =
      CM(a.data().data(), n, k) * CM(b.data().data(), m, k).transpose();
  if (track) {
    tape.push([an = a.node(), bn = b.node(), on = out.node(), n, k, m] {
      if (on->grad.empty()) return;
      CM go(on->grad.data(), n, m);
      if (an->requires_grad)
        MM(an->grad_buffer().data(), n, k).noalias() += go * CM(bn->data.data(), m, k);
      if (bn->requires_grad)
        MM(bn->grad_buffer().data(), m, k).noalias() += go.transpose() * CM(an->data.data(), n, k);
    });
  }
  return out;
}

/// matrix (r, c) times vector (c).
template <class T>
Tensor<T> matvec(Tape<T>& tape, const Tensor<T>& matrix, const Tensor<T>& v) {
  detail::expect_rank(matrix.shape(), 2, "matvec", "matrix");
  detail::expect_rank(v.shape(), 1, "matvec", "vector");
  detail::expect(matrix.dim(1) == v.dim(0), "matvec: matrix axis 1 (" +
                                                std::to_string(matrix.dim(1)) +
                                                ") differs from vector length (" +
                                                std::to_string(v.dim(0)) + ")");
  auto col = reshape(tape, v, Shape{v.dim(0), 1});
  return reshape(tape, matmul(tape, matrix, col), Shape{matrix.dim(0)});
}

/// x (n, d_in) or (d_in) times weight (d_in, d_out) plus bias (d_out).
template <class T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::expect_rank(weight.shape(), 2, "linear", "weight");
  detail::expect_rank(bias.shape(), 1, "linear", "bias");
  detail::expect(x.rank() == 1 || x.rank() == 2, "linear: input must have rank 1 or 2, got " +
                                                     shape_string(x.shape()));
  const std::size_t d_in = x.shape().back(), d_out = weight.dim(1);
  detail::expect(weight.dim(0) == d_in, "linear: weight axis 0 (" + std::to_string(weight.dim(0)) +
                                            ") differs from input width (" +
                                            std::to_string(d_in) + ")");
  detail::expect(bias.dim(0) == d_out, "linear: bias length (" + std::to_string(bias.dim(0)) +
                                           ") differs from weight axis 1 (" +
                                           std::to_string(d_out) + ")");
  const std::size_t n = x.rank() == 1 ? 1 : x.dim(0);
  const bool track = tape.tracks(x, weight, bias);
  Shape out_shape = x.rank() == 1 ? Shape{d_out} : Shape{n, d_out};
  Tensor<T> out(out_shape, track);
  using CM = detail::ConstMapMatrix<T>;
  using MM = detail::MapMatrix<T>;
  MM o(out.data().data(), n, d_out);
  o.noalias() = CM(x.data().data(), n, d_in) * CM(weight.data().data(), d_in, d_out);
  o.rowwise() += CM(bias.data().data(), 1, d_out).row(0);
  if (track) {
    tape.push([xn = x.node(), wn = weight.node(), bn = bias.node(), on = out.node(), n, d_in,
               d_out] {
      if (on->grad.empty()) return;
      CM go(on->grad.data(), n, d_out);
      if (xn->requires_grad)
        MM(xn->grad_buffer().data(), n, d_in).noalias() +=
            go * CM(wn->data.data(), d_in, d_out).transpose();
      if (wn->requires_grad)
        MM(wn->grad_buffer().data(), d_in, d_out).noalias() +=
            CM(xn->data.data(), n, d_in).transpose() * go;
      if (bn->requires_grad) MM(bn->grad_buffer().data(), 1, d_out) += go.colwise().sum();
    });
  }
  return out;
}

/// Row-wise softmax of an (n, m) matrix.
template <class T>
Tensor<T> softmax_rows(Tape<T>& tape, const Tensor<T>& x) {
  detail::expect_rank(x.shape(), 2, "softmax_rows", "input");
  const std::size_t n = x.dim(0), m = x.dim(1);
  const bool track = tape.tracks(x);
  Tensor<T> out(x.shape(), track);
  for (std::size_t r = 0; r < n; ++r) {
    T peak = x[r * m];
    for (std::size_t j = 1; j < m; ++j) peak = std::max(peak, x[r * m + j]);
    T total = T(0);
    for (std::size_t j = 0; j < m; ++j) {
      out[r * m + j] = std::exp(x[r * m + j] - peak);
      total += out[r * m + j];
    }
    for (std::size_t j = 0; j < m; ++j) out[r * m + j] /= total;
  }
  if (track) {
    tape.push([xn = x.node(), on = out.node(), n, m] {
      if (on->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (std::size_t r = 0; r < n; ++r) {
        T dot = T(0);
        for (std::size_t j = 0; j < m; ++j) dot += on->grad[r * m + j] * on->data[r * m + j];
        for (std::size_t j = 0; j < m; ++j)
          g[r * m + j] += on->data[r * m + j] * (on->grad[r * m + j] - dot);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolutions

/// Cross-correlation of input (h, w, c_in) with weight (k, k, c_in, c_out)
/// plus bias (c_out). Output size is floor((h + 2 pad - k) / stride) + 1.
///
/// Lowered to im2col + GEMM: patch columns are ordered (dy, dx, c_in), which
/// is exactly the row-major order of the weight's leading three axes.
template <class T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, std::size_t stride = 1, std::size_t padding = 0) {
  detail::expect_rank(input.shape(), 3, "conv2d", "input");
  detail::expect_rank(weight.shape(), 4, "conv2d", "weight");
  detail::expect_rank(bias.shape(), 1, "conv2d", "bias");
  const std::size_t k = weight.dim(0);
  detail::expect(weight.dim(1) == k, "conv2d: weight axis 1 (" + std::to_string(weight.dim(1)) +
                                         ") differs from axis 0 (" + std::to_string(k) + ")");
  detail::expect(k % 2 == 1, "conv2d: weight axis 0 must be odd, got " + std::to_string(k));
  const std::size_t h = input.dim(0), w = input.dim(1), c_in = input.dim(2);
  detail::expect(weight.dim(2) == c_in, "conv2d: weight axis 2 (" + std::to_string(weight.dim(2)) +
                                            ") differs from input axis 2 (" +
                                            std::to_string(c_in) + ")");
  const std::size_t c_out = weight.dim(3);
  detail::expect(bias.dim(0) == c_out, "conv2d: bias axis 0 (" + std::to_string(bias.dim(0)) +
                                           ") differs from weight axis 3 (" +
                                           std::to_string(c_out) + ")");
  detail::expect(stride >= 1, "conv2d: stride must be positive");
  detail::expect(h + 2 * padding >= k, "conv2d: axis 0 too small for kernel");
  detail::expect(w + 2 * padding >= k, "conv2d: axis 1 too small for kernel");
  const std::size_t oh = (h + 2 * padding - k) / stride + 1;
  const std::size_t ow = (w + 2 * padding - k) / stride + 1;
  const std::size_t patches = oh * ow, depth = k * k * c_in;

  const bool pointwise = k == 1 && stride == 1 && padding == 0;
  auto columns = std::make_shared<Buffer<T>>();
  if (!pointwise) {
    columns->assign(patches * depth, T(0));
    const auto xs = input.data();
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T* row = columns->data() + (oy * ow + ox) * depth;
        for (std::size_t dy = 0; dy < k; ++dy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + dy) -
                          static_cast<std::ptrdiff_t>(padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t dx = 0; dx < k; ++dx) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + dx) -
                            static_cast<std::ptrdiff_t>(padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            std::copy_n(xs.begin() + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * c_in,
                        c_in, row + (dy * k + dx) * c_in);
          }
        }
      }
    }
  }

  const bool track = tape.tracks(input, weight, bias);
  Tensor<T> out(Shape{oh, ow, c_out}, track);
  using CM = detail::ConstMapMatrix<T>;
  using MM = detail::MapMatrix<T>;
  const T* col_ptr = pointwise ? input.data().data() : columns->data();
  MM o(out.data().data(), patches, c_out);
  o.noalias() = CM(col_ptr, patches, depth) * CM(weight.data().data(), depth, c_out);
  o.rowwise() += CM(bias.data().data(), 1, c_out).row(0);

  if (track) {
    tape.push([in = input.node(), wn = weight.node(), bn = bias.node(), on = out.node(), columns,
               pointwise, k, stride, padding, h, w, c_in, c_out, oh, ow, patches, depth] {
      if (on->grad.empty()) return;
      CM go(on->grad.data(), patches, c_out);
      const T* col_ptr = pointwise ? in->data.data() : columns->data();
      if (wn->requires_grad)
        MM(wn->grad_buffer().data(), depth, c_out).noalias() +=
            CM(col_ptr, patches, depth).transpose() * go;
      if (bn->requires_grad) MM(bn->grad_buffer().data(), 1, c_out) += go.colwise().sum();
      if (!in->requires_grad) return;
      auto& gi = in->grad_buffer();
      if (pointwise) {
        MM(gi.data(), patches, depth).noalias() += go * CM(wn->data.data(), depth, c_out).transpose();
        return;
      }
      detail::RowMatrix<T> dcols = go * CM(wn->data.data(), depth, c_out).transpose();
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const T* row = dcols.data() + (oy * ow + ox) * depth;
          for (std::size_t dy = 0; dy < k; ++dy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * stride + dy) -
                            static_cast<std::ptrdiff_t>(padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t dx = 0; dx < k; ++dx) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * stride + dx) -
                              static_cast<std::ptrdiff_t>(padding);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              T* dst = gi.data() + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * c_in;
              const T* src = row + (dy * k + dx) * c_in;
              for (std::size_t ch = 0; ch < c_in; ++ch) dst[ch] += src[ch];
            }
          }
        }
      }
    });
  }
  return out;
}

/// Depthwise convolution with a distinct k x k filter per location and
/// channel. kernels is (h, w, k*k*c); the filter taps at (y, x) are stored in
/// (dy, dx, ch) order. The input is zero-padded by (k - 1) / 2.
template <class T>
Tensor<T> per_location_conv(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& kernels) {
  detail::expect_rank(input.shape(), 3, "per_location_conv", "input");
  detail::expect_rank(kernels.shape(), 3, "per_location_conv", "kernels");
  const std::size_t h = input.dim(0), w = input.dim(1), c = input.dim(2);
  detail::expect(kernels.dim(0) == h, "per_location_conv: kernels axis 0 differs from input");
  detail::expect(kernels.dim(1) == w, "per_location_conv: kernels axis 1 differs from input");
  const std::size_t taps = kernels.dim(2) / c;
  std::size_t k = 1;
  while (k * k < taps) ++k;
  if (kernels.dim(2) % c != 0 || k * k != taps || k % 2 == 0)
    throw DimensionError("per_location_conv: kernels axis 2 (" + std::to_string(kernels.dim(2)) +
                         ") is not k*k*" + std::to_string(c) + " for an odd k");
  const auto r = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t depth = k * k * c;

  const bool track = tape.tracks(input, kernels);
  Tensor<T> out(input.shape(), track);
  const T* xs = input.data().data();
  const T* ks = kernels.data().data();
  T* o = out.data().data();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const T* kern = ks + (y * w + x) * depth;
      T* dst = o + (y * w + x) * c;
      for (std::size_t dy = 0; dy < k; ++dy) {
        const auto iy = static_cast<std::ptrdiff_t>(y + dy) - r;
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t dx = 0; dx < k; ++dx) {
          const auto ix = static_cast<std::ptrdiff_t>(x + dx) - r;
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
          const T* src = xs + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * c;
          const T* tap = kern + (dy * k + dx) * c;
          for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch] * tap[ch];
        }
      }
    }
  }
  if (track) {
    tape.push([in = input.node(), kn = kernels.node(), on = out.node(), h, w, c, k, r, depth] {
      if (on->grad.empty()) return;
      T* gi = in->requires_grad ? in->grad_buffer().data() : nullptr;
      T* gk = kn->requires_grad ? kn->grad_buffer().data() : nullptr;
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const T* go = on->grad.data() + (y * w + x) * c;
          const std::size_t kbase = (y * w + x) * depth;
          for (std::size_t dy = 0; dy < k; ++dy) {
            const auto iy = static_cast<std::ptrdiff_t>(y + dy) - r;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t dx = 0; dx < k; ++dx) {
              const auto ix = static_cast<std::ptrdiff_t>(x + dx) - r;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              const std::size_t ibase =
                  (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * c;
              const std::size_t tbase = kbase + (dy * k + dx) * c;
              for (std::size_t ch = 0; ch < c; ++ch) {
                if (gi) gi[ibase + ch] += go[ch] * kn->data[tbase + ch];
                if (gk) gk[tbase + ch] += go[ch] * in->data[ibase + ch];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace ptg
