#pragma once

// Brute-force reference implementations, written without the library's ops
// so they can serve as independent oracles.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;

/// Direct 2D convolution over an (h, w, cin) map, weights (k, k, cin, cout),
/// zero padding `pad`, output size floor((h + 2*pad - k) / stride) + 1.
inline Vec conv2d(const Vec& in, std::size_t h, std::size_t w, std::size_t cin, const Vec& weight, const Vec& bias,
                  std::size_t k, std::size_t cout, std::size_t stride, std::size_t pad, std::size_t& oh,
                  std::size_t& ow) {
  oh = (h + 2 * pad - k) / stride + 1;
  ow = (w + 2 * pad - k) / stride + 1;
  Vec out(oh * ow * cout, 0.0);
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox)
      for (std::size_t co = 0; co < cout; ++co) {
        double acc = bias[co];
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx)
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const long iy = static_cast<long>(oy * stride + dy) - static_cast<long>(pad);
              const long ix = static_cast<long>(ox * stride + dx) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
              acc += in[(iy * w + ix) * cin + ci] * weight[((dy * k + dx) * cin + ci) * cout + co];
            }
        out[(oy * ow + ox) * cout + co] = acc;
      }
  return out;
}

/// Per-location depthwise convolution, triple loop over (position, channel,
/// tap); kernel taps stored (dy, dx, ch) per position, zero padding.
inline Vec per_location_conv(const Vec& in, std::size_t h, std::size_t w, std::size_t c, const Vec& kernels,
                             std::size_t k) {
  Vec out(h * w * c, 0.0);
  const long r = static_cast<long>(k / 2);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (long dy = -r; dy <= r; ++dy)
          for (long dx = -r; dx <= r; ++dx) {
            const long iy = static_cast<long>(y) + dy, ix = static_cast<long>(x) + dx;
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
            const std::size_t tap = static_cast<std::size_t>((dy + r) * static_cast<long>(k) + (dx + r));
            acc += in[(iy * w + ix) * c + ch] * kernels[(y * w + x) * k * k * c + tap * c + ch];
          }
        out[(y * w + x) * c + ch] = acc;
      }
  return out;
}

/// x (n, d) times W (d, m) plus b (m).
inline Vec affine(const Vec& x, std::size_t n, std::size_t d, const Vec& W, const Vec& b, std::size_t m) {
  Vec out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double acc = b[j];
      for (std::size_t t = 0; t < d; ++t) acc += x[i * d + t] * W[t * m + j];
      out[i * m + j] = acc;
    }
  return out;
}

struct Attention {
  Vec out;
  Vec weights;
};

/// Single-head attention with residual: x + (softmax(QK^T/sqrt(d)) V) Wo + bo.
inline Attention self_attention(const Vec& x, std::size_t n, std::size_t d, const Vec& wq, const Vec& bq,
                                const Vec& wk, const Vec& bk, const Vec& wv, const Vec& bv, const Vec& wo,
                                const Vec& bo) {
  const Vec q = affine(x, n, d, wq, bq, d), kk = affine(x, n, d, wk, bk, d), v = affine(x, n, d, wv, bv, d);
  Attention a{Vec(n * d), Vec(n * n)};
  for (std::size_t i = 0; i < n; ++i) {
    double top = -1e300;
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < d; ++t) s += q[i * d + t] * kk[j * d + t];
      a.weights[i * n + j] = s / std::sqrt(static_cast<double>(d));
      top = std::max(top, a.weights[i * n + j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (a.weights[i * n + j] = std::exp(a.weights[i * n + j] - top));
    for (std::size_t j = 0; j < n; ++j) a.weights[i * n + j] /= z;
  }
  Vec mixed(n * d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t t = 0; t < d; ++t) mixed[i * d + t] += a.weights[i * n + j] * v[j * d + t];
  const Vec projected = affine(mixed, n, d, wo, bo, d);
  for (std::size_t i = 0; i < n * d; ++i) a.out[i] = x[i] + projected[i];
  return a;
}

inline double max_abs_diff(const Vec& a, const Vec& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// 10 log10(1 / MSE) from the definition.
inline double psnr(const Vec& a, const Vec& b) {
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
  return 10.0 * std::log10(static_cast<double>(a.size()) / se);
}

}  // namespace oracle
