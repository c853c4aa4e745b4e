#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ptg/image.hpp"
#include "ptg/random.hpp"

namespace ptg {

enum class DegradationKind { lowlight, gaussian_noise, gaussian_blur };

inline std::string to_string(DegradationKind k) {
  switch (k) {
    case DegradationKind::lowlight: return "lowlight";
    case DegradationKind::gaussian_noise: return "gaussian_noise";
    case DegradationKind::gaussian_blur: return "gaussian_blur";
  }
  return "?";
}

struct DegradationSpec {
  DegradationKind kind = DegradationKind::lowlight;
  double gamma = 2.0;       // lowlight
  double scale = 0.3;       // lowlight
  double sigma = 0.0;       // noise std-dev (lowlight, gaussian_noise)
  double blur_sigma = 1.0;  // gaussian_blur
  std::uint64_t seed = 0;

  void validate() const {
    auto in = [](double v, double lo, double hi) { return std::isfinite(v) && v >= lo && v <= hi; };
    switch (kind) {
      case DegradationKind::lowlight:
        if (!in(gamma, 1.0, 3.0)) throw InputError("lowlight gamma must lie in [1, 3]");
        if (!in(scale, 1e-6, 1.0)) throw InputError("lowlight scale must lie in (0, 1]");
        if (!in(sigma, 0.0, 0.1)) throw InputError("lowlight noise sigma must lie in [0, 0.1]");
        break;
      case DegradationKind::gaussian_noise:
        if (!in(sigma, 0.0, 1.0)) throw InputError("noise sigma must lie in [0, 1]");
        break;
      case DegradationKind::gaussian_blur:
        if (!in(blur_sigma, 0.0, 16.0)) throw InputError("blur sigma must lie in [0, 16]");
        break;
    }
  }

  /// Low-light parameters for the toy task: gamma in [1.5, 3], scale in
  /// [0.1, 0.5], noise sigma in [0, max_sigma].
  static DegradationSpec sample_lowlight(Rng& rng, double max_sigma, std::uint64_t seed) {
    DegradationSpec s;
    s.kind = DegradationKind::lowlight;
    s.gamma = rng.uniform(1.5, 3.0);
    s.scale = rng.uniform(0.1, 0.5);
    s.sigma = rng.uniform(0.0, max_sigma);
    s.seed = seed;
    return s;
  }
};

namespace detail {

inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < static_cast<std::ptrdiff_t>(n) ? i : period - i);
}

inline Image gaussian_blur(const Image& img, double sigma) {
  if (sigma <= 0.0) return img.clone();
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<float> taps;
  double total = 0.0;
  for (std::ptrdiff_t t = -radius; t <= radius; ++t) total += std::exp(-0.5 * t * t / (sigma * sigma));
  for (std::ptrdiff_t t = -radius; t <= radius; ++t)
    taps.push_back(static_cast<float>(std::exp(-0.5 * t * t / (sigma * sigma)) / total));
  const std::size_t H = img.dim(0), W = img.dim(1), C = img.dim(2);
  Image tmp(img.shape()), out(img.shape());
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < C; ++c) {
        float acc = 0.0f;
        for (std::ptrdiff_t t = -radius; t <= radius; ++t)
          acc += taps[static_cast<std::size_t>(t + radius)] *
                 img.at(y, reflect_index(static_cast<std::ptrdiff_t>(x) + t, W), c);
        tmp.at(y, x, c) = acc;
      }
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < C; ++c) {
        float acc = 0.0f;
        for (std::ptrdiff_t t = -radius; t <= radius; ++t)
          acc += taps[static_cast<std::size_t>(t + radius)] *
                 tmp.at(reflect_index(static_cast<std::ptrdiff_t>(y) + t, H), x, c);
        out.at(y, x, c) = acc;
      }
  return out;
}

}  // namespace detail

/// Applies a synthetic degradation; the result is clamped to [0, 1].
inline Image degrade(const Image& clean, const DegradationSpec& spec) {
  spec.validate();
  if (clean.rank() != 3) throw DimensionError("degrade: expected (H, W, C), got " + shape_string(clean.shape()));
  for (float v : clean.data())
    if (!(v >= 0.0f && v <= 1.0f)) throw InputError("degrade: clean image has a pixel outside [0, 1]");
  Rng rng(derive_seed(spec.seed, "degrade"));
  Image out = clean.clone();
  auto d = out.data();
  switch (spec.kind) {
    case DegradationKind::lowlight:
      for (auto& v : d) {
        const double dark = std::pow(static_cast<double>(v), spec.gamma) * spec.scale;
        const double noise = spec.sigma > 0.0 ? spec.sigma * rng.normal() : 0.0;
        v = static_cast<float>(dark + noise);
      }
      break;
    case DegradationKind::gaussian_noise:
      if (spec.sigma > 0.0)
        for (auto& v : d) v = static_cast<float>(v + spec.sigma * rng.normal());
      break;
    case DegradationKind::gaussian_blur:
      out = detail::gaussian_blur(clean, spec.blur_sigma);
      break;
  }
  return clamp01(out);
}

}  // namespace ptg
