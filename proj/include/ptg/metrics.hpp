#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "ptg/image.hpp"

namespace ptg {

/// Reported PSNR for identical images (and the cap for all others).
inline constexpr double kPsnrCap = 99.0;

/// PSNR in dB over all channels, peak value 1.
inline double psnr(const Image& a, const Image& b) {
  if (a.shape() != b.shape())
    throw DimensionError("psnr: shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) + " differ");
  double se = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    se += d * d;
  }
  if (se == 0.0) return kPsnrCap;
  const double mse = se / static_cast<double>(a.numel());
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

namespace detail {

inline std::vector<double> luminance(const Image& img) {
  std::vector<double> g(img.dim(0) * img.dim(1));
  for (std::size_t p = 0; p < g.size(); ++p)
    g[p] = 0.299 * img[p * 3] + 0.587 * img[p * 3 + 1] + 0.114 * img[p * 3 + 2];
  return g;
}

}  // namespace detail

/// Mean SSIM of the luminance channels over all valid 11x11 Gaussian
/// (sigma 1.5) windows; K1 = 0.01, K2 = 0.03, dynamic range 1.
inline double ssim(const Image& a, const Image& b) {
  if (a.shape() != b.shape())
    throw DimensionError("ssim: shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) + " differ");
  if (a.rank() != 3 || a.dim(2) != 3) throw DimensionError("ssim: expected (H, W, 3) images");
  constexpr std::size_t win = 11;
  constexpr double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const std::size_t H = a.dim(0), W = a.dim(1);
  if (H < win || W < win) throw InputError("ssim: images smaller than the 11x11 window");

  double kernel[win][win];
  double total = 0.0;
  for (std::size_t i = 0; i < win; ++i)
    for (std::size_t j = 0; j < win; ++j) {
      const double dy = static_cast<double>(i) - 5.0, dx = static_cast<double>(j) - 5.0;
      kernel[i][j] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      total += kernel[i][j];
    }
  for (auto& row : kernel)
    for (auto& v : row) v /= total;

  const auto x = detail::luminance(a), y = detail::luminance(b);
  double acc = 0.0;
  for (std::size_t oy = 0; oy + win <= H; ++oy)
    for (std::size_t ox = 0; ox + win <= W; ++ox) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (std::size_t i = 0; i < win; ++i)
        for (std::size_t j = 0; j < win; ++j) {
          const double k = kernel[i][j];
          const double u = x[(oy + i) * W + ox + j], v = y[(oy + i) * W + ox + j];
          mx += k * u;
          my += k * v;
          sxx += k * u * u;
          syy += k * v * v;
          sxy += k * u * v;
        }
      const double vx = sxx - mx * mx, vy = syy - my * my, cov = sxy - mx * my;
      acc += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
  return acc / static_cast<double>((H - win + 1) * (W - win + 1));
}

struct MetricReport {
  std::vector<double> psnr_db;
  std::vector<double> ssim;

  void add(const Image& prediction, const Image& truth) {
    const Image p = clamp01(prediction);
    psnr_db.push_back(psnr(p, truth));
    ssim.push_back(ptg::ssim(p, truth));
  }

  double mean_psnr() const { return mean(psnr_db); }
  double mean_ssim() const { return mean(ssim); }

 private:
  static double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  }
};

}  // namespace ptg
