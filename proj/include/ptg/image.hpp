#pragma once

// Images are (H, W, 3) float tensors with values in [0, 1]. Files are binary
// PPM (P6, maxval 255).

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "ptg/errors.hpp"
#include "ptg/tensor.hpp"

namespace ptg {

using Image = Tensor<float>;

/// Round-half-up quantisation of a clamped [0, 1] value to 8 bits.
inline unsigned char quantize_u8(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<unsigned char>(std::floor(c * 255.0f + 0.5f));
}

inline Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  auto fail = [&](const std::string& why) { return InputError(path.string() + ": " + why); };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&] {
    skip_space();
    std::size_t v = 0, digits = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (++digits > 9) throw fail("header number too long");
    }
    if (digits == 0) throw fail("malformed PPM header");
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw fail("not a binary PPM (P6)");
  pos = 2;
  const std::size_t w = number(), h = number(), maxval = number();
  if (maxval != 255) throw fail("only maxval 255 is supported");
  if (w == 0 || h == 0) throw fail("empty image");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw fail("malformed PPM header");
  ++pos;
  if (bytes.size() - pos < w * h * 3) throw fail("truncated pixel data");
  Image img(Shape{h, w, 3});
  auto d = img.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<float>(bytes[pos + i]) / 255.0f;
  return img;
}

inline void write_ppm(const std::filesystem::path& path, const Image& img) {
  if (img.rank() != 3 || img.dim(2) != 3)
    throw DimensionError("write_ppm: expected (H, W, 3), got " + shape_string(img.shape()));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P6\n" << img.dim(1) << ' ' << img.dim(0) << "\n255\n";
  std::vector<unsigned char> px(img.numel());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = quantize_u8(img[i]);
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

/// Replicates an (H, W, 1) map into a grey RGB image.
inline Image grey_to_rgb(const Tensor<float>& map) {
  Image img(Shape{map.dim(0), map.dim(1), 3});
  for (std::size_t p = 0; p < map.numel(); ++p)
    for (std::size_t c = 0; c < 3; ++c) img[p * 3 + c] = map[p];
  return img;
}

inline Image clamp01(const Image& img) {
  Image out = img.clone();
  for (auto& v : out.data()) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

inline Image crop(const Image& img, std::size_t top, std::size_t left, std::size_t h, std::size_t w) {
  if (top + h > img.dim(0) || left + w > img.dim(1))
    throw InputError("crop " + std::to_string(h) + "x" + std::to_string(w) + " exceeds image " +
                     shape_string(img.shape()));
  const std::size_t c = img.dim(2);
  Image out(Shape{h, w, c});
  for (std::size_t y = 0; y < h; ++y)
    std::copy_n(img.data().begin() + ((top + y) * img.dim(1) + left) * c, w * c,
                out.data().begin() + y * w * c);
  return out;
}

}  // namespace ptg
