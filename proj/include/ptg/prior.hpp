#pragma once

// Off-the-shelf feature priors. OSF1 layout (little-endian):
//   "OSF1" | u32 dim | u8 tag length | tag (UTF-8) | f32 values[dim]

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ptg/binary_io.hpp"
#include "ptg/image.hpp"
#include "ptg/random.hpp"

namespace ptg {

struct PriorVector {
  std::vector<float> values;
  std::string source_tag;

  std::size_t dim() const { return values.size(); }

  void validate() const {
    if (values.empty()) throw InputError("prior vector has dimension 0");
    for (std::size_t i = 0; i < values.size(); ++i)
      if (!std::isfinite(values[i]))
        throw InputError("prior value " + std::to_string(i) + " is not finite");
    if (source_tag.size() > 0xff) throw InputError("prior source tag longer than 255 bytes");
  }

  template <class T>
  Tensor<T> tensor() const {
    return Tensor<T>(Shape{values.size()}, std::vector<T>(values.begin(), values.end()));
  }
};

inline std::vector<unsigned char> encode_prior(const PriorVector& v) {
  v.validate();
  binary::Writer w;
  w.put_bytes("OSF1");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(v.dim()));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(v.source_tag.size()));
  w.put_bytes(v.source_tag);
  for (float x : v.values) w.put<float>(x);
  return w.bytes();
}

inline PriorVector decode_prior(binary::Reader r) {
  if (r.get_bytes(4, "magic") != "OSF1") throw FormatError("bad prior magic", 0);
  const auto dim = r.get<std::uint32_t>("dimension");
  if (dim == 0) throw InputError("prior file declares dimension 0");
  const auto tag_len = r.get<std::uint8_t>("tag length");
  PriorVector v;
  v.source_tag = r.get_bytes(tag_len, "source tag");
  if (r.remaining() != static_cast<std::size_t>(dim) * sizeof(float))
    throw FormatError("payload holds " + std::to_string(r.remaining()) + " bytes, dimension " +
                          std::to_string(dim) + " needs " + std::to_string(dim * sizeof(float)),
                      r.offset());
  v.values.resize(dim);
  for (auto& x : v.values) x = r.get<float>("value");
  v.validate();
  return v;
}

inline void write_prior(const std::filesystem::path& path, const PriorVector& v) {
  binary::save_bytes(path, encode_prior(v));
}

inline PriorVector read_prior(const std::filesystem::path& path) {
  return decode_prior(binary::Reader::load(path));
}

/// Deterministic stand-in for a pre-trained feature extractor.
///
/// Per-channel mean and standard deviation over a 4x4 grid of cells (96
/// statistics, single precision, row-major cell order) are mapped to `dim`
/// values by a seeded random projection followed by tanh. Equal images give
/// equal vectors; the projection is dense, so any change in the statistics
/// moves every coordinate.
inline PriorVector stub_prior(const Image& image, std::size_t dim, std::uint64_t seed) {
  if (dim == 0) throw InputError("stub prior dimension must be at least 1");
  if (image.rank() != 3 || image.dim(2) != 3)
    throw DimensionError("stub_prior: expected (H, W, 3), got " + shape_string(image.shape()));
  constexpr std::size_t grid = 4;
  const std::size_t H = image.dim(0), W = image.dim(1);
  float sum[grid * grid][3] = {}, sq[grid * grid][3] = {};
  std::size_t count[grid * grid] = {};
  for (std::size_t y = 0; y < H; ++y) {
    const std::size_t gy = y * grid / H;
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t cell = gy * grid + x * grid / W;
      ++count[cell];
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = image.at(y, x, c);
        sum[cell][c] += v;
        sq[cell][c] += v * v;
      }
    }
  }
  std::vector<float> stats;
  for (std::size_t cell = 0; cell < grid * grid; ++cell)
    for (std::size_t c = 0; c < 3; ++c) {
      const float n = static_cast<float>(std::max<std::size_t>(count[cell], 1));
      const float m = sum[cell][c] / n;
      const float var = std::max(sq[cell][c] / n - m * m, 0.0f);
      stats.push_back(2.0f * m - 1.0f);
      stats.push_back(4.0f * std::sqrt(var) - 1.0f);
    }

  Rng rng(derive_seed(seed, "stub_prior"));
  const float gain = 2.0f / std::sqrt(static_cast<float>(stats.size()));
  PriorVector out;
  out.source_tag = "stub";
  out.values.resize(dim);
  for (std::size_t j = 0; j < dim; ++j) {
    float acc = static_cast<float>(rng.uniform(-0.5, 0.5));
    for (float s : stats) acc += gain * static_cast<float>(rng.normal()) * s;
    out.values[j] = std::tanh(acc);
  }
  return out;
}

}  // namespace ptg
