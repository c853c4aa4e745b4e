#pragma once

// Checkpoint file layout (little-endian):
//   "PTGC" | u32 version | u32 entry count
//   per entry: u16 name length | name (UTF-8) | u8 rank | u32 dims[rank] | f32 values

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ptg/binary_io.hpp"
#include "ptg/parameters.hpp"

namespace ptg {

inline constexpr std::uint32_t kCheckpointVersion = 1;

using Checkpoint = std::vector<std::pair<std::string, Tensor<float>>>;

template <class T>
void append_entries(Checkpoint& ckpt, const ParameterTree<T>& tree) {
  for (const auto& [name, t] : tree) ckpt.emplace_back(name, t.template cast<float>());
}

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt) {
  binary::Writer w;
  w.put_bytes("PTGC");
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.size()));
  for (const auto& [name, t] : ckpt) {
    if (name.size() > 0xffff) throw ContractError("parameter name too long: " + name);
    if (t.rank() > 0xff) throw ContractError("rank too large for " + name);
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.put_bytes(name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (float v : t.data()) w.put<float>(v);
  }
  return w.bytes();
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  binary::save_bytes(path, encode_checkpoint(ckpt));
}

inline Checkpoint decode_checkpoint(binary::Reader r) {
  const std::size_t magic_at = r.offset();
  if (r.get_bytes(4, "magic") != "PTGC") throw FormatError("bad checkpoint magic", magic_at);
  const std::size_t version_at = r.offset();
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version), version_at);
  const auto count = r.get<std::uint32_t>("entry count");
  Checkpoint ckpt;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto len = r.get<std::uint16_t>("name length");
    std::string name = r.get_bytes(len, "name");
    const std::size_t rank_at = r.offset();
    const auto rank = r.get<std::uint8_t>("rank");
    if (rank == 0) throw FormatError("entry " + name + " has rank 0", rank_at);
    Shape shape;
    for (std::uint8_t a = 0; a < rank; ++a) {
      const std::size_t dim_at = r.offset();
      const auto d = r.get<std::uint32_t>("dimension");
      if (d == 0) throw FormatError("entry " + name + " has a zero dimension", dim_at);
      shape.push_back(d);
    }
    const std::size_t n = shape_numel(shape);
    if (r.remaining() / sizeof(float) < n) throw FormatError("truncated values of " + name, r.offset());
    std::vector<float> values(n);
    for (auto& v : values) v = r.get<float>("value");
    ckpt.emplace_back(std::move(name), Tensor<float>(std::move(shape), std::move(values)));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after last entry", r.offset());
  return ckpt;
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(binary::Reader::load(path));
}

/// Copies every tree entry from the checkpoint by name. Missing names or
/// shape mismatches are errors unless `partial` is set, in which case
/// entries absent from the checkpoint keep their values.
template <class T>
std::size_t load_into(ParameterTree<T>& tree, const Checkpoint& ckpt, bool partial = false) {
  std::size_t loaded = 0;
  for (auto& [name, t] : tree) {
    const Tensor<float>* src = nullptr;
    for (const auto& [n, v] : ckpt)
      if (n == name) src = &v;
    if (!src) {
      if (partial) continue;
      throw InputError("checkpoint has no entry " + name);
    }
    if (src->shape() != t.shape())
      throw InputError("checkpoint entry " + name + " has shape " + shape_string(src->shape()) +
                       ", model expects " + shape_string(t.shape()));
    auto dst = t.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>((*src)[i]);
    ++loaded;
  }
  return loaded;
}

}  // namespace ptg
