#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ptg/degrade.hpp"
#include "ptg/image.hpp"
#include "ptg/prior.hpp"
#include "ptg/random.hpp"

namespace ptg {

/// One manifest line: a clean image and, optionally, the prior file computed
/// for its degraded version.
struct ManifestRecord {
  std::filesystem::path clean;
  std::optional<std::filesystem::path> prior;
  std::string key;  // file name of the clean image; seeds its crop and degradation
};

/// Reads "clean_path [prior_path]" lines; blank lines and '#' comments are
/// skipped. Relative paths resolve against the manifest's directory.
inline std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  const auto base = path.parent_path();
  auto resolve = [&](const std::string& p) {
    std::filesystem::path fp(p);
    return fp.is_absolute() ? fp : base / fp;
  };
  std::vector<ManifestRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    std::string clean, prior, extra;
    if (!(fields >> clean)) continue;
    ManifestRecord r{resolve(clean), std::nullopt, std::filesystem::path(clean).filename().string()};
    if (fields >> prior) r.prior = resolve(prior);
    if (fields >> extra)
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": too many fields");
    records.push_back(std::move(r));
  }
  return records;
}

/// Paths inside the manifest's directory are written relative to it, others
/// absolute.
inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records) {
  const auto base = std::filesystem::absolute(path).parent_path();
  auto render = [&](const std::filesystem::path& p) {
    const auto abs = std::filesystem::absolute(p).lexically_normal();
    const auto rel = abs.lexically_relative(base);
    return (rel.empty() || *rel.begin() == "..") ? abs.string() : rel.string();
  };
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& r : records) {
    out << render(r.clean);
    if (r.prior) out << ' ' << render(*r.prior);
    out << '\n';
  }
}

struct Sample {
  std::string key;
  Image clean;
  Image degraded;
  PriorVector prior;
};

struct DataOptions {
  std::size_t crop_size = 64;
  std::size_t prior_dim = 512;
  std::uint64_t data_seed = 0;   // crops and degradations
  std::uint64_t prior_seed = 0;  // stub priors
  double max_noise_sigma = 0.02;
};

/// Seeded crop and low-light degradation of a clean image, keyed by `key`
/// so results do not depend on dataset order or location. Without a prior the stub is
/// computed from the degraded crop.
inline Sample make_sample(const std::string& key, const Image& full, const DataOptions& opts,
                          std::optional<PriorVector> prior = std::nullopt) {
  Sample s;
  s.key = key;
  const std::size_t cs = opts.crop_size;
  if (full.rank() != 3 || full.dim(2) != 3)
    throw DimensionError(key + ": expected an (H, W, 3) image, got " + shape_string(full.shape()));
  if (full.dim(0) < cs || full.dim(1) < cs)
    throw InputError(key + ": image " + shape_string(full.shape()) + " is smaller than the " +
                     std::to_string(cs) + "x" + std::to_string(cs) + " crop");
  Rng rng(derive_seed(opts.data_seed, key));
  const std::size_t top = rng.index(full.dim(0) - cs + 1);
  const std::size_t left = rng.index(full.dim(1) - cs + 1);
  s.clean = crop(full, top, left, cs, cs);
  const auto spec = DegradationSpec::sample_lowlight(rng, opts.max_noise_sigma, rng.next());
  s.degraded = degrade(s.clean, spec);
  if (prior) {
    if (prior->dim() != opts.prior_dim)
      throw InputError(key + ": prior dimension " + std::to_string(prior->dim()) + " differs from the configured " +
                       std::to_string(opts.prior_dim));
    s.prior = std::move(*prior);
  } else {
    s.prior = stub_prior(s.degraded, opts.prior_dim, opts.prior_seed);
  }
  return s;
}

inline Sample prepare_sample(const ManifestRecord& record, const DataOptions& opts) {
  std::optional<PriorVector> prior;
  if (record.prior) {
    if (!std::filesystem::exists(*record.prior))
      throw IoError(record.key + ": prior file " + record.prior->string() + " is missing");
    prior = read_prior(*record.prior);
  }
  return make_sample(record.key, read_ppm(record.clean), opts, std::move(prior));
}

inline std::vector<Sample> load_dataset(const std::filesystem::path& manifest, const DataOptions& opts) {
  std::vector<Sample> out;
  for (const auto& r : read_manifest(manifest)) out.push_back(prepare_sample(r, opts));
  if (out.empty()) throw InputError("manifest " + manifest.string() + " lists no images");
  return out;
}

/// Procedural clean scene: a two-colour gradient background with textured
/// rectangles and discs.
inline Image synthesize_scene(std::uint64_t seed, std::size_t h = 64, std::size_t w = 64) {
  Rng rng(derive_seed(seed, "scene"));
  auto colour = [&] {
    return std::array<float, 3>{static_cast<float>(rng.uniform(0.05, 0.95)),
                                static_cast<float>(rng.uniform(0.05, 0.95)),
                                static_cast<float>(rng.uniform(0.05, 0.95))};
  };
  Image img(Shape{h, w, 3});
  const auto c0 = colour(), c1 = colour();
  const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double u = ((x / double(w) - 0.5) * ca + (y / double(h) - 0.5) * sa) * 0.7 + 0.5;
      const float t = static_cast<float>(std::clamp(u, 0.0, 1.0));
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = (1 - t) * c0[c] + t * c1[c];
    }
  const std::size_t shapes = 3 + rng.index(5);
  for (std::size_t s = 0; s < shapes; ++s) {
    const auto col = colour();
    const bool disc = rng.uniform() < 0.5;
    const double cy = rng.uniform(0, h), cx = rng.uniform(0, w);
    const double ry = rng.uniform(4, h / 3.0), rx = disc ? ry : rng.uniform(4, w / 3.0);
    const double freq = rng.uniform() < 0.5 ? 0.0 : rng.uniform(0.3, 1.2);
    const double phase = rng.uniform(0, 6.3), amp = rng.uniform(0.05, 0.25);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double dy = (y - cy) / ry, dx = (x - cx) / rx;
        const bool inside = disc ? dy * dy + dx * dx <= 1.0 : std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
        if (!inside) continue;
        const double tex = freq > 0 ? amp * std::sin(freq * (x + 0.5 * y) + phase) : 0.0;
        for (std::size_t c = 0; c < 3; ++c)
          img.at(y, x, c) = static_cast<float>(std::clamp(col[c] + tex, 0.0, 1.0));
      }
  }
  return img;
}

inline std::string scene_name(std::size_t index) {
  std::ostringstream name;
  name << "scene_" << std::setw(4) << std::setfill('0') << index << ".ppm";
  return name.str();
}

/// In-memory synthetic set: `count` scenes named as write_synthetic_set
/// would name them, prepared with `opts`.
inline std::vector<Sample> synthetic_samples(std::size_t count, std::uint64_t seed, const DataOptions& opts,
                                             std::size_t first = 0) {
  std::vector<Sample> out;
  for (std::size_t i = first; i < first + count; ++i)
    out.push_back(make_sample(scene_name(i), synthesize_scene(derive_seed(seed, i), opts.crop_size, opts.crop_size),
                              opts));
  return out;
}

/// Writes `count` synthetic scenes as PPM files plus "manifest.txt" listing
/// them (no prior column, so priors are stubbed). Returns the manifest path.
inline std::filesystem::path write_synthetic_set(const std::filesystem::path& dir, std::size_t count,
                                                 std::uint64_t seed, std::size_t size = 64, std::size_t first = 0) {
  std::filesystem::create_directories(dir);
  std::vector<ManifestRecord> records;
  for (std::size_t i = first; i < first + count; ++i) {
    const auto name = scene_name(i);
    write_ppm(dir / name, synthesize_scene(derive_seed(seed, i), size, size));
    records.push_back({dir / name, std::nullopt, name});
  }
  const auto manifest = dir / "manifest.txt";
  write_manifest(manifest, records);
  return manifest;
}

}  // namespace ptg
