#pragma once

// Run configuration shared by every subcommand: a JSON document with one
// object per section, every key optional, unknown keys rejected.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ptg/dataset.hpp"
#include "ptg/refinement.hpp"
#include "ptg/train.hpp"

namespace ptg {

struct RunConfig {
  RefinementConfig model;
  TrainConfig train;

  struct Data {
    std::size_t crop_size = 64;
    std::uint64_t data_seed = 0;
    std::uint64_t prior_seed = 0;
    double max_noise_sigma = 0.02;
  } data;

  struct Paths {
    std::string manifest;        // stub-priors input
    std::string train_manifest;
    std::string test_manifest;
    std::string checkpoint;      // eval / refine input
    std::string input;           // refine: degraded PPM
    std::string prior;           // refine: OSF1 file; empty means stub
    std::string prior_dir;       // stub-priors output; empty means <output_dir>/priors
    std::string output_dir = "ptg_out";
  } paths;

  struct Refine {
    bool force_identity = false;
  } refine;

  struct Ablate {
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::vector<std::string> variants;  // labels; empty means full + every single toggle
  } ablate;

  struct GradCheck {
    std::size_t trials = 24;
    double tolerance = 1e-4;
  } gradcheck;

  struct Stub {
    bool write_degraded = false;
  } stub;

  struct Synth {
    std::size_t count = 200;
    std::size_t size = 64;
    std::uint64_t seed = 0;
    std::size_t first = 0;
  } synth;

  DataOptions data_options() const {
    return {data.crop_size, model.prior_dim, data.data_seed, data.prior_seed, data.max_noise_sigma};
  }

  std::vector<Ablation> ablation_variants() const;

  void validate() const {
    model.validate();
    train.validate();
    if (data.crop_size == 0 || data.crop_size % model.scale() != 0)
      throw ConfigError("data.crop_size must be a positive multiple of " + std::to_string(model.scale()));
    if (!(data.max_noise_sigma >= 0.0 && data.max_noise_sigma <= 0.1))
      throw ConfigError("data.max_noise_sigma must lie in [0, 0.1]");
    if (gradcheck.trials == 0) throw ConfigError("gradcheck.trials must be positive");
    if (!(gradcheck.tolerance > 0.0)) throw ConfigError("gradcheck.tolerance must be positive");
    if (ablate.seeds.empty()) throw ConfigError("ablate.seeds must not be empty");
    ablation_variants();
  }
};

/// Parses "full" or toggle names joined by '+', e.g. "no_ca+no_sa".
inline Ablation parse_variant(const std::string& label) {
  if (label == "full") return {};
  std::vector<std::string> toggles;
  std::size_t start = 0;
  while (start <= label.size()) {
    const auto plus = label.find('+', start);
    toggles.push_back(label.substr(start, plus == std::string::npos ? std::string::npos : plus - start));
    if (plus == std::string::npos) break;
    start = plus + 1;
  }
  return Ablation::from_names(toggles);
}

inline std::vector<Ablation> RunConfig::ablation_variants() const {
  if (ablate.variants.empty()) {
    std::vector<Ablation> out{Ablation{}};
    for (const auto& name : Ablation::names()) out.push_back(Ablation::from_names({name}));
    return out;
  }
  std::vector<Ablation> out;
  for (const auto& v : ablate.variants) out.push_back(parse_variant(v));
  return out;
}

namespace detail {

using nlohmann::json;

struct ConfigKey {
  std::string name;  // "section.key"
  std::string doc;
  std::function<json(const RunConfig&)> get;
  std::function<void(RunConfig&, const json&)> set;
};

template <class Access>
ConfigKey config_key(std::string name, std::string doc, Access access) {
  using Value = std::remove_reference_t<decltype(access(std::declval<RunConfig&>()))>;
  return {std::move(name), std::move(doc),
          [access](const RunConfig& c) { return json(access(const_cast<RunConfig&>(c))); },
          [access](RunConfig& c, const json& v) { access(c) = v.get<Value>(); }};
}

}  // namespace detail

/// Every accepted key, in documentation order.
inline const std::vector<detail::ConfigKey>& config_keys() {
  using detail::config_key;
  using detail::json;
  static const std::vector<detail::ConfigKey> keys = [] {
    std::vector<detail::ConfigKey> k;
    k.push_back(config_key("model.channels", "feature width c", [](RunConfig& c) -> auto& { return c.model.channels; }));
    k.push_back(config_key("model.prior_dim", "prior vector length", [](RunConfig& c) -> auto& { return c.model.prior_dim; }));
    k.push_back(config_key("model.kernel_size", "per-location kernel size k (odd)",
                           [](RunConfig& c) -> auto& { return c.model.kernel_size; }));
    k.push_back(config_key("model.downsample_levels", "stride-2 encoder levels",
                           [](RunConfig& c) -> auto& { return c.model.downsample_levels; }));
    k.push_back(config_key("model.attn_downsample", "extra downsampling before long-range attention",
                           [](RunConfig& c) -> auto& { return c.model.attn_downsample; }));
    k.push_back(config_key("model.mask_bias_init", "initial mask-head bias",
                           [](RunConfig& c) -> auto& { return c.model.mask_bias_init; }));
    k.push_back(config_key("train.lambda1", "weight of the refined-image loss", [](RunConfig& c) -> auto& { return c.train.lambda1; }));
    k.push_back(config_key("train.learning_rate", "Adam step size", [](RunConfig& c) -> auto& { return c.train.learning_rate; }));
    k.push_back(config_key("train.epochs", "passes over the training set", [](RunConfig& c) -> auto& { return c.train.epochs; }));
    k.push_back(config_key("train.batch_size", "images per optimiser step", [](RunConfig& c) -> auto& { return c.train.batch_size; }));
    k.push_back(config_key("train.seed", "initialisation and shuffling seed", [](RunConfig& c) -> auto& { return c.train.seed; }));
    k.push_back(config_key("train.freeze_baseline", "train only the refinement module",
                           [](RunConfig& c) -> auto& { return c.train.freeze_baseline; }));
    k.push_back({"train.ablation", "list of toggles: no_sve no_ca no_sa no_pos_embed snr_mask concat_prior",
                 [](const RunConfig& c) { return json(c.train.ablation.active()); },
                 [](RunConfig& c, const json& v) {
                   c.train.ablation = Ablation::from_names(v.get<std::vector<std::string>>());
                 }});
    k.push_back(config_key("data.crop_size", "square crop taken from each clean image",
                           [](RunConfig& c) -> auto& { return c.data.crop_size; }));
    k.push_back(config_key("data.data_seed", "crop and degradation seed", [](RunConfig& c) -> auto& { return c.data.data_seed; }));
    k.push_back(config_key("data.prior_seed", "stub prior seed", [](RunConfig& c) -> auto& { return c.data.prior_seed; }));
    k.push_back(config_key("data.max_noise_sigma", "upper bound of the sampled low-light noise",
                           [](RunConfig& c) -> auto& { return c.data.max_noise_sigma; }));
    k.push_back(config_key("paths.manifest", "stub-priors: manifest to process", [](RunConfig& c) -> auto& { return c.paths.manifest; }));
    k.push_back(config_key("paths.train_manifest", "training manifest", [](RunConfig& c) -> auto& { return c.paths.train_manifest; }));
    k.push_back(config_key("paths.test_manifest", "held-out manifest", [](RunConfig& c) -> auto& { return c.paths.test_manifest; }));
    k.push_back(config_key("paths.checkpoint", "checkpoint to load (eval, refine)",
                           [](RunConfig& c) -> auto& { return c.paths.checkpoint; }));
    k.push_back(config_key("paths.input", "refine: degraded PPM image", [](RunConfig& c) -> auto& { return c.paths.input; }));
    k.push_back(config_key("paths.prior", "refine: OSF1 prior file (empty: stub)", [](RunConfig& c) -> auto& { return c.paths.prior; }));
    k.push_back(config_key("paths.prior_dir", "stub-priors: output directory (empty: <output_dir>/priors)",
                           [](RunConfig& c) -> auto& { return c.paths.prior_dir; }));
    k.push_back(config_key("paths.output_dir", "where artifacts and resolved_config.json go",
                           [](RunConfig& c) -> auto& { return c.paths.output_dir; }));
    k.push_back(config_key("refine.force_identity", "force mask 1 and residual 0",
                           [](RunConfig& c) -> auto& { return c.refine.force_identity; }));
    k.push_back(config_key("ablate.seeds", "seeds to run each variant with", [](RunConfig& c) -> auto& { return c.ablate.seeds; }));
    k.push_back(config_key("ablate.variants", "variant labels (\"full\", \"no_ca\", \"no_ca+no_sa\", ...); empty: standard set",
                           [](RunConfig& c) -> auto& { return c.ablate.variants; }));
    k.push_back(config_key("gradcheck.trials", "probes per parameter tensor", [](RunConfig& c) -> auto& { return c.gradcheck.trials; }));
    k.push_back(config_key("gradcheck.tolerance", "maximum relative error", [](RunConfig& c) -> auto& { return c.gradcheck.tolerance; }));
    k.push_back(config_key("stub.write_degraded", "stub-priors: also write the degraded crops",
                           [](RunConfig& c) -> auto& { return c.stub.write_degraded; }));
    k.push_back(config_key("synth.count", "synthetic scenes to write", [](RunConfig& c) -> auto& { return c.synth.count; }));
    k.push_back(config_key("synth.size", "synthetic scene side length", [](RunConfig& c) -> auto& { return c.synth.size; }));
    k.push_back(config_key("synth.seed", "synthetic scene seed", [](RunConfig& c) -> auto& { return c.synth.seed; }));
    k.push_back(config_key("synth.first", "index of the first scene", [](RunConfig& c) -> auto& { return c.synth.first; }));
    return k;
  }();
  return keys;
}

/// Sets one dotted key; the value must already have the right JSON type.
inline void set_config_value(RunConfig& config, const std::string& key, const nlohmann::json& value) {
  for (const auto& k : config_keys())
    if (k.name == key) {
      try {
        k.set(config, value);
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config key " + key + ": " + e.what());
      }
      return;
    }
  throw ConfigError("unknown config key: " + key);
}

/// "key=value"; the value is read as JSON when it parses, otherwise as a
/// plain string.
inline void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  auto value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  set_config_value(config, key, value);
}

inline void apply_json(RunConfig& config, const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [section, body] : doc.items()) {
    if (!body.is_object()) throw ConfigError("config section " + section + " must be an object");
    for (const auto& [key, value] : body.items()) set_config_value(config, section + "." + key, value);
  }
}

inline nlohmann::json to_json(const RunConfig& config) {
  nlohmann::json doc = nlohmann::json::object();
  for (const auto& k : config_keys()) {
    const auto dot = k.name.find('.');
    doc[k.name.substr(0, dot)][k.name.substr(dot + 1)] = k.get(config);
  }
  return doc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  auto doc = nlohmann::json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw ConfigError(path.string() + ": not valid JSON");
  RunConfig config;
  apply_json(config, doc);
  return config;
}

/// Writes `<output_dir>/resolved_config.json` and returns its path.
inline std::filesystem::path write_resolved_config(const RunConfig& config) {
  const std::filesystem::path dir(config.paths.output_dir);
  std::filesystem::create_directories(dir);
  const auto path = dir / "resolved_config.json";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_json(config).dump(2) << '\n';
  return path;
}

}  // namespace ptg
