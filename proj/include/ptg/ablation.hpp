#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ptg/train.hpp"

namespace ptg {

struct AblationRow {
  std::string variant;  // Ablation::label(), "full" for the empty toggle set
  std::uint64_t seed = 0;
  EpochLog final;       // last logged epoch
};

/// The full setting followed by each single-toggle variant.
inline std::vector<Ablation> standard_variants() {
  std::vector<Ablation> out{Ablation{}};
  for (const auto& name : Ablation::names()) out.push_back(Ablation::from_names({name}));
  return out;
}

/// Trains every (seed, variant) pair on the same data. `base.ablation` and
/// `base.seed` are overwritten per run.
inline std::vector<AblationRow> run_ablation(const RefinementConfig& model, TrainConfig base,
                                             const std::vector<Ablation>& variants,
                                             const std::vector<std::uint64_t>& seeds,
                                             const std::vector<Sample>& train_set,
                                             const std::vector<Sample>& test_set,
                                             const std::function<void(const AblationRow&)>& on_row = {}) {
  std::vector<AblationRow> rows;
  for (auto seed : seeds)
    for (const auto& variant : variants) {
      base.seed = seed;
      base.ablation = variant;
      auto result = train(model, base, train_set, test_set);
      rows.push_back({variant.label(), seed, result.log.back()});
      if (on_row) on_row(rows.back());
    }
  return rows;
}

struct AblationVerdict {
  std::string variant;
  std::size_t wins = 0;    // seeds where the full setting has higher refined PSNR
  std::size_t paired = 0;  // seeds where both runs exist
};

/// For each non-full variant, counts the seeds on which "full" wins.
inline std::vector<AblationVerdict> compare_to_full(const std::vector<AblationRow>& rows) {
  std::map<std::uint64_t, double> full;
  for (const auto& r : rows)
    if (r.variant == "full") full[r.seed] = r.final.psnr_refined;
  std::vector<AblationVerdict> verdicts;
  for (const auto& r : rows) {
    if (r.variant == "full") continue;
    auto it = std::find_if(verdicts.begin(), verdicts.end(), [&](const auto& v) { return v.variant == r.variant; });
    if (it == verdicts.end()) it = verdicts.insert(verdicts.end(), AblationVerdict{r.variant, 0, 0});
    if (auto f = full.find(r.seed); f != full.end()) {
      ++it->paired;
      if (f->second > r.final.psnr_refined) ++it->wins;
    }
  }
  return verdicts;
}

}  // namespace ptg
