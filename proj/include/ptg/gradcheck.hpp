#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "ptg/parameters.hpp"
#include "ptg/random.hpp"
#include "ptg/tape.hpp"

namespace ptg {

/// A differentiable scalar function of named tensors. Inputs whose gradient
/// should be checked are entries of `params` alongside the weights.
struct GradSubject {
  std::string name;
  ParameterTree<double> params;
  std::function<Tensor<double>(Tape<double>&)> forward;
};

struct GradCheckEntry {
  std::string parameter;
  std::size_t probes = 0;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::string subject;
  double tolerance = 0.0;
  std::vector<GradCheckEntry> entries;

  double worst() const {
    double w = 0.0;
    for (const auto& e : entries) w = std::max(w, e.max_rel_error);
    return w;
  }
  bool passed() const { return worst() < tolerance; }
};

/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
inline double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / scale;
}

/// Compares reverse-mode gradients with central differences. Tensors with at
/// most `trials` elements are probed exhaustively; larger ones at `trials`
/// seeded random coordinates. Mismatches are reported, never thrown.
inline GradCheckReport grad_check(GradSubject& subject, std::size_t trials, double tolerance,
                                  double eps = 1e-3, std::uint64_t seed = 7) {
  GradCheckReport report{subject.name, tolerance, {}};

  subject.params.set_requires_grad(true);
  for (auto& [name, t] : subject.params) t.drop_grad();
  {
    Tape<double> tape;
    tape.backward(subject.forward(tape));
  }

  auto evaluate = [&] {
    Tape<double> tape(Tape<double>::Mode::inference);
    return subject.forward(tape).item();
  };

  Rng rng(seed);
  for (auto& [name, t] : subject.params) {
    GradCheckEntry entry{name, 0, 0.0};
    std::vector<std::size_t> probes;
    if (t.numel() <= trials) {
      for (std::size_t i = 0; i < t.numel(); ++i) probes.push_back(i);
    } else {
      std::set<std::size_t> picked;
      while (picked.size() < trials) picked.insert(rng.index(t.numel()));
      probes.assign(picked.begin(), picked.end());
    }
    for (std::size_t i : probes) {
      const double analytic = t.has_grad() ? t.grad()[i] : 0.0;
      const double saved = t[i];
      auto at = [&](double offset) {
        t[i] = saved + offset;
        return evaluate();
      };
      // Fourth-order central stencil: truncation error O(eps^4), which lets
      // eps stay large enough that roundoff does not swamp tiny gradients.
      const double numeric = (at(-2 * eps) - 8 * at(-eps) + 8 * at(eps) - at(2 * eps)) / (12 * eps);
      t[i] = saved;
      entry.max_rel_error = std::max(entry.max_rel_error, relative_error(analytic, numeric));
      ++entry.probes;
    }
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace ptg
