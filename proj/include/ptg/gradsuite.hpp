#pragma once

// Finite-difference suite over every parameterised operation and the full
// refinement pipeline, all in double precision.

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ptg/baseline.hpp"
#include "ptg/gradcheck.hpp"
#include "ptg/layers.hpp"
#include "ptg/refinement.hpp"

namespace ptg {

namespace detail {

inline Tensor<double> random_tensor(Rng& rng, Shape shape, double lo, double hi, bool requires_grad = false) {
  Tensor<double> t(std::move(shape), requires_grad);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// sum(out * probe) for a fixed random probe, so every output element
/// contributes with a distinct weight.
inline Tensor<double> probe_loss(Tape<double>& tape, const Tensor<double>& out, const Tensor<double>& probe) {
  return sum(tape, mul(tape, out, probe));
}

/// Redraws every parameter with variance-preserving scale (weights) or
/// U(-0.5, 0.5) (biases). Fan-in initialisation shrinks activations layer by
/// layer, which leaves deep gradients near 1e-9 where central differences are
/// dominated by roundoff; this keeps them well conditioned.
inline void randomize(ParameterTree<double>& params, Rng& rng, double gain = 1.5) {
  for (auto& [name, t] : params) {
    const double bound = t.rank() >= 2
        ? gain * std::sqrt(3.0 / static_cast<double>(t.numel() / t.shape().back()))
        : 0.5;
    for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  }
}

}  // namespace detail

inline GradSubject conv2d_subject(std::size_t stride, std::uint64_t seed = 11) {
  Rng rng(seed);
  GradSubject s{"conv2d(stride " + std::to_string(stride) + ")", {}, {}};
  auto x = s.params.add("input", detail::random_tensor(rng, {7, 6, 3}, -1, 1));
  auto w = s.params.add("weight", detail::random_tensor(rng, {3, 3, 3, 4}, -0.5, 0.5));
  auto b = s.params.add("bias", detail::random_tensor(rng, {4}, -0.5, 0.5));
  const std::size_t oh = (7 + 2 - 3) / stride + 1, ow = (6 + 2 - 3) / stride + 1;
  auto probe = detail::random_tensor(rng, {oh, ow, 4}, -1, 1);
  s.forward = [=](Tape<double>& tape) { return detail::probe_loss(tape, conv2d(tape, x, w, b, stride, 1), probe); };
  return s;
}

inline GradSubject per_location_conv_subject(std::uint64_t seed = 12) {
  Rng rng(seed);
  GradSubject s{"per_location_conv", {}, {}};
  auto x = s.params.add("input", detail::random_tensor(rng, {5, 6, 3}, -1, 1));
  auto k = s.params.add("kernels", detail::random_tensor(rng, {5, 6, 27}, -0.5, 0.5));
  auto probe = detail::random_tensor(rng, {5, 6, 3}, -1, 1);
  s.forward = [=](Tape<double>& tape) { return detail::probe_loss(tape, per_location_conv(tape, x, k), probe); };
  return s;
}

inline GradSubject self_attention_subject(std::uint64_t seed = 13) {
  Rng rng(seed);
  GradSubject s{"self_attention", {}, {}};
  ParamFactory<double> f(s.params, seed);
  auto attention = SelfAttention<double>::make(f, "attention", 4);
  auto x = s.params.add("tokens", detail::random_tensor(rng, {6, 4}, -1, 1));
  auto probe = detail::random_tensor(rng, {6, 4}, -1, 1);
  s.forward = [=](Tape<double>& tape) { return detail::probe_loss(tape, attention(tape, x), probe); };
  return s;
}

inline GradSubject linear_subject(std::uint64_t seed = 14) {
  Rng rng(seed);
  GradSubject s{"linear", {}, {}};
  ParamFactory<double> f(s.params, seed);
  auto layer = Linear<double>::make(f, "fc", 7, 5);
  auto x = s.params.add("input", detail::random_tensor(rng, {3, 7}, -1, 1));
  auto probe = detail::random_tensor(rng, {3, 5}, -1, 1);
  s.forward = [=](Tape<double>& tape) { return detail::probe_loss(tape, layer(tape, x), probe); };
  return s;
}

inline GradSubject baseline_subject(std::uint64_t seed = 15) {
  Rng rng(seed);
  GradSubject s{"baseline restorer", {}, {}};
  auto net = std::make_shared<BaselineRestorer<double>>(seed, 4, 2);
  detail::randomize(net->parameters(), rng);
  s.params = net->parameters();
  auto degraded = detail::random_tensor(rng, {8, 8, 3}, 0.05, 0.95);
  auto probe = detail::random_tensor(rng, {8, 8, 3}, -1, 1);
  s.forward = [=](Tape<double>& tape) { return detail::probe_loss(tape, (*net)(tape, degraded), probe); };
  return s;
}

/// Full refinement pass followed by the L1 loss on an 8x8 instance. The
/// target sits at least 0.1 away from the refined output everywhere so the
/// absolute value is differentiable at every probe.
inline GradSubject refinement_subject(const std::string& name, RefinementConfig config, Ablation ablation,
                                      std::uint64_t seed = 16) {
  Rng rng(seed);
  GradSubject s{name, {}, {}};
  auto module = std::make_shared<RefinementModule<double>>(config, ablation, seed);
  detail::randomize(module->parameters(), rng);
  s.params = module->parameters();
  auto degraded = detail::random_tensor(rng, {8, 8, 3}, 0.05, 0.6);
  auto restored = detail::random_tensor(rng, {8, 8, 3}, 0.3, 0.95);
  auto prior = detail::random_tensor(rng, {config.prior_dim}, -1, 1);
  Tape<double> probe_tape(Tape<double>::Mode::inference);
  auto target = module->refine(probe_tape, degraded, restored, prior).composed.clone();
  for (auto& v : target.data()) v += (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 0.3);
  s.forward = [=](Tape<double>& tape) {
    return mean_abs_error(tape, module->refine(tape, degraded, restored, prior).composed, target);
  };
  return s;
}

/// Small-width configuration used for the ablation variants.
inline RefinementConfig gradcheck_config() {
  RefinementConfig c;
  c.channels = 4;
  c.prior_dim = 6;
  c.attn_downsample = 1;
  return c;
}

inline std::vector<GradSubject> gradient_suite() {
  std::vector<GradSubject> subjects;
  subjects.push_back(conv2d_subject(1));
  subjects.push_back(conv2d_subject(2));
  subjects.push_back(per_location_conv_subject());
  subjects.push_back(self_attention_subject());
  subjects.push_back(linear_subject());
  subjects.push_back(baseline_subject());
  subjects.push_back(refinement_subject("refinement + L1 (default config)", RefinementConfig{}, Ablation{}));
  auto small = gradcheck_config();
  subjects.push_back(refinement_subject("refinement + L1 (small, full attention)", small, Ablation{}));
  for (const auto& toggle : Ablation::names())
    subjects.push_back(refinement_subject("refinement + L1 (" + toggle + ")", small, Ablation::from_names({toggle})));
  return subjects;
}

inline constexpr double kGradTolerance = 1e-4;
inline constexpr std::size_t kGradTrials = 24;

/// Runs the whole suite; `on_report` sees each subject's report as it lands.
inline bool run_gradient_suite(const std::function<void(const GradCheckReport&)>& on_report = {},
                               std::size_t trials = kGradTrials, double tolerance = kGradTolerance) {
  bool ok = true;
  for (auto& subject : gradient_suite()) {
    auto report = grad_check(subject, trials, tolerance);
    ok = ok && report.passed();
    if (on_report) on_report(report);
  }
  return ok;
}

}  // namespace ptg
