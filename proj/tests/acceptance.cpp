// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails.
//
//   ptg_acceptance fast   property checks (a few minutes)
//   ptg_acceptance desk   synthetic-task training and ablation (hours on one core)
//   ptg_acceptance all    both
//
// The desk mode writes per-run results to ./acceptance_desk.csv.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "ptg/ablation.hpp"
#include "ptg/degrade.hpp"
#include "ptg/gradsuite.hpp"
#include "ptg/metrics.hpp"
#include "ptg/train.hpp"

using namespace ptg;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void verdict(const char* name, bool ok, const std::string& detail) {
  std::printf("%s  %-28s %s\n", ok ? "PASS" : "FAIL", name, detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

template <class T>
Tensor<T> uniform_tensor(Rng& rng, Shape shape, double lo, double hi) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// ---------------------------------------------------------------- fast ----

void gradient_suite_criterion() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_subject;
  const bool ok = run_gradient_suite([&](const GradCheckReport& r) {
    if (r.worst() >= worst) {
      worst = r.worst();
      worst_subject = r.subject;
    }
  });
  const double elapsed = seconds_since(t0);
  verdict("gradient-suite", ok && worst < 1e-4 && elapsed < 120.0,
          fmt("max rel error %.3e (%s), limit 1e-4; %.1f s, limit 120 s", worst, worst_subject.c_str(), elapsed));
}

void oracle_criterion() {
  Rng rng(2024);
  double worst = 0.0;
  for (int instance = 0; instance < 50; ++instance) {
    const std::size_t h = 1 + rng.index(8), w = 1 + rng.index(8), c = 1 + rng.index(4), k = 3;
    auto x = uniform_tensor<double>(rng, {h, w, c}, -1, 1);
    auto kernels = uniform_tensor<double>(rng, {h, w, k * k * c}, -1, 1);
    Tape<double> tape(Tape<double>::Mode::inference);
    const auto got = per_location_conv(tape, x, kernels);
    const auto want = oracle::per_location_conv({x.data().begin(), x.data().end()}, h, w, c,
                                                {kernels.data().begin(), kernels.data().end()}, k);
    worst = std::max(worst, oracle::max_abs_diff({got.data().begin(), got.data().end()}, want));
  }
  verdict("oracle-equivalence", worst <= 1e-6, fmt("50 instances, max |diff| %.3e, limit 1e-6", worst));
}

void parameter_budget_criterion() {
  const RefinementModule<float> m;
  const auto n = param_count(m.parameters());
  verdict("parameter-budget", n < 1000000, fmt("%zu parameters at the default config, limit 1000000", n));
}

void identity_criterion() {
  RefinementModule<float> m({}, {}, 7);
  Rng rng(77);
  bool exact = true;
  double worst_dev = 0.0;
  for (int draw = 0; draw < 5; ++draw) {
    const auto degraded = uniform_tensor<float>(rng, {64, 64, 3}, 0, 0.5);
    const auto restored = uniform_tensor<float>(rng, {64, 64, 3}, 0, 1);
    const auto prior = stub_prior(degraded, 512, static_cast<std::uint64_t>(draw));
    Tape<float> tape(Tape<float>::Mode::inference);
    const Tensor<float> zeros(Shape{64, 64, 3});
    const auto keep =
        RefinementModule<float>::compose(tape, degraded, restored, Tensor<float>::filled({64, 64, 1}, 1.0f), zeros);
    const auto pass = RefinementModule<float>::compose(tape, degraded, restored, Tensor<float>(Shape{64, 64, 1}), zeros);
    for (std::size_t i = 0; i < keep.numel(); ++i) exact = exact && keep[i] == restored[i] && pass[i] == degraded[i];

    const auto out = m.refine(tape, degraded, restored, prior.tensor<float>());
    for (std::size_t i = 0; i < out.composed.numel(); ++i)
      worst_dev = std::max(worst_dev, std::abs(static_cast<double>(out.composed[i]) - restored[i]));
  }
  verdict("identity-suite", exact && worst_dev <= 0.02,
          fmt("mask 1 / mask 0 endpoints %s; fresh-init max deviation %.5f, limit 0.02", exact ? "exact" : "NOT exact",
              worst_dev));
}

void convexity_criterion() {
  Rng rng(99);
  std::size_t violations = 0, checked = 0;
  for (int draw = 0; draw < 100; ++draw) {
    RefinementConfig cfg;
    cfg.channels = 8;
    cfg.prior_dim = 32;
    RefinementModule<double> m(cfg, {}, static_cast<std::uint64_t>(draw));
    const auto degraded = uniform_tensor<double>(rng, {16, 16, 3}, 0, 0.5);
    const auto restored = uniform_tensor<double>(rng, {16, 16, 3}, 0, 1);
    const auto prior = uniform_tensor<double>(rng, {32}, -1, 1);
    Tape<double> tape(Tape<double>::Mode::inference);
    const auto d = m.refine(tape, degraded, restored, prior).diagnostics;
    for (std::size_t i = 0; i < d.enhanced.numel(); ++i) {
      const double s = d.short_range[i], l = d.long_range[i], f = d.enhanced[i];
      // One rounding of each product and of the sum.
      const double slack = 4 * std::numeric_limits<double>::epsilon() * std::max(std::abs(s), std::abs(l));
      ++checked;
      if (f < std::min(s, l) - slack || f > std::max(s, l) + slack) ++violations;
    }
  }
  verdict("fusion-convexity", violations == 0,
          fmt("100 draws, %zu elements, %zu outside [min(f_s,f_l), max(f_s,f_l)]", checked, violations));
}

void metric_criterion() {
  const auto zero = Image::filled({8, 8, 3}, 0.0f), half = Image::filled({8, 8, 3}, 0.5f);
  const double p = psnr(zero, half);
  Rng rng(5);
  const auto x = uniform_tensor<float>(rng, {32, 32, 3}, 0.2, 0.8);
  const double s = ssim(x, x);
  std::vector<double> curve;
  for (double sigma : {0.01, 0.05, 0.1}) {
    DegradationSpec spec;
    spec.kind = DegradationKind::gaussian_noise;
    spec.sigma = sigma;
    spec.seed = 3;
    curve.push_back(psnr(x, degrade(x, spec)));
  }
  const bool decreasing = curve[0] > curve[1] && curve[1] > curve[2];
  verdict("metric-fixtures", std::abs(p - 6.0206) <= 0.001 && s == 1.0 && decreasing,
          fmt("PSNR(0, 0.5) %.4f dB; SSIM(x,x) %.12f; PSNR at sigma .01/.05/.1: %.2f %.2f %.2f", p, s, curve[0],
              curve[1], curve[2]));
}

void determinism_criterion() {
  DataOptions opts;
  const auto train_set = synthetic_samples(8, 41, opts);
  const auto test_set = synthetic_samples(4, 41, opts, 8);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 3;
  auto run = [&] {
    std::string log;
    auto result = train({}, cfg, train_set, test_set, [&](const EpochLog& e) { log += e.line() + "\n"; });
    return std::make_pair(encode_checkpoint(result.checkpoint), log);
  };
  const auto a = run(), b = run();
  verdict("determinism", a.first == b.first && a.second == b.second,
          fmt("checkpoints %s (%zu bytes), logs %s", a.first == b.first ? "identical" : "DIFFER", a.first.size(),
              a.second == b.second ? "identical" : "DIFFER"));
}

// ---------------------------------------------------------------- desk ----

struct DeskRun {
  std::string variant;
  std::uint64_t seed;
  EpochLog final;
  double seconds;
};

void desk_criteria() {
  constexpr double kRunBudget = 30 * 60.0;
  DataOptions opts;  // 64x64 crops, 512-d stub priors
  const auto train_set = synthetic_samples(200, 0, opts);
  const auto test_set = synthetic_samples(50, 0, opts, 200);
  const std::vector<std::uint64_t> seeds{0, 1, 2};

  std::ofstream csv("acceptance_desk.csv", std::ios::trunc);
  csv << "variant,seed,psnr_base,psnr_refined,ssim_base,ssim_refined,seconds\n";
  std::vector<DeskRun> runs;
  auto train_one = [&](const Ablation& ablation, std::uint64_t seed) {
    TrainConfig cfg;
    cfg.epochs = 30;
    cfg.seed = seed;
    cfg.ablation = ablation;
    const auto t0 = Clock::now();
    const auto result = train({}, cfg, train_set, test_set);
    DeskRun r{ablation.label(), seed, result.log.back(), seconds_since(t0)};
    csv << fmt("%s,%llu,%.4f,%.4f,%.5f,%.5f,%.1f", r.variant.c_str(), static_cast<unsigned long long>(seed),
               r.final.psnr_base, r.final.psnr_refined, r.final.ssim_base, r.final.ssim_refined, r.seconds)
        << '\n'
        << std::flush;
    std::printf("  run %-14s seed %llu: base %.4f dB, refined %.4f dB (%.0f s)\n", r.variant.c_str(),
                static_cast<unsigned long long>(seed), r.final.psnr_base, r.final.psnr_refined, r.seconds);
    std::fflush(stdout);
    runs.push_back(r);
  };

  double gain = 0.0, slowest = 0.0;
  for (auto seed : seeds) {
    train_one(Ablation{}, seed);
    gain += runs.back().final.psnr_refined - runs.back().final.psnr_base;
    slowest = std::max(slowest, runs.back().seconds);
  }
  gain /= static_cast<double>(seeds.size());
  verdict("desk-improvement", gain >= 0.2 && slowest <= kRunBudget,
          fmt("mean refined - baseline %.4f dB over 3 seeds, need >= 0.2; slowest run %.0f s, limit %.0f s", gain,
              slowest, kRunBudget));

  for (const auto& name : Ablation::names())
    for (auto seed : seeds) train_one(Ablation::from_names({name}), seed);

  std::vector<AblationRow> rows;
  for (const auto& r : runs) rows.push_back({r.variant, r.seed, r.final});
  bool all = true;
  std::string detail;
  for (const auto& v : compare_to_full(rows)) {
    all = all && v.paired == seeds.size() && v.wins >= 2;
    detail += fmt("%s %zu/%zu; ", v.variant.c_str(), v.wins, v.paired);
  }
  verdict("ablation-ordering", all, "full wins per variant: " + detail + "need >= 2 of 3 each");
}

}  // namespace

int main(int argc, char** argv) {
  const std::string mode = argc > 1 ? argv[1] : "fast";
  if (mode != "fast" && mode != "desk" && mode != "all") {
    std::fprintf(stderr, "usage: %s [fast|desk|all]\n", argv[0]);
    return 2;
  }
  try {
    if (mode == "fast" || mode == "all") {
      gradient_suite_criterion();
      oracle_criterion();
      parameter_budget_criterion();
      identity_criterion();
      convexity_criterion();
      metric_criterion();
      determinism_criterion();
    }
    if (mode == "desk" || mode == "all") desk_criteria();
  } catch (const std::exception& e) {
    std::printf("FAIL  %-28s %s\n", "uncaught-error", e.what());
    return 1;
  }
  return failures == 0 ? 0 : 1;
}
