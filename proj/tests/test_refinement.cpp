#include <gtest/gtest.h>

#include <cmath>

#include "ptg/refinement.hpp"

using namespace ptg;
using Module = RefinementModule<double>;
using TapeD = Tape<double>;

namespace {

Tensor<double> random_tensor(Rng& rng, Shape shape, double lo = -1, double hi = 1) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

struct Inputs {
  Tensor<double> degraded, restored, prior;
};

Inputs random_inputs(std::uint64_t seed, std::size_t h = 16, std::size_t w = 16, std::size_t dg = 512) {
  Rng rng(seed);
  return {random_tensor(rng, {h, w, 3}, 0, 0.5), random_tensor(rng, {h, w, 3}, 0, 1), random_tensor(rng, {dg})};
}

void fill(Tensor<double>& t, double v) {
  for (auto& x : t.data()) x = v;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void expect_open_unit(const Tensor<double>& t, const char* what) {
  for (double v : t.data()) {
    EXPECT_GT(v, 0.0) << what;
    EXPECT_LT(v, 1.0) << what;
  }
}

}  // namespace

TEST(Refinement, OutputShapes) {
  Module m;
  auto in = random_inputs(1, 16, 24);
  TapeD tape(TapeD::Mode::inference);
  auto out = m.refine(tape, in.degraded, in.restored, in.prior);
  EXPECT_EQ(out.mask.shape(), (Shape{16, 24, 1}));
  EXPECT_EQ(out.residual.shape(), (Shape{16, 24, 3}));
  EXPECT_EQ(out.composed.shape(), (Shape{16, 24, 3}));
  const auto& d = out.diagnostics;
  EXPECT_EQ(d.feature.shape(), (Shape{4, 6, 16}));
  EXPECT_EQ(d.range_score.shape(), (Shape{4, 6, 1}));
  EXPECT_EQ(d.channel_weights.shape(), (Shape{16}));
  EXPECT_EQ(d.kernels.shape(), (Shape{4, 6, 9 * 16}));
  EXPECT_EQ(d.spatial_weights.shape(), (Shape{4, 6, 1}));
  EXPECT_EQ(d.fused.shape(), (Shape{4, 6, 16}));
}

TEST(Refinement, AttentionMapsLieStrictlyInsideUnitInterval) {
  Module m({}, {}, 5);
  auto in = random_inputs(2);
  TapeD tape(TapeD::Mode::inference);
  auto out = m.refine(tape, in.degraded, in.restored, in.prior);
  expect_open_unit(out.diagnostics.range_score, "M");
  expect_open_unit(out.diagnostics.channel_weights, "M_c");
  expect_open_unit(out.diagnostics.spatial_weights, "M_s");
  expect_open_unit(out.mask, "I_m");
}

TEST(Refinement, FreshHeadsStartNearIdentity) {
  Module m({}, {}, 3);
  auto in = random_inputs(3);
  TapeD tape(TapeD::Mode::inference);
  auto out = m.refine(tape, in.degraded, in.restored, in.prior);
  const double expected_mask = 1.0 / (1.0 + std::exp(-4.0));
  for (double v : out.residual.data()) EXPECT_EQ(v, 0.0);
  for (double v : out.mask.data()) EXPECT_NEAR(v, expected_mask, 1e-15);
  EXPECT_NEAR(expected_mask, 0.9820, 1e-4);
  EXPECT_LE(max_abs_diff(out.composed, in.restored), 0.02);
}

TEST(Refinement, CompositionScalarExample) {
  TapeD tape;
  auto one = [](double v) { return Tensor<double>::filled({1, 1, 3}, v); };
  auto r = Module::compose(tape, one(0.2), one(0.6), Tensor<double>::filled({1, 1, 1}, 0.5), one(0.1));
  for (double v : r.data()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Refinement, CompositionEndpoints) {
  auto in = random_inputs(4);
  TapeD tape;
  Tensor<double> zeros(Shape{16, 16, 3});
  auto keep = Module::compose(tape, in.degraded, in.restored, Tensor<double>::filled({16, 16, 1}, 1.0), zeros);
  auto pass = Module::compose(tape, in.degraded, in.restored, Tensor<double>(Shape{16, 16, 1}), zeros);
  EXPECT_EQ(max_abs_diff(keep, in.restored), 0.0);
  EXPECT_EQ(max_abs_diff(pass, in.degraded), 0.0);
}

TEST(Refinement, BlendEndpointsAndDegenerateCase) {
  Rng rng(5);
  auto fs = random_tensor(rng, {4, 4, 3}), fl = random_tensor(rng, {4, 4, 3});
  TapeD tape;
  EXPECT_EQ(max_abs_diff(Module::blend_ranges(tape, Tensor<double>::filled({4, 4, 1}, 1.0), fs, fl), fs), 0.0);
  EXPECT_EQ(max_abs_diff(Module::blend_ranges(tape, Tensor<double>(Shape{4, 4, 1}), fs, fl), fl), 0.0);
  EXPECT_LT(max_abs_diff(Module::blend_ranges(tape, random_tensor(rng, {4, 4, 1}, 0, 1), fs, fs), fs), 1e-15);
}

TEST(Refinement, BlendIsConvex) {
  Rng rng(6);
  for (int draw = 0; draw < 100; ++draw) {
    auto fs = random_tensor(rng, {3, 5, 4}, -5, 5), fl = random_tensor(rng, {3, 5, 4}, -5, 5);
    auto score = random_tensor(rng, {3, 5, 1}, 0, 1);
    TapeD tape;
    auto f = Module::blend_ranges(tape, score, fs, fl);
    for (std::size_t i = 0; i < f.numel(); ++i) {
      EXPECT_GE(f[i], std::min(fs[i], fl[i]) - 1e-12);
      EXPECT_LE(f[i], std::max(fs[i], fl[i]) + 1e-12);
    }
  }
}

TEST(Refinement, ZeroedPerceptronGivesHalfChannelWeights) {
  Module m;
  fill(m.parameters().get("refine.channel.fc1.weight"), 0.0);
  fill(m.parameters().get("refine.channel.fc1.bias"), 0.0);
  Rng rng(7);
  auto f = random_tensor(rng, {4, 4, 16});
  TapeD tape;
  auto ca = m.channel_attention(tape, f, random_tensor(rng, {512}));
  for (double v : ca.weights.data()) EXPECT_DOUBLE_EQ(v, 0.5);
  for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_DOUBLE_EQ(ca.features[i], 0.5 * f[i]);
}

TEST(Refinement, ZeroKernelsGiveHalfSpatialWeights) {
  Module m;
  fill(m.parameters().get("refine.kernel.conv1.weight"), 0.0);
  fill(m.parameters().get("refine.kernel.conv1.bias"), 0.0);
  fill(m.parameters().get("refine.spatial.project.bias"), 0.0);
  Rng rng(8);
  auto f = random_tensor(rng, {4, 4, 16});
  TapeD tape;
  auto kernels = m.predict_kernels(tape, f, random_tensor(rng, {512}));
  for (double v : kernels.data()) EXPECT_EQ(v, 0.0);
  auto sa = m.spatial_attention(tape, f, kernels);
  for (double v : sa.weights.data()) EXPECT_DOUBLE_EQ(v, 0.5);
  for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_DOUBLE_EQ(sa.features[i], 0.5 * f[i]);
}

TEST(Refinement, KernelsDifferBetweenPositions) {
  Module m({}, {}, 9);
  Rng rng(9);
  auto f = random_tensor(rng, {4, 4, 16});
  TapeD tape;
  auto k = m.predict_kernels(tape, f, random_tensor(rng, {512}));
  ASSERT_EQ(k.dim(2), 9u * 16u);
  double diff = 0;
  for (std::size_t j = 0; j < k.dim(2); ++j) diff = std::max(diff, std::abs(k.at(0, 0, j) - k.at(3, 2, j)));
  EXPECT_GT(diff, 1e-6);
  for (double v : k.data()) EXPECT_LE(std::abs(v), 1.0 / 9.0);
}

TEST(Refinement, FusionSelectsEitherOperand) {
  Module m;
  Rng rng(10);
  auto fc = random_tensor(rng, {4, 4, 16}), fsa = random_tensor(rng, {4, 4, 16});
  auto& w = m.parameters().get("refine.fuse.weight");  // (1, 1, 32, 16)
  fill(m.parameters().get("refine.fuse.bias"), 0.0);
  for (int pick = 0; pick < 2; ++pick) {
    fill(w, 0.0);
    for (std::size_t i = 0; i < 16; ++i) w[(pick * 16 + i) * 16 + i] = 1.0;
    TapeD tape;
    EXPECT_EQ(max_abs_diff(m.fuse(tape, fc, fsa), pick == 0 ? fc : fsa), 0.0);
  }
}

TEST(Refinement, DecoderRestoresFullResolution) {
  Module m;
  Rng rng(11);
  TapeD tape;
  auto dec = m.decode(tape, random_tensor(rng, {5, 3, 16}));
  EXPECT_EQ(dec.mask.shape(), (Shape{20, 12, 1}));
  EXPECT_EQ(dec.residual.shape(), (Shape{20, 12, 3}));
}

TEST(Refinement, PriorChangesRangeAndChannelWeights) {
  Module m({}, {}, 12);
  auto in = random_inputs(12);
  Rng rng(13);
  auto other = random_tensor(rng, {512});
  TapeD tape(TapeD::Mode::inference);
  auto a = m.refine(tape, in.degraded, in.restored, in.prior).diagnostics;
  auto b = m.refine(tape, in.degraded, in.restored, other).diagnostics;
  EXPECT_GT(max_abs_diff(a.range_score, b.range_score), 1e-8);
  EXPECT_GT(max_abs_diff(a.channel_weights, b.channel_weights), 1e-8);
}

TEST(Refinement, LongRangeReachesBeyondShortRangeField) {
  Module m({}, {}, 14);
  Rng rng(14);
  auto f = random_tensor(rng, {16, 16, 16});
  auto g = f.clone();
  for (std::size_t ch = 0; ch < 16; ++ch) g.at(1, 1, ch) += 1.0;
  TapeD tape(TapeD::Mode::inference);
  double short_change = 0, long_change = 0;
  auto sf = m.short_range(tape, f), sg = m.short_range(tape, g);
  auto lf = m.long_range(tape, f), lg = m.long_range(tape, g);
  for (std::size_t ch = 0; ch < 16; ++ch) {
    short_change = std::max(short_change, std::abs(sf.at(15, 15, ch) - sg.at(15, 15, ch)));
    long_change = std::max(long_change, std::abs(lf.at(15, 15, ch) - lg.at(15, 15, ch)));
  }
  EXPECT_EQ(short_change, 0.0);
  EXPECT_GT(long_change, 1e-8);
}

TEST(Refinement, ParameterCounts) {
  Module m;
  const auto& p = m.parameters();
  EXPECT_EQ(p.get("refine.range.prior_map.weight").numel() + p.get("refine.range.prior_map.bias").numel(), 8208u);
  const std::size_t total = param_count(p);
  EXPECT_LT(total, 1000000u);

  // Recount from the layer inventory at c = 16, d_g = 512, k = 3.
  const std::size_t c = 16, dg = 512, k = 3;
  auto conv = [](std::size_t kk, std::size_t in, std::size_t out) { return kk * kk * in * out + out; };
  auto lin = [](std::size_t in, std::size_t out) { return in * out + out; };
  const std::size_t expected = conv(3, 6, c) + conv(3, c, c)                        // encoder
                               + lin(dg, c) + lin(2, c) + lin(c, c)                 // T_m, S_m
                               + conv(3, 3 * c, c) + conv(3, c, 1)                  // R_m
                               + 4 * conv(3, c, c)                                  // R_s
                               + 4 * lin(c, c)                                      // R_l
                               + lin(dg, c)                                         // T_c
                               + lin(2 * c, c) + lin(c, c)                          // R_c
                               + lin(2, c) + lin(c, c)                              // S_c
                               + conv(3, 3 * c, c) + conv(3, c, k * k * c)          // R_p
                               + conv(1, c, 1)                                      // R_o
                               + conv(1, 2 * c, c)                                  // R_f
                               + 2 * conv(3, c, c) + conv(3, c, 1) + conv(3, c, 3);  // decoder and heads
  EXPECT_EQ(total, expected);

  RefinementConfig wide;
  wide.channels = 32;
  EXPECT_GT(param_count(Module(wide).parameters()), total);
}

TEST(Refinement, InitialisationIsSeededPerParameter) {
  Module a({}, {}, 7), b({}, {}, 7), c({}, {}, 8);
  Module no_ca({}, Ablation::from_names({"no_ca"}), 7);
  const auto& name = "refine.short_range.conv0.weight";
  EXPECT_EQ(max_abs_diff(a.parameters().get(name), b.parameters().get(name)), 0.0);
  EXPECT_GT(max_abs_diff(a.parameters().get(name), c.parameters().get(name)), 0.0);
  EXPECT_EQ(max_abs_diff(a.parameters().get(name), no_ca.parameters().get(name)), 0.0);
}

TEST(Refinement, ErrorsCarryTheirStage) {
  Module m;
  auto in = random_inputs(15);
  TapeD tape(TapeD::Mode::inference);
  try {
    m.refine(tape, in.degraded, in.restored, Tensor<double>(Shape{511}));
    FAIL() << "expected InputError";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("refine/prior"), std::string::npos) << e.what();
  }
  auto odd = random_inputs(15, 18, 16);
  EXPECT_THROW(m.refine(tape, odd.degraded, odd.restored, odd.prior), ConfigError);
  auto bad = in.degraded.clone();
  bad[7] = 1.5;
  EXPECT_THROW(m.refine(tape, bad, in.restored, in.prior), InputError);
  EXPECT_THROW(m.refine(tape, in.degraded, Tensor<double>(Shape{16, 16, 4}), in.prior), DimensionError);
}

TEST(Ablation, ConflictsAndUnknownTogglesAreRejected) {
  EXPECT_THROW(Ablation::from_names({"snr_mask", "no_sve"}), ConfigError);
  EXPECT_THROW(Ablation::from_names({"no_everything"}), ConfigError);
  EXPECT_EQ(Ablation{}.label(), "full");
  EXPECT_EQ(Ablation::from_names({"no_sa", "no_ca"}).label(), "no_ca+no_sa");
}

class AblationContract : public ::testing::Test {
 protected:
  RefinementDiagnostics<double> run(const Ablation& a) {
    Module m({}, a, 21);
    auto in = random_inputs(21);
    TapeD tape(TapeD::Mode::inference);
    return m.refine(tape, in.degraded, in.restored, in.prior).diagnostics;
  }
};

TEST_F(AblationContract, NoSveUsesAnEvenBlend) {
  const auto d = run(Ablation::from_names({"no_sve"}));
  for (double v : d.range_score.data()) EXPECT_EQ(v, 0.5);
}

TEST_F(AblationContract, NoCaRecordsUnitChannelWeights) {
  const auto d = run(Ablation::from_names({"no_ca"}));
  for (double v : d.channel_weights.data()) EXPECT_EQ(v, 1.0);
}

TEST_F(AblationContract, NoSaRecordsUnitSpatialWeights) {
  const auto d = run(Ablation::from_names({"no_sa"}));
  for (double v : d.spatial_weights.data()) EXPECT_EQ(v, 1.0);
}

TEST_F(AblationContract, SnrMaskIsFixedAndBounded) {
  auto d = run(Ablation::from_names({"snr_mask"}));
  for (double v : d.range_score.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  Module m({}, Ablation::from_names({"snr_mask"}));
  for (const auto& [name, t] : m.parameters()) EXPECT_EQ(name.find("refine.range."), std::string::npos) << name;
}

TEST(AblationParameters, UnusedComponentsAreNotCreated) {
  Module no_pos({}, Ablation::from_names({"no_pos_embed"}));
  Module concat({}, Ablation::from_names({"concat_prior"}));
  for (const auto& [name, t] : no_pos.parameters()) EXPECT_EQ(name.find("position"), std::string::npos) << name;
  for (const auto& [name, t] : concat.parameters()) EXPECT_EQ(name.find("prior_map"), std::string::npos) << name;
  EXPECT_EQ(concat.parameters().get("refine.encoder.0.weight").dim(2), 6u + 512u);
}

TEST(AblationParameters, ConcatPriorStillDependsOnThePrior) {
  Module m({}, Ablation::from_names({"concat_prior"}), 4);
  auto in = random_inputs(22);
  Rng rng(22);
  TapeD tape(TapeD::Mode::inference);
  auto a = m.refine(tape, in.degraded, in.restored, in.prior).diagnostics.feature;
  auto b = m.refine(tape, in.degraded, in.restored, random_tensor(rng, {512})).diagnostics.feature;
  EXPECT_GT(max_abs_diff(a, b), 1e-8);
}
