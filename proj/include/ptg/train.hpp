#pragma once

// Joint training of the baseline restorer and the refinement module:
//   loss = L1(restored, clean) + lambda1 * L1(refined, clean)

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "ptg/baseline.hpp"
#include "ptg/checkpoint.hpp"
#include "ptg/dataset.hpp"
#include "ptg/metrics.hpp"
#include "ptg/optim.hpp"
#include "ptg/refinement.hpp"

namespace ptg {

struct TrainConfig {
  double lambda1 = 1.0;
  double learning_rate = 1e-3;
  std::size_t epochs = 30;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  Ablation ablation;
  bool freeze_baseline = false;

  void validate() const {
    if (!(lambda1 >= 0.0)) throw ConfigError("lambda1 must be non-negative");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    ablation.validate();
  }
};

/// Baseline restorer plus refinement module, sharing one seed.
template <class T>
struct JointModel {
  BaselineRestorer<T> baseline;
  RefinementModule<T> refiner;

  JointModel(const RefinementConfig& config, const Ablation& ablation, std::uint64_t seed)
      : baseline(derive_seed(seed, "baseline")), refiner(config, ablation, derive_seed(seed, "refine")) {}

  struct Pass {
    Tensor<T> restored;
    RefinementOutput<T> refined;
  };

  Pass forward(Tape<T>& tape, const Tensor<T>& degraded, const Tensor<T>& prior) const {
    Pass p;
    p.restored = baseline(tape, degraded);
    // The encoder sees the restored image clamped to [0, 1]; the composition
    // uses the raw output.
    p.refined = refiner.refine(tape, degraded, clamp_for_encoder(tape, p.restored), prior);
    p.refined.composed = RefinementModule<T>::compose(tape, degraded, p.restored, p.refined.mask,
                                                      p.refined.residual);
    return p;
  }

  Checkpoint checkpoint() const {
    Checkpoint ckpt;
    append_entries(ckpt, baseline.parameters());
    append_entries(ckpt, refiner.parameters());
    return ckpt;
  }

  void load(const Checkpoint& ckpt, bool partial = false) {
    load_into(baseline.parameters(), ckpt, partial);
    load_into(refiner.parameters(), ckpt, partial);
  }

 private:
  /// Differentiable clamp to [0, 1].
  static Tensor<T> clamp_for_encoder(Tape<T>& tape, const Tensor<T>& x) {
    const bool track = tape.tracks(x);
    std::vector<T> values(x.data().begin(), x.data().end());
    for (auto& v : values) v = std::clamp(v, T(0), T(1));
    Tensor<T> out(x.shape(), std::move(values), track);
    if (track) {
      tape.push([xn = x.node(), on = out.node()] {
        if (on->grad.empty()) return;
        auto& g = xn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
          if (xn->data[i] >= T(0) && xn->data[i] <= T(1)) g[i] += on->grad[i];
      });
    }
    return out;
  }
};

/// L1(restored, clean) + lambda1 * L1(refined, clean), as a scalar tensor.
template <class T>
Tensor<T> joint_loss(Tape<T>& tape, const Tensor<T>& restored, const Tensor<T>& refined,
                     const Tensor<T>& clean, T lambda1) {
  detail::expect_same(restored.shape(), clean.shape(), "joint_loss");
  detail::expect_same(refined.shape(), clean.shape(), "joint_loss");
  return add(tape, mean_abs_error(tape, restored, clean),
             scalar_mul(tape, mean_abs_error(tape, refined, clean), lambda1));
}

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double psnr_base = 0.0;
  double psnr_refined = 0.0;
  double ssim_base = 0.0;
  double ssim_refined = 0.0;

  /// "epoch, train_loss, psnr_base, psnr_refined, ssim_base, ssim_refined"
  std::string line() const {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%zu, %.6f, %.4f, %.4f, %.5f, %.5f", epoch, train_loss, psnr_base,
                  psnr_refined, ssim_base, ssim_refined);
    return buf;
  }
};

struct Evaluation {
  MetricReport baseline;
  MetricReport refined;
};

template <class T>
Evaluation evaluate(const JointModel<T>& model, const std::vector<Sample>& samples) {
  Evaluation ev;
  for (const auto& s : samples) {
    Tape<T> tape(Tape<T>::Mode::inference);
    auto pass = model.forward(tape, s.degraded.template cast<T>(), s.prior.template tensor<T>());
    ev.baseline.add(pass.restored.template cast<float>(), s.clean);
    ev.refined.add(pass.refined.composed.template cast<float>(), s.clean);
  }
  return ev;
}

struct TrainResult {
  std::vector<EpochLog> log;
  Checkpoint checkpoint;
  Evaluation final_eval;
};

/// Epoch 0 records the untrained model (mean training loss without updates);
/// epochs 1..N follow each pass over the shuffled training set.
inline TrainResult train(const RefinementConfig& model_config, const TrainConfig& config,
                         const std::vector<Sample>& train_set, const std::vector<Sample>& test_set,
                         const std::function<void(const EpochLog&)>& on_epoch = {},
                         const Checkpoint* init = nullptr) {
  using T = float;
  config.validate();
  if (train_set.empty()) throw InputError("training set is empty");
  JointModel<T> model(model_config, config.ablation, config.seed);
  if (init) model.load(*init, true);

  std::vector<Tensor<T>> trainable;
  if (config.freeze_baseline)
    model.baseline.parameters().set_requires_grad(false);
  else
    for (auto& [n, t] : model.baseline.parameters()) trainable.push_back(t);
  for (auto& [n, t] : model.refiner.parameters()) trainable.push_back(t);
  Adam<T> optim(trainable, {config.learning_rate, 0.9, 0.999, 1e-8});

  const T lambda1 = static_cast<T>(config.lambda1);
  std::vector<Tensor<T>> degraded, clean, priors;
  for (const auto& s : train_set) {
    degraded.push_back(s.degraded);
    clean.push_back(s.clean);
    priors.push_back(s.prior.tensor<T>());
  }

  TrainResult result;
  auto record = [&](std::size_t epoch, double loss) {
    auto ev = evaluate(model, test_set);
    EpochLog log{epoch, loss, ev.baseline.mean_psnr(), ev.refined.mean_psnr(), ev.baseline.mean_ssim(),
                 ev.refined.mean_ssim()};
    result.log.push_back(log);
    result.final_eval = std::move(ev);
    if (on_epoch) on_epoch(log);
  };

  {
    double total = 0.0;
    for (std::size_t i = 0; i < train_set.size(); ++i) {
      Tape<T> tape(Tape<T>::Mode::inference);
      auto pass = model.forward(tape, degraded[i], priors[i]);
      total += joint_loss(tape, pass.restored, pass.refined.composed, clean[i], lambda1).item();
    }
    record(0, total / static_cast<double>(train_set.size()));
  }

  std::vector<std::size_t> order(train_set.size());
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(config.seed, "shuffle:" + std::to_string(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);

    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const T inv_batch = T(1) / static_cast<T>(end - start);
      optim.zero_grad();
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t i = order[b];
        Tape<T> tape;
        auto pass = model.forward(tape, degraded[i], priors[i]);
        auto loss = joint_loss(tape, pass.restored, pass.refined.composed, clean[i], lambda1);
        const double value = loss.item();
        if (!std::isfinite(value))
          throw TrainingError("non-finite loss at step " + std::to_string(step) + " (" + train_set[i].key + ")",
                              step);
        total += value;
        tape.backward(scalar_mul(tape, loss, inv_batch));
      }
      optim.step();
      ++step;
    }
    record(epoch, total / static_cast<double>(order.size()));
  }
  result.checkpoint = model.checkpoint();
  return result;
}

}  // namespace ptg
