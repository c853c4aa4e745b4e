#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ptg/ablation.hpp"
#include "ptg/gradsuite.hpp"
#include "ptg/run_config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Invocation {
  std::string config_path;
  std::vector<std::string> overrides;
  std::vector<std::pair<std::string, json>> flags;  // applied last
};

ptg::RunConfig resolve(const Invocation& inv) {
  ptg::RunConfig config = inv.config_path.empty() ? ptg::RunConfig{} : ptg::load_run_config(inv.config_path);
  for (const auto& o : inv.overrides) ptg::apply_override(config, o);
  for (const auto& [key, value] : inv.flags) ptg::set_config_value(config, key, value);
  config.validate();
  return config;
}

void require(const std::string& value, const char* key) {
  if (value.empty()) throw ptg::ConfigError(std::string(key) + " is required");
}

fs::path out_path(const ptg::RunConfig& c, const std::string& name) { return fs::path(c.paths.output_dir) / name; }

int cmd_gradcheck(const ptg::RunConfig& c) {
  const bool ok = ptg::run_gradient_suite(
      [](const ptg::GradCheckReport& r) {
        std::printf("%-44s max rel error %.3e  %s\n", r.subject.c_str(), r.worst(), r.passed() ? "ok" : "FAILED");
        if (!r.passed())
          for (const auto& e : r.entries)
            if (e.max_rel_error >= r.tolerance)
              std::printf("    %s: %.3e over %zu probes\n", e.parameter.c_str(), e.max_rel_error, e.probes);
      },
      c.gradcheck.trials, c.gradcheck.tolerance);
  std::printf("%s\n", ok ? "gradient suite passed" : "gradient suite FAILED");
  return ok ? 0 : 1;
}

void print_eval(const char* label, const ptg::Evaluation& ev) {
  std::printf("%s  baseline PSNR %.4f SSIM %.5f | refined PSNR %.4f SSIM %.5f\n", label, ev.baseline.mean_psnr(),
              ev.baseline.mean_ssim(), ev.refined.mean_psnr(), ev.refined.mean_ssim());
}

int cmd_train(const ptg::RunConfig& c) {
  require(c.paths.train_manifest, "paths.train_manifest");
  require(c.paths.test_manifest, "paths.test_manifest");
  ptg::write_resolved_config(c);
  const auto opts = c.data_options();
  const auto train_set = ptg::load_dataset(c.paths.train_manifest, opts);
  const auto test_set = ptg::load_dataset(c.paths.test_manifest, opts);

  std::ofstream log(out_path(c, "train_log.txt"), std::ios::trunc);
  if (!log) throw ptg::IoError("cannot write " + out_path(c, "train_log.txt").string());
  auto result = ptg::train(c.model, c.train, train_set, test_set, [&](const ptg::EpochLog& e) {
    log << e.line() << '\n' << std::flush;
    std::printf("%s\n", e.line().c_str());
    std::fflush(stdout);
  });
  ptg::write_checkpoint(out_path(c, "checkpoint.ptgc"), result.checkpoint);
  std::printf("wrote %s\n", out_path(c, "checkpoint.ptgc").string().c_str());
  return 0;
}

ptg::JointModel<float> load_model(const ptg::RunConfig& c) {
  require(c.paths.checkpoint, "paths.checkpoint");
  ptg::JointModel<float> model(c.model, c.train.ablation, c.train.seed);
  model.load(ptg::read_checkpoint(c.paths.checkpoint));
  return model;
}

int cmd_eval(const ptg::RunConfig& c) {
  require(c.paths.test_manifest, "paths.test_manifest");
  ptg::write_resolved_config(c);
  const auto model = load_model(c);
  const auto samples = ptg::load_dataset(c.paths.test_manifest, c.data_options());
  const auto ev = ptg::evaluate(model, samples);

  std::ofstream csv(out_path(c, "eval_per_image.csv"), std::ios::trunc);
  csv << "image,psnr_base,psnr_refined,ssim_base,ssim_refined\n";
  for (std::size_t i = 0; i < samples.size(); ++i)
    csv << samples[i].key << ',' << ev.baseline.psnr_db[i] << ',' << ev.refined.psnr_db[i] << ','
        << ev.baseline.ssim[i] << ',' << ev.refined.ssim[i] << '\n';
  json summary{{"images", samples.size()},
               {"baseline", {{"psnr", ev.baseline.mean_psnr()}, {"ssim", ev.baseline.mean_ssim()}}},
               {"refined", {{"psnr", ev.refined.mean_psnr()}, {"ssim", ev.refined.mean_ssim()}}}};
  std::ofstream(out_path(c, "metrics.json"), std::ios::trunc) << summary.dump(2) << '\n';
  print_eval("eval", ev);
  return 0;
}

int cmd_refine(const ptg::RunConfig& c) {
  require(c.paths.input, "paths.input");
  ptg::write_resolved_config(c);
  const auto model = load_model(c);
  const ptg::Image degraded = ptg::read_ppm(c.paths.input);
  const ptg::PriorVector prior =
      c.paths.prior.empty() ? ptg::stub_prior(degraded, c.model.prior_dim, c.data.prior_seed) : ptg::read_prior(c.paths.prior);

  ptg::Tape<float> tape(ptg::Tape<float>::Mode::inference);
  auto pass = model.forward(tape, degraded, prior.tensor<float>());
  auto mask = pass.refined.mask, residual = pass.refined.residual, refined = pass.refined.composed;
  if (c.refine.force_identity) {
    mask = ptg::Tensor<float>::filled(mask.shape(), 1.0f);
    residual = ptg::Tensor<float>(residual.shape());
    refined = ptg::RefinementModule<float>::compose(tape, degraded, pass.restored, mask, residual);
  }
  ptg::Image residual_view = residual.clone();
  for (auto& v : residual_view.data()) v = 0.5f + v;

  ptg::write_ppm(out_path(c, "refined.ppm"), refined);
  ptg::write_ppm(out_path(c, "restored.ppm"), pass.restored);
  ptg::write_ppm(out_path(c, "mask.ppm"), ptg::grey_to_rgb(mask));
  ptg::write_ppm(out_path(c, "residual.ppm"), residual_view);
  std::printf("wrote refined.ppm, restored.ppm, mask.ppm, residual.ppm to %s\n", c.paths.output_dir.c_str());
  return 0;
}

int cmd_ablate(const ptg::RunConfig& c) {
  require(c.paths.train_manifest, "paths.train_manifest");
  require(c.paths.test_manifest, "paths.test_manifest");
  ptg::write_resolved_config(c);
  const auto opts = c.data_options();
  const auto train_set = ptg::load_dataset(c.paths.train_manifest, opts);
  const auto test_set = ptg::load_dataset(c.paths.test_manifest, opts);

  std::ofstream csv(out_path(c, "ablation.csv"), std::ios::trunc);
  if (!csv) throw ptg::IoError("cannot write " + out_path(c, "ablation.csv").string());
  csv << "variant,seed,psnr_base,psnr_refined,ssim_base,ssim_refined\n";
  auto rows = ptg::run_ablation(c.model, c.train, c.ablation_variants(), c.ablate.seeds, train_set, test_set,
                                [&](const ptg::AblationRow& r) {
                                  char line[200];
                                  std::snprintf(line, sizeof line, "%s,%llu,%.4f,%.4f,%.5f,%.5f", r.variant.c_str(),
                                                static_cast<unsigned long long>(r.seed), r.final.psnr_base,
                                                r.final.psnr_refined, r.final.ssim_base, r.final.ssim_refined);
                                  csv << line << '\n' << std::flush;
                                  std::printf("%s\n", line);
                                  std::fflush(stdout);
                                });
  for (const auto& v : ptg::compare_to_full(rows))
    std::printf("full beats %-14s in %zu of %zu seeds\n", v.variant.c_str(), v.wins, v.paired);
  return 0;
}

int cmd_stub_priors(const ptg::RunConfig& c) {
  require(c.paths.manifest, "paths.manifest");
  ptg::write_resolved_config(c);
  const fs::path prior_dir = c.paths.prior_dir.empty() ? out_path(c, "priors") : fs::path(c.paths.prior_dir);
  fs::create_directories(prior_dir);
  if (c.stub.write_degraded) fs::create_directories(out_path(c, "degraded"));

  auto opts = c.data_options();
  std::vector<ptg::ManifestRecord> records;
  for (auto record : ptg::read_manifest(c.paths.manifest)) {
    record.prior.reset();
    const auto sample = ptg::prepare_sample(record, opts);
    const auto stem = record.clean.stem().string();
    const auto prior_path = fs::absolute(prior_dir / (stem + ".osf"));
    ptg::write_prior(prior_path, sample.prior);
    if (c.stub.write_degraded) ptg::write_ppm(out_path(c, "degraded") / (stem + ".ppm"), sample.degraded);
    records.push_back({record.clean, prior_path, record.key});
  }
  ptg::write_manifest(out_path(c, "manifest_with_priors.txt"), records);
  std::printf("wrote %zu prior files to %s\n", records.size(), prior_dir.string().c_str());
  return 0;
}

int cmd_synth(const ptg::RunConfig& c) {
  const auto manifest = ptg::write_synthetic_set(c.paths.output_dir, c.synth.count, c.synth.seed, c.synth.size, c.synth.first);
  ptg::write_resolved_config(c);
  std::printf("wrote %zu scenes and %s\n", c.synth.count, manifest.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prior-guided refinement: training, evaluation, ablation and gradient checks"};
  app.require_subcommand(1);
  Invocation inv;

  auto flag_value = [&inv](const std::string& key) {
    return [&inv, key](const std::string& text) {
      auto value = json::parse(text, nullptr, false);
      inv.flags.emplace_back(key, value.is_discarded() ? json(text) : value);
    };
  };
  auto flag_true = [&inv](const std::string& key) {
    return [&inv, key](std::int64_t) { inv.flags.emplace_back(key, true); };
  };
  auto common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", inv.config_path, "JSON config file");
    sub->add_option("-s,--set", inv.overrides, "override a config key, e.g. --set train.epochs=5")->take_all();
    sub->add_option_function<std::string>("-o,--out", flag_value("paths.output_dir"), "output directory");
  };
  auto data_flags = [&](CLI::App* sub) {
    sub->add_option_function<std::string>("--train-manifest", flag_value("paths.train_manifest"), "training manifest");
    sub->add_option_function<std::string>("--test-manifest", flag_value("paths.test_manifest"), "held-out manifest");
    sub->add_option_function<std::string>("--epochs", flag_value("train.epochs"), "training epochs");
    sub->add_option_function<std::string>("--seed", flag_value("train.seed"), "model seed");
  };

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every parameterised op and the full module");
  common(gradcheck);
  gradcheck->add_option_function<std::string>("--trials", flag_value("gradcheck.trials"), "probes per tensor");

  auto* train = app.add_subcommand("train", "jointly train the baseline and the refinement module");
  common(train);
  data_flags(train);
  train->add_option_function<std::string>("--ablation", flag_value("train.ablation"),
                                          "JSON list of toggles, e.g. '[\"no_ca\"]'");
  train->add_flag_function("--freeze-baseline", flag_true("train.freeze_baseline"), "train only the refinement module");

  auto* eval = app.add_subcommand("eval", "PSNR/SSIM of baseline and refined outputs on a manifest");
  common(eval);
  eval->add_option_function<std::string>("--checkpoint", flag_value("paths.checkpoint"), "checkpoint file");
  eval->add_option_function<std::string>("--test-manifest", flag_value("paths.test_manifest"), "manifest");

  auto* refine = app.add_subcommand("refine", "refine one degraded image");
  common(refine);
  refine->add_option_function<std::string>("--checkpoint", flag_value("paths.checkpoint"), "checkpoint file");
  refine->add_option_function<std::string>("--input", flag_value("paths.input"), "degraded PPM image");
  refine->add_option_function<std::string>("--prior", flag_value("paths.prior"), "OSF1 prior (default: stub)");
  refine->add_flag_function("--force-identity", flag_true("refine.force_identity"), "force mask 1 and residual 0");

  auto* ablate = app.add_subcommand("ablate", "train every ablation variant for every seed");
  common(ablate);
  data_flags(ablate);
  ablate->add_option_function<std::string>("--seeds", flag_value("ablate.seeds"), "JSON list of seeds");

  auto* stub = app.add_subcommand("stub-priors", "write stub OSF1 priors for a manifest");
  common(stub);
  stub->add_option_function<std::string>("--manifest", flag_value("paths.manifest"), "manifest of clean images");
  stub->add_flag_function("--write-degraded", flag_true("stub.write_degraded"), "also write the degraded crops");

  auto* synth = app.add_subcommand("synth", "write a synthetic clean-image set and its manifest");
  common(synth);
  synth->add_option_function<std::string>("--count", flag_value("synth.count"), "number of scenes");
  synth->add_option_function<std::string>("--size", flag_value("synth.size"), "side length");
  synth->add_option_function<std::string>("--first", flag_value("synth.first"), "first scene index");
  synth->add_option_function<std::string>("--synth-seed", flag_value("synth.seed"), "scene seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n' << app.help();
    return 1;
  }

  try {
    const auto config = resolve(inv);
    if (gradcheck->parsed()) return cmd_gradcheck(config);
    if (train->parsed()) return cmd_train(config);
    if (eval->parsed()) return cmd_eval(config);
    if (refine->parsed()) return cmd_refine(config);
    if (ablate->parsed()) return cmd_ablate(config);
    if (stub->parsed()) return cmd_stub_priors(config);
    if (synth->parsed()) return cmd_synth(config);
  } catch (const ptg::IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const ptg::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
