#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ptg/checkpoint.hpp"
#include "ptg/dataset.hpp"
#include "ptg/image.hpp"
#include "ptg/prior.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "ptg_cli_test";

// Shared settings that keep every command small enough for a unit test.
const std::string kSmall =
    " -s model.channels=8 -s model.prior_dim=16 -s model.attn_downsample=2 -s data.crop_size=32";

int run(const std::string& args, std::string* output = nullptr) {
  const auto log = kWork / "last_output.txt";
  const std::string cmd = std::string(PTG_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  if (output) {
    std::ifstream in(log);
    std::ostringstream s;
    s << in.rdbuf();
    *output = s.str();
  }
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kWork);
    fs::create_directories(kWork);
  }
  static void TearDownTestSuite() { fs::remove_all(kWork); }
};

}  // namespace

TEST_F(Cli, UnknownSubcommandIsAUsageError) {
  std::string out;
  EXPECT_EQ(run("frobnicate", &out), 1);
  EXPECT_NE(out.find("Usage"), std::string::npos) << out;
  EXPECT_EQ(run("", &out), 1);
}

TEST_F(Cli, BadConfigKeyIsAValidationError) {
  std::string out;
  EXPECT_EQ(run("gradcheck -s train.nonsense=1", &out), 1);
  EXPECT_NE(out.find("train.nonsense"), std::string::npos) << out;
  EXPECT_EQ(run("gradcheck -s gradcheck.trials=0"), 1);
}

TEST_F(Cli, MissingFilesAreIoErrors) {
  EXPECT_EQ(run("gradcheck -c " + (kWork / "absent.json").string()), 2);
  EXPECT_EQ(run("train --train-manifest /nonexistent/m.txt --test-manifest /nonexistent/m.txt -o " +
                (kWork / "missing").string()),
            2);
}

TEST_F(Cli, ConfigFileIsReadAndResolved) {
  const auto cfg = kWork / "cfg.json";
  std::ofstream(cfg) << R"({"synth": {"count": 2, "size": 16}, "paths": {"output_dir": ")"
                     << (kWork / "from_file").string() << R"("}})";
  ASSERT_EQ(run("synth -c " + cfg.string() + " --count 3"), 0);
  EXPECT_TRUE(fs::exists(kWork / "from_file/scene_0002.ppm"));
  EXPECT_FALSE(fs::exists(kWork / "from_file/scene_0003.ppm"));
  std::ifstream resolved(kWork / "from_file/resolved_config.json");
  std::ostringstream text;
  text << resolved.rdbuf();
  EXPECT_NE(text.str().find("\"count\": 3"), std::string::npos) << text.str();
}

TEST_F(Cli, GradientSuitePasses) {
  std::string out;
  EXPECT_EQ(run("gradcheck --trials 4", &out), 0) << out;
  EXPECT_NE(out.find("gradient suite passed"), std::string::npos) << out;
}

TEST_F(Cli, TrainEvalRefineRoundTrip) {
  const auto data = kWork / "data", run_dir = kWork / "run";
  ASSERT_EQ(run("synth --count 4 --size 40 -o " + data.string()), 0);
  ASSERT_EQ(run("stub-priors --manifest " + (data / "manifest.txt").string() + " --write-degraded -o " +
                data.string() + kSmall),
            0);
  const auto manifest = data / "manifest_with_priors.txt";
  ASSERT_TRUE(fs::exists(manifest));
  ASSERT_TRUE(fs::exists(data / "priors/scene_0000.osf"));
  EXPECT_EQ(ptg::read_prior(data / "priors/scene_0000.osf").dim(), 16u);

  std::string out;
  ASSERT_EQ(run("train --epochs 1 --train-manifest " + manifest.string() + " --test-manifest " + manifest.string() +
                    " -o " + run_dir.string() + kSmall,
                &out),
            0)
      << out;
  std::ifstream log(run_dir / "train_log.txt");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(log, line)) ++lines;
  EXPECT_EQ(lines, 2u);
  const auto ckpt = run_dir / "checkpoint.ptgc";
  ASSERT_TRUE(fs::exists(ckpt));

  ASSERT_EQ(run("eval --checkpoint " + ckpt.string() + " --test-manifest " + manifest.string() + " -o " +
                    (kWork / "eval").string() + kSmall,
                &out),
            0)
      << out;
  EXPECT_TRUE(fs::exists(kWork / "eval/metrics.json"));
  EXPECT_TRUE(fs::exists(kWork / "eval/eval_per_image.csv"));

  // A checkpoint from a different model width must be refused.
  EXPECT_EQ(run("eval --checkpoint " + ckpt.string() + " --test-manifest " + manifest.string() + " -o " +
                (kWork / "eval_wide").string() + kSmall + " -s model.channels=12"),
            1);

  const auto input = data / "degraded/scene_0001.ppm";
  ASSERT_TRUE(fs::exists(input));
  const auto refine_dir = kWork / "identity";
  ASSERT_EQ(run("refine --force-identity --checkpoint " + ckpt.string() + " --input " + input.string() + " -o " +
                    refine_dir.string() + kSmall,
                &out),
            0)
      << out;
  const auto refined = ptg::read_ppm(refine_dir / "refined.ppm");
  const auto restored = ptg::read_ppm(refine_dir / "restored.ppm");
  ASSERT_EQ(refined.shape(), restored.shape());
  for (std::size_t i = 0; i < refined.numel(); ++i) EXPECT_LE(std::abs(refined[i] - restored[i]), 1.0f / 255.0f + 1e-6f);
  for (const char* name : {"mask.ppm", "residual.ppm"}) EXPECT_TRUE(fs::exists(refine_dir / name)) << name;

  EXPECT_EQ(run("refine --checkpoint " + ckpt.string() + " --input " + input.string() + " --prior " +
                (data / "priors/none.osf").string() + " -o " + refine_dir.string() + kSmall),
            2);
}
