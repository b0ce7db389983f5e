#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sys/wait.h>

#include "bonecheck/checkpoint.hpp"
#include "bonecheck/zoo.hpp"
#include "service_support.hpp"
#include "support.hpp"

using namespace bonecheck;
using testing_support::run_cli_captured;
using testing_support::TempDir;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path constant_checkpoint(const TempDir& dir, const std::string& name, double p, std::size_t size = 16) {
  ArchConfig cfg;
  cfg.arch = "micro_mobile";
  cfg.input_size = {1, size, size};
  cfg.stem_width = 4;
  auto m = build_model<float>(cfg);
  for (auto& w : m.param("predictions/weight").values()) w = 0.0f;
  m.param("predictions/bias")[0] = static_cast<float>(std::log(p / (1 - p)));
  const fs::path out = dir / (name + ".ckpt");
  save_checkpoint(m, out);
  return out;
}

int run_binary(const std::string& args) {
  const std::string cmd = std::string(BONECHECK_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Cli, HelpIsSuccessAndBadFlagsAreUsageErrors) {
  EXPECT_EQ(run_cli_captured({"--help"}).code, 0);
  EXPECT_EQ(run_cli_captured({}).code, 2);
  EXPECT_EQ(run_cli_captured({"gen-data"}).code, 2);  // missing --out
  EXPECT_EQ(run_cli_captured({"gen-data", "--out", "x", "--seed", "abc"}).code, 2);
  EXPECT_EQ(run_cli_captured({"frobnicate"}).code, 2);
}

TEST(Cli, ExecutableFollowsTheExitCodeContract) {
  TempDir dir;
  EXPECT_EQ(run_binary("--help"), 0);
  EXPECT_EQ(run_binary("predict --image"), 2);
  EXPECT_EQ(run_binary("gen-data --out " + (dir / "d").string() + " --image-size 12 --types hand"), 0);
  EXPECT_EQ(run_binary("predict --model " + (dir / "none.ckpt").string() + " --image " + (dir / "none.png").string()), 1);
}

TEST(Cli, GenDataIsDeterministicAndSummarized) {
  TempDir a, b;
  const auto ra = run_cli_captured({"gen-data", "--out", a.path().string(), "--seed", "9", "--image-size", "16",
                                    "--types", "elbow,wrist"});
  const auto rb = run_cli_captured({"gen-data", "--out", b.path().string(), "--seed", "9", "--image-size", "16",
                                    "--types", "elbow,wrist"});
  ASSERT_EQ(ra.code, 0) << ra.err;
  ASSERT_EQ(rb.code, 0);
  EXPECT_NE(ra.out.find("12 studies"), std::string::npos);  // (2 train + 1 valid) x 2 types x 2 labels
  EXPECT_NE(ra.out.find("train wrist abnormal: 2"), std::string::npos);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a.path())) {
    if (!e.is_regular_file()) continue;
    const auto rel = e.path().lexically_relative(a.path());
    EXPECT_EQ(slurp(e.path()), slurp(b.path() / rel)) << rel;
    ++files;
  }
  EXPECT_GT(files, 12u);
}

TEST(Cli, GenDataFailures) {
  EXPECT_EQ(run_cli_captured({"gen-data", "--out", "/proc/bonecheck_not_writable"}).code, 1);
  TempDir dir;
  const auto r = run_cli_captured({"gen-data", "--out", dir.path().string(), "--types", "knee"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("knee"), std::string::npos);
}

TEST(Cli, TrainWithUnknownArchitectureListsTheValidOnes) {
  TempDir dir;
  const auto r = run_cli_captured({"train", "--arch", "bogus", "--data", dir.path().string(), "--out",
                                   (dir / "m.ckpt").string()});
  EXPECT_EQ(r.code, 2);
  for (const auto arch : kArchitectures) EXPECT_NE(r.err.find(std::string(arch)), std::string::npos);
}

TEST(Cli, TrainWritesCheckpointAndDeterministicLog) {
  TempDir dir;
  ASSERT_EQ(run_cli_captured({"gen-data", "--out", (dir / "data").string(), "--image-size", "16", "--types",
                              "hand,finger", "--max-views", "1"})
                .code,
            0);
  std::vector<std::string> logs;
  for (int run = 0; run < 2; ++run) {
    const auto out = dir / ("m" + std::to_string(run) + ".ckpt");
    const auto r = run_cli_captured({"train", "--arch", "micro_mobile", "--data", (dir / "data").string(), "--epochs",
                                     "2", "--batch-size", "4", "--image-size", "16", "--seed", "3", "--out",
                                     out.string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(out));
    const auto log = dir / ("m" + std::to_string(run) + ".log.csv");
    ASSERT_TRUE(fs::exists(log));
    logs.push_back(slurp(log));
  }
  EXPECT_EQ(logs[0], logs[1]);
  EXPECT_EQ(logs[0].rfind("epoch,train_loss,valid_loss,valid_acc,seconds\n", 0), 0u);
  EXPECT_EQ(load_checkpoint(dir / "m0.ckpt").params(), load_checkpoint(dir / "m1.ckpt").params());
}

TEST(Cli, EvalOfMismatchedEnsembleNamesBothShapes) {
  TempDir dir;
  const auto a = constant_checkpoint(dir, "a", 0.3, 16);
  const auto b = constant_checkpoint(dir, "b", 0.3, 24);
  const auto r = run_cli_captured({"eval", "--ensemble", a.string() + "," + b.string(), "--data", dir.path().string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("(1,16,16)"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("(1,24,24)"), std::string::npos) << r.err;
}

TEST(Cli, EvalNeedsExactlyOneModelSource) {
  TempDir dir;
  EXPECT_EQ(run_cli_captured({"eval", "--data", dir.path().string()}).code, 1);
}

TEST(Cli, EvalWritesReportAndPredictions) {
  TempDir dir;
  ASSERT_EQ(run_cli_captured({"gen-data", "--out", (dir / "data").string(), "--image-size", "16", "--train-studies",
                              "0", "--valid-studies", "1", "--types", "forearm"})
                .code,
            0);
  const auto ck = constant_checkpoint(dir, "low", 0.05);
  const auto r = run_cli_captured({"eval", "--model", ck.string(), "--data", (dir / "data").string(), "--out",
                                   (dir / "report.json").string(), "--predictions", (dir / "preds.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("kappa (precision, recall)"), std::string::npos);
  const auto report = nlohmann::json::parse(slurp(dir / "report.json"));
  EXPECT_EQ(report.at("rows").size(), 1u);
  EXPECT_EQ(report.at("overall").at("confusion").at("tp"), 1);
  EXPECT_EQ(report.at("overall").at("confusion").at("fp"), 1);
  const auto csv = slurp(dir / "preds.csv");
  EXPECT_NE(csv.find(",abnormal\n"), std::string::npos);
  EXPECT_EQ(csv.find(",normal\n"), std::string::npos);
}

TEST(Cli, PredictDecisionsFollowTheScore) {
  TempDir dir;
  write_file_bytes(dir / "x.png", encode_png(testing_support::gradient_image(20, 20)));
  const auto low = constant_checkpoint(dir, "low", 0.05);
  const auto high = constant_checkpoint(dir, "high", 0.88);
  const auto r = run_cli_captured({"predict", "--model", low.string(), "--model", high.string(), "--image",
                                   (dir / "x.png").string(), "--json"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto arr = nlohmann::json::parse(r.out);
  ASSERT_EQ(arr.size(), 2u);
  EXPECT_EQ(arr[0].at("model"), "low");
  EXPECT_NEAR(arr[0].at("probability_normal").get<double>(), 0.05, 1e-6);
  EXPECT_EQ(arr[0].at("decision"), "abnormal");
  EXPECT_NEAR(arr[1].at("probability_normal").get<double>(), 0.88, 1e-6);
  EXPECT_EQ(arr[1].at("decision"), "normal");
  EXPECT_FALSE(arr[0].contains("elapsed_ms"));
}

TEST(Cli, PredictWithCamWritesOneOverlayPerModel) {
  TempDir dir;
  write_file_bytes(dir / "x.png", encode_png(testing_support::gradient_image(20, 18)));
  const auto a = constant_checkpoint(dir, "a", 0.2);
  const auto b = constant_checkpoint(dir, "b", 0.7);
  const auto r = run_cli_captured({"predict", "--model", a.string(), "--model", "pair=" + a.string() + "," + b.string(),
                                   "--image", (dir / "x.png").string(), "--cam", "--out", (dir / "cams").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"a_cam.png", "pair_cam.png"}) {
    ASSERT_TRUE(fs::exists(dir / "cams" / f)) << f;
    const auto img = decode_png(read_file_bytes(dir / "cams" / f));
    EXPECT_EQ(img.width, 20u);
    EXPECT_EQ(img.height, 18u);
  }
  EXPECT_NE(r.out.find("pair probability_normal="), std::string::npos);
}

TEST(Cli, PredictWithUnreadableImageFails) {
  TempDir dir;
  const auto ck = constant_checkpoint(dir, "m", 0.5);
  std::ofstream(dir / "broken.png") << "garbage";
  const auto r = run_cli_captured({"predict", "--model", ck.string(), "--image", (dir / "broken.png").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("broken.png"), std::string::npos);
  EXPECT_EQ(run_cli_captured({"predict", "--model", ck.string(), "--image", (dir / "missing.png").string()}).code, 1);
}

TEST(Cli, ServeWithMissingCheckpointFails) {
  EXPECT_EQ(run_cli_captured({"serve", "--model", "/nonexistent/m.ckpt", "--port", "0"}).code, 1);
}
