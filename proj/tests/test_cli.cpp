#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include <gtest/gtest.h>

#include "flex/cli.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int rc;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "flex");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  const int rc = flex::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {rc, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

std::string field(const std::string& text, const std::string& key) {
  std::smatch m;
  const std::regex re(key + " (\\S+)");
  return std::regex_search(text, m, re) ? m[1].str() : "";
}

class Cli : public ::testing::Test {
 protected:
  static fs::path root() {
    static const fs::path dir = [] {
      const fs::path d = fs::temp_directory_path() / ("flex_cli_" + std::to_string(::getpid()));
      fs::remove_all(d);
      fs::create_directories(d);
      return d;
    }();
    return dir;
  }

  static std::vector<std::string> small_synth(const fs::path& out, int blur, int seed, int scenes = 6) {
    return {"synth", "--scenes", std::to_string(scenes), "--blur", std::to_string(blur), "--seed",
            std::to_string(seed), "--image-size", "64", "--max-objects", "2", "--min-extent", "8",
            "--max-extent", "24", "--out", out.string()};
  }

  static std::vector<std::string> small_train(const fs::path& out, const std::string& ablation,
                                              std::size_t epochs = 1) {
    return {"train", "--data", data().string(), "--eval-data", data().string(), "--ablation", ablation,
            "--epochs", std::to_string(epochs), "--channels", "32", "--delta", "6", "--head-hidden", "16",
            "--feedback-hidden", "8", "--pool-size", "3", "--seed", "3", "--out", out.string()};
  }

  static fs::path data() {
    static const fs::path d = [] {
      const fs::path p = root() / "data";
      EXPECT_EQ(run(small_synth(p, 1, 5)).rc, 0);
      return p;
    }();
    return d;
  }

  static fs::path full_checkpoint() {
    static const fs::path c = [] {
      const auto r = run(small_train(root() / "full", "+cls+img"));
      EXPECT_EQ(r.rc, 0) << r.err;
      return fs::path(field(r.out, "checkpoint"));
    }();
    return c;
  }
};

}  // namespace

TEST_F(Cli, SynthIsDeterministic) {
  const auto a = run(small_synth(root() / "s1", 9, 7)), b = run(small_synth(root() / "s2", 9, 7));
  ASSERT_EQ(a.rc, 0) << a.err;
  ASSERT_EQ(b.rc, 0) << b.err;
  EXPECT_EQ(field(a.out, "sha256").size(), 64u);
  EXPECT_EQ(field(a.out, "sha256"), field(b.out, "sha256"));
  const auto c = run(small_synth(root() / "s3", 9, 8));
  EXPECT_NE(field(a.out, "sha256"), field(c.out, "sha256"));
  EXPECT_TRUE(fs::exists(root() / "s1" / "index.meta.json"));
}

TEST_F(Cli, SynthZeroScenesIsValid) {
  const auto r = run(small_synth(root() / "empty", 1, 1, 0));
  ASSERT_EQ(r.rc, 0) << r.err;
  EXPECT_EQ(flex::load_dataset(root() / "empty").scenes.size(), 0u);
}

TEST_F(Cli, TrainWritesCheckpointAndMetrics) {
  const auto ckpt = full_checkpoint();
  ASSERT_TRUE(fs::exists(ckpt));
  const fs::path dir = ckpt.parent_path();
  int metrics = 0;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".csv") {
      ++metrics;
      const std::string csv = slurp(e.path());
      EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
    }
  EXPECT_EQ(metrics, 1);
  const auto [model, info] = flex::load_checkpoint<float>(ckpt);
  EXPECT_EQ(model.config().ablation, flex::Ablation::Full);
  EXPECT_EQ(info.epochs_trained, 1u);
}

TEST_F(Cli, TrainIsIdempotent) {
  const auto a = run(small_train(root() / "idem1", "multi-level"));
  const auto b = run(small_train(root() / "idem2", "multi-level"));
  ASSERT_EQ(a.rc, 0) << a.err;
  ASSERT_EQ(b.rc, 0) << b.err;
  const fs::path ma = field(a.out, "metrics"), mb = field(b.out, "metrics");
  EXPECT_EQ(ma.filename(), mb.filename());
  EXPECT_EQ(slurp(ma), slurp(mb));
  EXPECT_EQ(slurp(field(a.out, "checkpoint")), slurp(field(b.out, "checkpoint")));
}

TEST_F(Cli, CascadeDepthAndParameterizationFlags) {
  auto args = small_train(root() / "deep", "+cls+img", 0);
  for (const char* a : {"--cascade-depth", "3", "--parameterization", "gaussian"}) args.emplace_back(a);
  const auto r = run(args);
  ASSERT_EQ(r.rc, 0) << r.err;
  const auto [model, info] = flex::load_checkpoint<float>(field(r.out, "checkpoint"));
  EXPECT_EQ(model.config().cascade_depth, 3u);
  EXPECT_EQ(model.config().parameterization, flex::Parameterization::Gaussian);
  EXPECT_EQ(info.epochs_trained, 0u);
}

TEST_F(Cli, ClassFeedbackWithoutMultiLevelIsUsageError) {
  auto args = small_train(root() / "bad", "cls", 0);
  EXPECT_EQ(run(args).rc, 1);
  args = small_train(root() / "bad", "nonsense", 0);
  EXPECT_EQ(run(args).rc, 1);
}

TEST_F(Cli, FlagsOverrideConfigFile) {
  const fs::path cfg = root() / "cfg.json";
  {
    std::ofstream os(cfg);
    os << R"({"model": {"channels": 64, "delta": 6.0, "head_hidden": 8}, "train": {"epochs": 0}})";
  }
  const auto r = run({"train", "--config", cfg.string(), "--data", data().string(), "--channels", "32", "--out",
                      (root() / "cfgrun").string()});
  ASSERT_EQ(r.rc, 0) << r.err;
  const auto [model, info] = flex::load_checkpoint<float>(field(r.out, "checkpoint"));
  EXPECT_EQ(model.config().channels, 32u);
  EXPECT_EQ(model.config().head_hidden, 8u);
  EXPECT_EQ(info.epochs_trained, 0u);
}

TEST_F(Cli, UnknownConfigKeyIsConfigurationError) {
  const fs::path cfg = root() / "unknown.json";
  {
    std::ofstream os(cfg);
    os << R"({"train": {"epochs": 1, "learning_rate": 0.1}})";
  }
  const auto r = run({"train", "--config", cfg.string(), "--data", data().string(), "--out", root().string()});
  EXPECT_EQ(r.rc, 2);
  EXPECT_NE(r.err.find("learning_rate"), std::string::npos);
}

TEST_F(Cli, UnknownFlagAndMissingSubcommandAreUsageErrors) {
  EXPECT_EQ(run({"train", "--bogus", "1"}).rc, 1);
  EXPECT_EQ(run({}).rc, 1);
  EXPECT_EQ(run({"analyze"}).rc, 1);
}

TEST_F(Cli, HelpListsEveryTrainFlag) {
  const auto r = run({"train", "--help"});
  EXPECT_EQ(r.rc, 0);
  for (const char* f : {"--ablation", "--parameterization", "--cascade-depth", "--gamma", "--sigma", "--delta",
                        "--seed", "--threads", "--config", "--epochs"})
    EXPECT_NE(r.out.find(f), std::string::npos) << f;
}

TEST_F(Cli, MissingCheckpointIsUsageError) {
  EXPECT_EQ(run({"eval", "--checkpoint", (root() / "nope.flex").string(), "--data", data().string()}).rc, 1);
}

TEST_F(Cli, MissingDatasetIsUsageError) {
  EXPECT_EQ(run({"train", "--data", (root() / "nowhere").string(), "--out", root().string()}).rc, 1);
}

TEST_F(Cli, EvalEmitsReport) {
  const auto r = run({"eval", "--checkpoint", full_checkpoint().string(), "--data", data().string(), "--out",
                      (root() / "eval").string()});
  ASSERT_EQ(r.rc, 0) << r.err;
  const std::string csv = slurp(field(r.out, "report"));
  EXPECT_EQ(csv.rfind("metric,value\nAP50,", 0), 0u);
  EXPECT_NE(csv.find("\nmAP,"), std::string::npos);
  EXPECT_NE(csv.find("\nfallbacks,"), std::string::npos);
}

TEST_F(Cli, AnalyzeBlurHasFourRows) {
  const auto r = run({"analyze", "blur", "--checkpoint", full_checkpoint().string(), "--data", data().string(),
                      "--kernels", "1,5,9,21", "--out", (root() / "an").string()});
  ASSERT_EQ(r.rc, 0) << r.err;
  const fs::path file = field(r.out, "report");
  EXPECT_NE(file.filename().string().find("k1_5_9_21"), std::string::npos);
  const std::string csv = slurp(file);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  fs::path summary = file;
  summary.replace_extension(".json");
  const auto j = nlohmann::json::parse(slurp(summary));
  EXPECT_EQ(j.at("analysis"), "blur");
  EXPECT_EQ(j.at("untrained"), false);
}

TEST_F(Cli, AnalyzeTopWarnsOnSmallSubset) {
  const auto r = run({"analyze", "top", "--checkpoint", full_checkpoint().string(), "--data", data().string(),
                      "--fraction", "0.1", "--out", (root() / "an").string()});
  ASSERT_EQ(r.rc, 0) << r.err;
  EXPECT_NE(r.err.find("warning"), std::string::npos);
  EXPECT_NE(r.out.find("top-fraction,21,"), std::string::npos);
}

TEST_F(Cli, AnalyzeIgWritesBins) {
  const auto r = run({"analyze", "ig", "--checkpoint", full_checkpoint().string(), "--data", data().string(),
                      "--bins", "16", "--out", (root() / "an").string()});
  ASSERT_EQ(r.rc, 0) << r.err;
  const std::string csv = slurp(field(r.out, "report"));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 17);
}

TEST_F(Cli, BlurAnalysisOfBaselineIsConfigurationError) {
  const auto t = run(small_train(root() / "base", "baseline", 0));
  ASSERT_EQ(t.rc, 0) << t.err;
  const auto ckpt = field(t.out, "checkpoint");
  const auto r = run({"analyze", "blur", "--checkpoint", ckpt, "--data", data().string(), "--out",
                      (root() / "an").string()});
  EXPECT_EQ(r.rc, 2);
  const auto ig = run({"analyze", "ig", "--checkpoint", ckpt, "--data", data().string(), "--out",
                       (root() / "an").string()});
  EXPECT_EQ(ig.rc, 2);
}

TEST_F(Cli, UntrainedCheckpointIsFlagged) {
  const auto t = run(small_train(root() / "untrained", "+cls+img", 0));
  ASSERT_EQ(t.rc, 0) << t.err;
  const auto r = run({"analyze", "ig", "--checkpoint", field(t.out, "checkpoint"), "--data", data().string(),
                      "--out", (root() / "an").string()});
  ASSERT_EQ(r.rc, 0) << r.err;
  EXPECT_NE(r.err.find("untrained"), std::string::npos);
}
