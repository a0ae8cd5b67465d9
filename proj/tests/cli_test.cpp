#include "rxf/checkpoint.hpp"
#include "rxf/data.hpp"
#include "rxf/random.hpp"
#include "rxf/report.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <regex>
#include <sstream>
#include <sys/wait.h>

using namespace rxf;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "rxf_cli_test";

struct Outcome {
  int status = 0;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Outcome run_cli(const std::string& args) {
  const fs::path err = kRoot / "stderr.txt";
  const std::string cmd = "cd '" + kRoot.string() + "' && '" RXF_BINARY "' --no-timestamps " + args + " 2>'" +
                          err.string() + "'";
  Outcome r;
  FILE* pipe = popen(cmd.c_str(), "r");
  char buf[4096];
  for (std::size_t n; (n = fread(buf, 1, sizeof buf, pipe)) > 0;) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.status = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = slurp(err);
  return r;
}

// Small dataset and branches shared by the tests.
class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
    ASSERT_EQ(run_cli("gen-data --out d --per-scene-counts 4,0,2 --seed 7").status, 0);
    ASSERT_EQ(run_cli("train-detector --modality rgb --data d --epochs 1 --out rgb.rxf").status, 0);
    ASSERT_EQ(run_cli("train-detector --modality x --data d --epochs 1 --out x.rxf").status, 0);
    ASSERT_EQ(run_cli("train-classifier --data d --rgb-ckpt rgb.rxf --epochs 1 --out clf.rxf").status, 0);
    for (const char* s : {"day", "night", "fog"}) {
      const std::string scene = s;
      ASSERT_EQ(run_cli("train-fusion --data d --rgb-ckpt rgb.rxf --x-ckpt x.rxf --epochs 1 --scene " + scene +
                    " --out f_" + scene + ".rxf")
                    .status,
                0);
    }
  }
  static void TearDownTestSuite() { fs::remove_all(kRoot); }

  static std::string system_flags() {
    return " --data d --rgb-ckpt rgb.rxf --x-ckpt x.rxf --classifier clf.rxf --fusion f_day.rxf f_night.rxf "
           "f_fog.rxf";
  }
};

}  // namespace

TEST_F(Cli, GenDataCountsAndRerunIsIdentical) {
  const Dataset d = load_dataset(kRoot / "d");
  EXPECT_EQ(d.images.size(), 18u);
  ASSERT_EQ(run_cli("gen-data --out d2 --per-scene-counts 4,0,2 --seed 7").status, 0);
  for (const auto& e : fs::recursive_directory_iterator(kRoot / "d")) {
    if (!e.is_regular_file()) continue;
    EXPECT_EQ(slurp(e.path()), slurp(kRoot / "d2" / fs::relative(e.path(), kRoot / "d")));
  }
}

TEST_F(Cli, ErrorsCarryACodeAndNonzeroExit) {
  const std::regex code("^E[0-9]{3}: .+\n$");
  for (const std::string args : {"gen-data --out /proc/forbidden/x", "gen-data --out z --per-scene-counts 1,2",
                                 "train-detector --modality rgb --data missing --out m.rxf",
                                 "train-fusion --data d", "eval --data d --out e",
                                 "train-classifier --data d --rgb-ckpt nope.rxf --out c.rxf"}) {
    const Outcome r = run_cli(args);
    EXPECT_NE(r.status, 0) << args;
    EXPECT_TRUE(std::regex_match(r.err, code)) << args << ": " << r.err;
  }
  const Outcome mismatch = run_cli("infer --data d --rgb-ckpt rgb.rxf --x-ckpt x.rxf --classifier clf.rxf "
                           "--fusion f_day.rxf --id 0");
  EXPECT_EQ(mismatch.err.rfind("E006", 0), 0u) << mismatch.err;
  const Outcome swapped = run_cli("infer --data d --rgb-ckpt x.rxf --x-ckpt rgb.rxf --classifier clf.rxf "
                          "--fusion f_day.rxf f_night.rxf f_fog.rxf --id 0");
  EXPECT_EQ(swapped.err.rfind("E005", 0), 0u) << swapped.err;
}

TEST_F(Cli, ZeroLearningRateKeepsInitAndLogsCsv) {
  ASSERT_EQ(run_cli("train-detector --modality x --data d --epochs 2 --lr 0 --seed 3 --out x0.rxf").status, 0);
  const Detector got = load_detector(kRoot / "x0.rxf");
  const Detector init(Modality::kX, got.config, mix_seed(3, 2));
  const auto a = got.parameters().items(), b = init.parameters().items();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE((a[i].tensor.values() == b[i].tensor.values()).all());
  const std::string log = slurp(kRoot / "x0.csv");
  EXPECT_EQ(log.rfind("epoch,loss,lr\n", 0), 0u);
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 3);
}

TEST_F(Cli, SameSeedGivesIdenticalArtifacts) {
  ASSERT_EQ(run_cli("train-detector --modality rgb --data d --epochs 1 --out rgb_again.rxf").status, 0);
  EXPECT_EQ(slurp(kRoot / "rgb.rxf"), slurp(kRoot / "rgb_again.rxf"));
  EXPECT_EQ(slurp(kRoot / "rgb.csv"), slurp(kRoot / "rgb_again.csv"));
  ASSERT_EQ(run_cli("train-detector --modality rgb --data d --epochs 1 --seed 5 --out rgb_other.rxf").status, 0);
  EXPECT_NE(slurp(kRoot / "rgb.rxf"), slurp(kRoot / "rgb_other.rxf"));
}

TEST_F(Cli, FrozenHeadFusionReport) {
  const std::string x_before = slurp(kRoot / "x.rxf");
  const Outcome r = run_cli("train-fusion --data d --rgb-ckpt rgb.rxf --x-ckpt x.rxf --scene agnostic --head th "
                    "--fraction 25 --epochs 2 --out f_th.rxf");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(slurp(kRoot / "x.rxf"), x_before);
  std::smatch m;
  ASSERT_TRUE(std::regex_search(r.out, m, std::regex("samples (\\d+) trainable (\\d+) total (\\d+)"))) << r.out;
  EXPECT_EQ(std::stoi(m[1]), 3);  // ceil(0.25 * 12)
  const FusionModel f = load_fusion(kRoot / "f_th.rxf");
  EXPECT_EQ(f.head_mode, HeadMode::kFrozenX);
  EXPECT_EQ(f.fraction, 0.25);
  EXPECT_EQ(std::stoll(m[2]), param_count(f.bank).trainable);
  EXPECT_LT(std::stod(m[2]) / std::stod(m[3]), 0.05);
}

TEST_F(Cli, WarmStartFromAgnosticBank) {
  ASSERT_EQ(run_cli("train-fusion --data d --rgb-ckpt rgb.rxf --x-ckpt x.rxf --epochs 1 --out f_ag.rxf").status, 0);
  const Outcome r = run_cli("train-fusion --data d --rgb-ckpt rgb.rxf --x-ckpt x.rxf --epochs 1 --lr 0 --scene fog "
                            "--warm-start f_ag.rxf --out f_fog_warm.rxf");
  ASSERT_EQ(r.status, 0) << r.err;
  const FusionModel ag = load_fusion(kRoot / "f_ag.rxf"), warm = load_fusion(kRoot / "f_fog_warm.rxf");
  EXPECT_EQ(warm.scene, "fog");
  const auto a = ag.bank.parameters().items(), b = warm.bank.parameters().items();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE((a[i].tensor.values() == b[i].tensor.values()).all());
  const Outcome bad = run_cli("train-fusion --data d --rgb-ckpt rgb.rxf --x-ckpt x.rxf --epochs 1 --scene fog "
                              "--module eca --warm-start f_ag.rxf --out f_bad.rxf");
  EXPECT_EQ(bad.err.rfind("E004", 0), 0u) << bad.err;
}

TEST_F(Cli, EvalOfPerfectDetectionsFileScoresOne) {
  const Dataset d = load_dataset(kRoot / "d");
  const auto ids = d.split_ids("test");
  std::vector<std::vector<Detection>> dets;
  for (int id : ids) {
    std::vector<Detection> per;
    for (const auto& g : d.image(id).gts) per.push_back({g.class_id, 1.0, g.box});
    dets.push_back(per);
  }
  std::ofstream(kRoot / "perfect.json") << detections_to_json(ids, dets).dump();
  const Outcome r = run_cli("eval --data d --detections perfect.json --model-name oracle --out ev_perfect");
  ASSERT_EQ(r.status, 0) << r.err;
  const auto metrics = metrics_from_json(nlohmann::json::parse(slurp(kRoot / "ev_perfect/metrics.json")));
  int checked = 0;
  for (const auto& rec : metrics) {
    if (rec.value && rec.metric.find("AP") != std::string::npos) {
      EXPECT_EQ(*rec.value, 1.0) << rec.metric << ' ' << rec.scene << ' ' << rec.cls;
      ++checked;
    }
  }
  EXPECT_GT(checked, 10);
}

TEST_F(Cli, EvalReportsEveryModelPerScene) {
  const Outcome r = run_cli("eval" + system_flags() + " --out ev");
  ASSERT_EQ(r.status, 0) << r.err;
  const auto metrics = metrics_from_json(nlohmann::json::parse(slurp(kRoot / "ev/metrics.json")));
  for (const char* model : {"rgb", "x", "adaptive"}) {
    for (const char* scene : {"day", "night", "fog", "all"}) {
      EXPECT_TRUE(find_metric(metrics, "mAP@0.5", scene, model)) << model << ' ' << scene;
    }
  }
  EXPECT_TRUE(find_metric(metrics, "top1", "all", "classifier"));
  const std::string table = slurp(kRoot / "ev/metrics.txt");
  EXPECT_EQ(r.out.substr(r.out.size() - table.size()), table);
}

TEST_F(Cli, InferIsDeterministic) {
  const Outcome a = run_cli("infer" + system_flags() + " --id 5 --score-threshold 0");
  const Outcome b = run_cli("infer" + system_flags() + " --id 5 --score-threshold 0");
  ASSERT_EQ(a.status, 0) << a.err;
  EXPECT_EQ(a.out, b.out);
  EXPECT_NE(a.out.find("routed_scene"), std::string::npos);
}

TEST_F(Cli, VizProfilesHaveTwiceTheFeatureChannels) {
  const Outcome r = run_cli("viz --data d --rgb-ckpt rgb.rxf --x-ckpt x.rxf --fusion f_fog.rxf --samples 1 --out viz");
  ASSERT_EQ(r.status, 0) << r.err;
  const int cf = load_detector(kRoot / "rgb.rxf").config.feature_channels;
  for (int level = 3; level <= 7; ++level) {
    std::ifstream is(kRoot / "viz" / ("profile_fog_P" + std::to_string(level) + ".txt"));
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line.rfind("# level=", 0), 0u);
    int rows = 0;
    while (std::getline(is, line)) {
      const double v = std::stod(line.substr(line.find(' ') + 1));
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      ++rows;
    }
    EXPECT_EQ(rows, 2 * cf);
  }
  int heatmaps = 0;
  for (const auto& e : fs::directory_iterator(kRoot / "viz")) heatmaps += e.path().filename().string().rfind("cam_", 0) == 0;
  EXPECT_EQ(heatmaps, 15);
}
