#include "rxf/checkpoint.hpp"
#include "rxf/experiment.hpp"
#include "rxf/random.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <fstream>
#include <sstream>

using namespace rxf;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("rxf_experiment_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void expect_same_parameters(const ParameterList& a, const ParameterList& b) {
  ASSERT_EQ(a.items().size(), b.items().size());
  for (std::size_t i = 0; i < a.items().size(); ++i) {
    EXPECT_EQ(a.items()[i].name, b.items()[i].name);
    EXPECT_TRUE((a.items()[i].tensor.values() == b.items()[i].tensor.values()).all()) << a.items()[i].name;
  }
}

RunConfig tiny() {
  RunConfig c;
  c.data.scenes = {"day", "night"};
  c.data.train = 3;
  c.data.val = 0;
  c.data.test = 2;
  c.detector_epochs = 1;
  c.classifier_epochs = 2;
  c.fusion_epochs = 1;
  c.batch_size = 4;
  return c;
}

}  // namespace

TEST(Checkpoint, DetectorRoundTripIsExact) {
  const Detector d(Modality::kX, {}, 9);
  const fs::path p = scratch("det.rxf");
  save_detector(p, d, {{"note", 1}});
  const Detector back = load_detector(p);
  EXPECT_EQ(back.modality, Modality::kX);
  expect_same_parameters(d.parameters(), back.parameters());
  fs::remove(p);
}

TEST(Checkpoint, FusionRoundTripKeepsHeadOnlyWhenTrained) {
  const DetectorConfig config;
  FusionModel m;
  m.scene = "night";
  m.kind = AttentionKind::kEca;
  m.fraction = 0.5;
  m.bank = FusionBank("night", config.feature_channels, m.kind, 3);
  Container c = fusion_checkpoint(m, config);
  for (const auto& e : c.entries) EXPECT_NE(e.name.rfind("head.", 0), 0u) << e.name;
  FusionModel back = fusion_from_checkpoint(decode_container(encode_container(c)));
  EXPECT_EQ(back.scene, "night");
  EXPECT_EQ(back.kind, AttentionKind::kEca);
  EXPECT_EQ(back.fraction, 0.5);
  expect_same_parameters(m.bank.parameters(), back.bank.parameters());

  Rng rng(5);
  m.head_mode = HeadMode::kTrained;
  m.head = DetectorHead(config.feature_channels, config.num_classes, rng);
  back = fusion_from_checkpoint(decode_container(encode_container(fusion_checkpoint(m, config))));
  ParameterList want, got;
  m.head.collect(want, "head");
  back.head.collect(got, "head");
  expect_same_parameters(want, got);
}

TEST(Checkpoint, WrongKindAndShapeAreRejected) {
  const Detector d(Modality::kRgb, {}, 1);
  const Container c = detector_checkpoint(d);
  EXPECT_THROW(classifier_from_checkpoint(c), std::runtime_error);
  Container bad = c;
  bad.metadata["config"]["feature_channels"] = 8;
  EXPECT_THROW(detector_from_checkpoint(bad), std::runtime_error);
  EXPECT_THROW(load_detector(scratch("missing.rxf")), std::runtime_error);
}

TEST(Report, MetricsJsonRoundTrip) {
  const std::vector<MetricRecord> records{{"mAP@0.5", "day", "all", "rgb", 0.25},
                                          {"AP@0.5", "fog", "rect", "x", std::nullopt},
                                          {"top1", "all", "all", "classifier", 97.5}};
  const auto j = metrics_to_json(records);
  EXPECT_EQ(j["version"], kMetricsVersion);
  EXPECT_TRUE(j["records"][1]["value"].is_null());
  EXPECT_EQ(metrics_from_json(nlohmann::json::parse(j.dump())), records);
  nlohmann::json other = nlohmann::json::parse(j.dump());
  other["version"] = 2;
  EXPECT_THROW(metrics_from_json(other), std::runtime_error);
  EXPECT_EQ(find_metric(records, "top1", "all", "classifier"), 97.5);
  EXPECT_FALSE(find_metric(records, "AP@0.5", "fog", "x", "rect"));
  const std::string table = metrics_table(records);
  EXPECT_NE(table.find("classifier"), std::string::npos);
  EXPECT_NE(table.find(" -"), std::string::npos);
}

TEST(Report, PerfectDetectionsScoreOne) {
  std::vector<EvalImage> images;
  for (int i = 0; i < 4; ++i) {
    EvalImage im;
    im.scene = i < 2 ? "day" : "night";
    im.gts = {{i % 2, {10.0 + i, 12, 60, 70}}, {1 - i % 2, {70, 70, 110, 120.0 - i}}};
    for (const auto& g : im.gts) im.detections.push_back({g.class_id, 0.9, g.box});
    images.push_back(im);
  }
  const auto r = detection_metrics("m", {"day", "night", "fog"}, images, class_names(), 128);
  EXPECT_EQ(find_metric(r, "mAP@0.5", "all", "m"), 1.0);
  EXPECT_EQ(find_metric(r, "mAP@0.5:0.95", "night", "m"), 1.0);
  EXPECT_EQ(find_metric(r, "AP@0.5", "day", "m", "ellipse"), 1.0);
  EXPECT_FALSE(find_metric(r, "mAP@0.5", "fog", "m"));
}

TEST(Report, DetectionsJsonRoundTripAndDiagnostics) {
  const std::vector<int> ids{4, 7};
  const std::vector<std::vector<Detection>> dets{{{1, 0.5, {1, 2, 11, 22}}}, {}};
  const auto j = detections_to_json(ids, dets);
  ASSERT_EQ(j.size(), 1u);
  EXPECT_EQ(j[0]["bbox"][2], 10.0);
  const auto back = detections_from_json(nlohmann::json::parse(j.dump()), ids, 2);
  EXPECT_EQ(back[0].size(), 1u);
  EXPECT_EQ(back[0][0].box, dets[0][0].box);
  EXPECT_TRUE(back[1].empty());
  nlohmann::json bad = nlohmann::json::parse(j.dump());
  bad[0]["category_id"] = 5;
  try {
    detections_from_json(bad, ids, 2);
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("detection 0"), std::string::npos);
  }
}

TEST(RunConfig, JsonRoundTripAndValidation) {
  RunConfig c = tiny();
  c.excluded = "night";
  c.fraction = 0.25;
  c.head_mode = HeadMode::kTrained;
  c.warm_start = false;
  const RunConfig back = run_config_from_json(nlohmann::json::parse(to_json(c).dump()));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
  EXPECT_THROW(run_config_from_json({{"epochs", 3}}), std::invalid_argument);
  EXPECT_THROW(run_config_from_json({{"fraction", 0.0}}), std::invalid_argument);
  EXPECT_THROW(run_config_from_json({{"excluded", "snow"}}), std::invalid_argument);
  EXPECT_THROW(run_config_from_json({{"head", "xx"}}), std::invalid_argument);
  EXPECT_FALSE(back.warm_start);
  EXPECT_THROW(run_config_from_json({{"warm_start", "yes"}}), std::invalid_argument);
  EXPECT_EQ(run_config_from_json(nlohmann::json::object()).seed, 42u);
}

TEST(Parallel, EveryIndexRunsOnce) {
  std::vector<std::atomic<int>> hits(37);
  parallel_for(37, 4, [&](int i) { hits[i]++; });
  for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
  EXPECT_THROW(parallel_for(5, 3, [](int i) {
                 if (i == 3) throw std::runtime_error("boom");
               }),
               std::runtime_error);
}

TEST(Pipeline, TinyRunIsReproducibleAndConsistent) {
  const fs::path a = scratch("run_a"), b = scratch("run_b");
  const RunConfig c = tiny();
  const PipelineResult ra = run_pipeline(c, a);
  run_pipeline(c, b);
  for (const char* f : {"config.json", "rgb.rxf", "x.rxf", "classifier.rxf", "fusion_day.rxf", "fusion_night.rxf",
                        "fusion_agnostic.rxf", "metrics.json", "metrics.txt", "logs/detector_rgb.csv",
                        "logs/classifier.csv"}) {
    ASSERT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  EXPECT_EQ(slurp(a / "logs/detector_rgb.csv").rfind("epoch,loss,lr\n", 0), 0u);
  EXPECT_EQ(metrics_from_json(nlohmann::json::parse(slurp(a / "metrics.json"))), ra.metrics);
  EXPECT_TRUE(find_metric(ra.metrics, "top1", "all", "classifier"));

  // The batched evaluation agrees with one-off adaptive inference.
  const Dataset data = load_dataset(a / "data");
  const auto test = load_samples(data, data.split_ids("test"));
  const SystemDetections d = detect_all(ra.system, test);
  ASSERT_EQ(d.models.back(), "adaptive");
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto one = detect_scene_adaptive(test[i].rgb, test[i].x, ra.system);
    EXPECT_EQ(d.routed[i], one.scene);
    ASSERT_EQ(d.detections.back()[i].size(), one.detections.size());
    for (std::size_t k = 0; k < one.detections.size(); ++k) {
      EXPECT_EQ(d.detections.back()[i][k].score, one.detections[k].score);
    }
  }

  // Checkpoints reload into the same system.
  const FusionModel night = load_fusion(a / "fusion_night.rxf");
  expect_same_parameters(night.bank.parameters(), ra.system.banks.at("night").bank.parameters());
  expect_same_parameters(load_classifier(a / "classifier.rxf").parameters(), ra.system.classifier.parameters());
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Pipeline, ExcludedSceneHasNoBankButIsEvaluated) {
  const fs::path a = scratch("run_ex");
  RunConfig c = tiny();
  c.data.scenes = {"day", "night", "fog"};
  c.excluded = "fog";
  c.fraction = 0.5;
  const PipelineResult r = run_pipeline(c, a);
  EXPECT_EQ(r.system.banks.count("fog"), 0u);
  EXPECT_FALSE(fs::exists(a / "fusion_fog.rxf"));
  EXPECT_EQ(r.system.classifier.taxonomy, (std::vector<std::string>{"day", "night"}));
  EXPECT_EQ(r.system.banks.at("day").fraction, 0.5);
  EXPECT_TRUE(find_metric(r.metrics, "mAP@0.5", "fog", "adaptive"));
  EXPECT_EQ(find_metric(r.metrics, "top1", "fog", "classifier"), 0.0);
  fs::remove_all(a);
}
