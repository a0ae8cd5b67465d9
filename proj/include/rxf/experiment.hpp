#pragma once

#include "rxf/data.hpp"
#include "rxf/report.hpp"
#include "rxf/train.hpp"

#include "json.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace rxf {

/// Everything needed to re-create one experiment from scratch.
struct RunConfig {
  SplitSpec data;  // taxonomy, per-scene counts, data seed, image size
  DetectorConfig detector;
  int detector_epochs = 40;
  double detector_lr = 2e-3;
  int classifier_epochs = 50;
  double classifier_lr = 1e-3;
  int fusion_epochs = 50;
  double fusion_lr = 1e-3;
  int batch_size = 8;
  std::uint64_t seed = 42;
  HeadMode head_mode = HeadMode::kFrozenX;
  AttentionKind module = AttentionKind::kCbam;
  double fraction = 1.0;  // of each fusion training split
  bool warm_start = true; // scene banks start from the trained agnostic bank
  std::string excluded;   // scene left out of classifier and fusion training
};

nlohmann::ordered_json to_json(const RunConfig& c);
/// Missing keys keep their defaults; unknown keys and bad values throw
/// std::invalid_argument.
RunConfig run_config_from_json(const nlohmann::json& j);

/// Training options of one stage ("detector", "classifier", "fusion").
TrainOptions stage_options(const RunConfig& c, const std::string& stage, std::uint64_t salt = 0);

std::vector<SceneSample> load_samples(const Dataset& data, const std::vector<int>& ids);

/// Trains classifier, the agnostic bank and one bank per non-excluded scene
/// on top of the given branches, in that order. Fusion splits are subsampled
/// to `c.fraction`; `log` receives (stage name, epoch) pairs.
using StageLogger = std::function<void(const std::string& stage, const EpochLog&)>;
TrainedSystem train_system(const RunConfig& c, const Detector& rgb, const Detector& x, const Dataset& data,
                           const StageLogger& log = {});

/// Threads used for evaluation: RXF_THREADS if set and positive, else the
/// hardware concurrency, at least 1.
int eval_threads();

/// Runs fn(i) for i in [0, n) on up to `threads` threads. Results must be
/// written to per-index slots so the outcome does not depend on scheduling.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

/// Detections of every model on every sample, by model name:
/// "rgb", "x", "agnostic" (when trained) and "adaptive".
struct SystemDetections {
  std::vector<std::string> models;
  std::vector<std::vector<std::vector<Detection>>> detections;  // [model][sample]
  std::vector<std::string> routed;                              // adaptive scene per sample
};
SystemDetections detect_all(const TrainedSystem& system, const std::vector<SceneSample>& samples,
                            const NmsConfig& nms = {});

/// Detection metrics of every model plus classifier top-1, per scene of
/// `scenes` and overall.
std::vector<MetricRecord> evaluate_system(const TrainedSystem& system, const std::vector<SceneSample>& samples,
                                          const std::vector<std::string>& scenes, const NmsConfig& nms = {});

struct PipelineResult {
  TrainedSystem system;
  std::vector<MetricRecord> metrics;
};

/// Data generation, both branches, classifier, fusion banks and evaluation
/// on the test split. Writes under `out`:
///   config.json, data/, rgb.rxf, x.rxf, classifier.rxf,
///   fusion_<scene>.rxf, fusion_agnostic.rxf, logs/<stage>.csv,
///   metrics.json, metrics.txt
/// Progress messages go to `progress` when given.
PipelineResult run_pipeline(const RunConfig& c, const std::filesystem::path& out,
                            const std::function<void(const std::string&)>& progress = {});

/// Writes the per-epoch log as CSV with the header `epoch,loss,lr`.
void write_epoch_log(const std::filesystem::path& p, const std::vector<EpochLog>& log);

}  // namespace rxf
