#pragma once

#include "rxf/data.hpp"
#include "rxf/detector.hpp"
#include "rxf/fusion.hpp"
#include "rxf/optim.hpp"

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace rxf {

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainOptions {
  int epochs = 50;
  int batch_size = 8;
  std::uint64_t seed = 0;
  AdamOptions adam;
  /// Random horizontal flips (detector pretraining only).
  bool flip = true;
  std::function<void(const EpochLog&)> on_epoch;
};

/// Stacks [C,H,W] images of the given samples into [B,C,H,W].
Tensor stack_images(const std::vector<const SceneSample*>& samples, Modality m);

/// Pretrains one branch end to end on the samples. Initialization is seeded
/// from options.seed and the modality. Throws on a non-finite loss.
Detector train_detector(const std::vector<SceneSample>& samples, Modality modality,
                        const DetectorConfig& config, const TrainOptions& options,
                        std::vector<EpochLog>* log = nullptr);

/// Linear scene classifier over globally averaged deepest RGB stage features.
struct SceneClassifier {
  std::vector<std::string> taxonomy;
  Linear fc;  // [S, Cdeep]

  SceneClassifier() = default;
  SceneClassifier(std::vector<std::string> taxonomy, int feature_dim, std::uint64_t seed);
  int num_scenes() const { return static_cast<int>(taxonomy.size()); }
  void collect(ParameterList& out, const std::string& prefix = "fc") const;
  ParameterList parameters() const;
};

/// Global average of the deepest stage: [B, Cdeep].
Tensor scene_features(const std::vector<Tensor>& stages);

/// Softmax probabilities, one row per image.
Tensor classify_features(const Tensor& features, const SceneClassifier& classifier);
std::vector<double> classify_scene(const Tensor& rgb_image, const Detector& rgb,
                                   const SceneClassifier& classifier);

/// Trains only the classifier; the RGB branch is read without gradients.
/// Throws on an empty split or a scene outside the taxonomy.
SceneClassifier train_classifier(const Detector& rgb, const std::vector<SceneSample>& samples,
                                 const std::vector<std::string>& taxonomy, const TrainOptions& options,
                                 std::vector<EpochLog>* log = nullptr);

/// A trained fusion bank together with the head it feeds.
struct FusionModel {
  std::string scene;  // taxonomy label or "agnostic"
  AttentionKind kind = AttentionKind::kCbam;
  HeadMode head_mode = HeadMode::kFrozenX;
  double fraction = 1.0;
  FusionBank bank;
  DetectorHead head;  // only used with HeadMode::kTrained
};

const DetectorHead& head_for(const FusionModel& model, const Detector& rgb, const Detector& x);

struct FusionOptions {
  std::string scene = "agnostic";
  AttentionKind kind = AttentionKind::kCbam;
  HeadMode head_mode = HeadMode::kFrozenX;
  TrainOptions train;
  /// Copy the bank (and a trained head) from this model instead of a fresh
  /// initialization. Kind and head mode must match.
  const FusionModel* warm_start = nullptr;
};

/// Trains the five fusion modules (plus the head in HeadMode::kTrained) on
/// features of the frozen branches. Branch weights are never modified.
FusionModel train_fusion(const Detector& rgb, const Detector& x, const std::vector<SceneSample>& samples,
                         const FusionOptions& options, std::vector<EpochLog>* log = nullptr);

/// Argmax; ties go to the lowest index. Throws on an empty vector.
int route(const std::vector<double>& probabilities);

struct TrainedSystem {
  Detector rgb, x;
  SceneClassifier classifier;
  std::map<std::string, FusionModel> banks;  // one per classifier scene
  std::optional<FusionModel> agnostic;
};

struct AdaptiveDetections {
  std::vector<Detection> detections;
  std::string scene;
  std::vector<double> probabilities;
};

/// Classifies the RGB image, routes to that scene's bank and runs the fused
/// detector. The RGB backbone pass is shared by classifier and detector.
AdaptiveDetections detect_scene_adaptive(const Tensor& rgb_image, const Tensor& x_image,
                                         const TrainedSystem& system, const NmsConfig& nms = {});

/// Drops one scene's bank and retrains the classifier over the remaining
/// scenes on `samples` (samples of the excluded scene are skipped).
TrainedSystem train_excluding(const TrainedSystem& system, const std::string& excluded,
                              const std::vector<SceneSample>& samples, const TrainOptions& options);

}  // namespace rxf
