#pragma once

#include "rxf/container.hpp"
#include "rxf/train.hpp"

#include <filesystem>

namespace rxf {

// Model checkpoints are containers holding every parameter as f64 under its
// collect() name, plus metadata with "kind" in {detector, classifier, fusion}
// and whatever is needed to rebuild the module before the values are loaded.

nlohmann::json to_json(const DetectorConfig& c);
DetectorConfig detector_config_from_json(const nlohmann::json& j);

/// Adds every parameter of `params` as an f64 entry.
void add_parameters(Container& c, const ParameterList& params);
/// Overwrites `params` in place from same-named entries. Throws
/// std::runtime_error on a missing entry or a shape mismatch.
void load_parameters(const Container& c, ParameterList& params);

Container detector_checkpoint(const Detector& d, const nlohmann::json& run = {});
Detector detector_from_checkpoint(const Container& c);

Container classifier_checkpoint(const SceneClassifier& clf, const nlohmann::json& run = {});
SceneClassifier classifier_from_checkpoint(const Container& c);

/// Head tensors are stored only in HeadMode::kTrained.
Container fusion_checkpoint(const FusionModel& m, const DetectorConfig& config, const nlohmann::json& run = {});
FusionModel fusion_from_checkpoint(const Container& c);

void save_detector(const std::filesystem::path& p, const Detector& d, const nlohmann::json& run = {});
Detector load_detector(const std::filesystem::path& p);
void save_classifier(const std::filesystem::path& p, const SceneClassifier& clf, const nlohmann::json& run = {});
SceneClassifier load_classifier(const std::filesystem::path& p);
void save_fusion(const std::filesystem::path& p, const FusionModel& m, const DetectorConfig& config,
                 const nlohmann::json& run = {});
FusionModel load_fusion(const std::filesystem::path& p);

}  // namespace rxf
