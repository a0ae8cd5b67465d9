#include "rxf/checkpoint.hpp"

#include <stdexcept>

namespace rxf {

using nlohmann::json;

namespace {

void expect_kind(const Container& c, const std::string& kind) {
  const std::string got = c.metadata.value("kind", "");
  if (got != kind) {
    throw std::runtime_error("expected a " + kind + " checkpoint, found '" + (got.empty() ? "?" : got) + "'");
  }
}

template <typename Model, typename Fn>
Model load_with_path(const std::filesystem::path& p, Fn&& fn) {
  const Container c = load_container(p);
  try {
    return fn(c);
  } catch (const std::exception& e) {
    throw std::runtime_error(p.string() + ": " + e.what());
  }
}

}  // namespace

json to_json(const DetectorConfig& c) {
  return {{"image_size", c.image_size},
          {"feature_channels", c.feature_channels},
          {"num_classes", c.num_classes},
          {"stage_widths", c.stage_widths},
          {"anchor_scale", c.anchor_scale}};
}

DetectorConfig detector_config_from_json(const json& j) {
  DetectorConfig c;
  c.image_size = j.at("image_size").get<int>();
  c.feature_channels = j.at("feature_channels").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.stage_widths = j.at("stage_widths").get<std::array<int, 4>>();
  c.anchor_scale = j.at("anchor_scale").get<double>();
  return c;
}

void add_parameters(Container& c, const ParameterList& params) {
  for (const auto& p : params.items()) c.add(p.name, p.tensor);
}

void load_parameters(const Container& c, ParameterList& params) {
  for (auto& p : params.items()) {
    if (!c.contains(p.name)) throw std::runtime_error("checkpoint lacks tensor '" + p.name + "'");
    const Tensor& src = c.get(p.name);
    if (src.shape() != p.tensor.shape()) {
      throw std::runtime_error("tensor '" + p.name + "' has shape " + to_string(src.shape()) + ", expected " +
                               to_string(p.tensor.shape()));
    }
    p.tensor.values() = src.values();
  }
}

Container detector_checkpoint(const Detector& d, const json& run) {
  Container c;
  add_parameters(c, d.parameters());
  c.metadata = {{"kind", "detector"}, {"modality", to_string(d.modality)}, {"config", to_json(d.config)}};
  if (!run.is_null()) c.metadata["run"] = run;
  return c;
}

Detector detector_from_checkpoint(const Container& c) {
  expect_kind(c, "detector");
  Detector d(parse_modality(c.metadata.at("modality").get<std::string>()),
             detector_config_from_json(c.metadata.at("config")), 0);
  ParameterList params = d.parameters();
  load_parameters(c, params);
  return d;
}

Container classifier_checkpoint(const SceneClassifier& clf, const json& run) {
  Container c;
  add_parameters(c, clf.parameters());
  c.metadata = {{"kind", "classifier"}, {"taxonomy", clf.taxonomy}, {"feature_dim", clf.fc.weight.dim(1)}};
  if (!run.is_null()) c.metadata["run"] = run;
  return c;
}

SceneClassifier classifier_from_checkpoint(const Container& c) {
  expect_kind(c, "classifier");
  SceneClassifier clf(c.metadata.at("taxonomy").get<std::vector<std::string>>(),
                      c.metadata.at("feature_dim").get<int>(), 0);
  ParameterList params = clf.parameters();
  load_parameters(c, params);
  return clf;
}

Container fusion_checkpoint(const FusionModel& m, const DetectorConfig& config, const json& run) {
  Container c;
  add_parameters(c, m.bank.parameters());
  if (m.head_mode == HeadMode::kTrained) {
    ParameterList head;
    m.head.collect(head, "head");
    add_parameters(c, head);
  }
  c.metadata = {{"kind", "fusion"},
                {"scene", m.scene},
                {"module", to_string(m.kind)},
                {"head", to_string(m.head_mode)},
                {"fraction", m.fraction},
                {"config", to_json(config)}};
  if (!run.is_null()) c.metadata["run"] = run;
  return c;
}

FusionModel fusion_from_checkpoint(const Container& c) {
  expect_kind(c, "fusion");
  const DetectorConfig config = detector_config_from_json(c.metadata.at("config"));
  FusionModel m;
  m.scene = c.metadata.at("scene").get<std::string>();
  m.kind = parse_attention_kind(c.metadata.at("module").get<std::string>());
  m.head_mode = parse_head_mode(c.metadata.at("head").get<std::string>());
  m.fraction = c.metadata.at("fraction").get<double>();
  m.bank = FusionBank(m.scene, config.feature_channels, m.kind, 0);
  ParameterList params = m.bank.parameters();
  if (m.head_mode == HeadMode::kTrained) {
    Rng rng(0);
    m.head = DetectorHead(config.feature_channels, config.num_classes, rng);
    m.head.collect(params, "head");
  }
  load_parameters(c, params);
  return m;
}

void save_detector(const std::filesystem::path& p, const Detector& d, const json& run) {
  save_container(p, detector_checkpoint(d, run));
}

Detector load_detector(const std::filesystem::path& p) {
  return load_with_path<Detector>(p, detector_from_checkpoint);
}

void save_classifier(const std::filesystem::path& p, const SceneClassifier& clf, const json& run) {
  save_container(p, classifier_checkpoint(clf, run));
}

SceneClassifier load_classifier(const std::filesystem::path& p) {
  return load_with_path<SceneClassifier>(p, classifier_from_checkpoint);
}

void save_fusion(const std::filesystem::path& p, const FusionModel& m, const DetectorConfig& config,
                 const json& run) {
  save_container(p, fusion_checkpoint(m, config, run));
}

FusionModel load_fusion(const std::filesystem::path& p) {
  return load_with_path<FusionModel>(p, fusion_from_checkpoint);
}

}  // namespace rxf
