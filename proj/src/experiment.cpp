#include "rxf/experiment.hpp"

#include "rxf/checkpoint.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <thread>

namespace rxf {

using nlohmann::json;
using nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

template <typename T>
T read_field(const json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw std::invalid_argument("config field '" + key + "' has the wrong type");
  }
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw std::invalid_argument("unknown " + where + " field '" + key + "'");
  }
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << text;
  if (!os) throw std::runtime_error("failed writing " + p.string());
}

}  // namespace

ordered_json to_json(const RunConfig& c) {
  ordered_json j;
  j["data"] = {{"scenes", c.data.scenes}, {"train", c.data.train}, {"val", c.data.val},
               {"test", c.data.test},     {"seed", c.data.seed},   {"image_size", c.data.image_size}};
  j["detector"] = to_json(c.detector);
  j["detector_epochs"] = c.detector_epochs;
  j["detector_lr"] = c.detector_lr;
  j["classifier_epochs"] = c.classifier_epochs;
  j["classifier_lr"] = c.classifier_lr;
  j["fusion_epochs"] = c.fusion_epochs;
  j["fusion_lr"] = c.fusion_lr;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["head"] = to_string(c.head_mode);
  j["module"] = to_string(c.module);
  j["fraction"] = c.fraction;
  j["warm_start"] = c.warm_start;
  j["excluded"] = c.excluded.empty() ? ordered_json(nullptr) : ordered_json(c.excluded);
  return j;
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  reject_unknown(j,
                 {"data", "detector", "detector_epochs", "detector_lr", "classifier_epochs", "classifier_lr",
                  "fusion_epochs", "fusion_lr", "batch_size", "seed", "head", "module", "fraction", "warm_start", "excluded"},
                 "config");
  RunConfig c;
  if (j.contains("data")) {
    const json& d = j.at("data");
    reject_unknown(d, {"scenes", "train", "val", "test", "seed", "image_size"}, "data");
    c.data.scenes = read_field(d, "scenes", c.data.scenes);
    c.data.train = read_field(d, "train", c.data.train);
    c.data.val = read_field(d, "val", c.data.val);
    c.data.test = read_field(d, "test", c.data.test);
    c.data.seed = read_field(d, "seed", c.data.seed);
    c.data.image_size = read_field(d, "image_size", c.data.image_size);
  }
  if (j.contains("detector")) {
    json merged = to_json(c.detector);
    reject_unknown(j.at("detector"), {"image_size", "feature_channels", "num_classes", "stage_widths", "anchor_scale"},
                   "detector");
    merged.update(j.at("detector"));
    c.detector = detector_config_from_json(merged);
  } else {
    c.detector.image_size = c.data.image_size;
  }
  c.detector_epochs = read_field(j, "detector_epochs", c.detector_epochs);
  c.detector_lr = read_field(j, "detector_lr", c.detector_lr);
  c.classifier_epochs = read_field(j, "classifier_epochs", c.classifier_epochs);
  c.classifier_lr = read_field(j, "classifier_lr", c.classifier_lr);
  c.fusion_epochs = read_field(j, "fusion_epochs", c.fusion_epochs);
  c.fusion_lr = read_field(j, "fusion_lr", c.fusion_lr);
  c.batch_size = read_field(j, "batch_size", c.batch_size);
  c.seed = read_field(j, "seed", c.seed);
  c.head_mode = parse_head_mode(read_field<std::string>(j, "head", to_string(c.head_mode)));
  c.module = parse_attention_kind(read_field<std::string>(j, "module", to_string(c.module)));
  c.fraction = read_field(j, "fraction", c.fraction);
  c.warm_start = read_field(j, "warm_start", c.warm_start);
  if (j.contains("excluded") && !j.at("excluded").is_null()) c.excluded = read_field<std::string>(j, "excluded", "");

  if (c.detector.image_size != c.data.image_size) {
    throw std::invalid_argument("detector image_size differs from data image_size");
  }
  if (c.data.scenes.empty()) throw std::invalid_argument("taxonomy is empty");
  if (c.detector_epochs < 0 || c.classifier_epochs < 0 || c.fusion_epochs < 0) {
    throw std::invalid_argument("epoch counts must be non-negative");
  }
  if (c.detector_lr < 0 || c.classifier_lr < 0 || c.fusion_lr < 0) {
    throw std::invalid_argument("learning rates must be non-negative");
  }
  if (c.batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  if (!(c.fraction > 0.0 && c.fraction <= 1.0)) throw std::invalid_argument("fraction must lie in (0, 1]");
  if (!c.excluded.empty() &&
      std::find(c.data.scenes.begin(), c.data.scenes.end(), c.excluded) == c.data.scenes.end()) {
    throw std::invalid_argument("excluded scene '" + c.excluded + "' is not in the taxonomy");
  }
  return c;
}

TrainOptions stage_options(const RunConfig& c, const std::string& stage, std::uint64_t salt) {
  TrainOptions o;
  o.batch_size = c.batch_size;
  if (stage == "detector") {
    o.epochs = c.detector_epochs;
    o.adam.lr = c.detector_lr;
    o.seed = c.seed;
  } else if (stage == "classifier") {
    o.epochs = c.classifier_epochs;
    o.adam.lr = c.classifier_lr;
    o.seed = mix_seed(c.seed, 100);
    o.flip = false;
  } else if (stage == "fusion") {
    o.epochs = c.fusion_epochs;
    o.adam.lr = c.fusion_lr;
    o.seed = mix_seed(c.seed, 200 + salt);
    o.flip = false;
  } else {
    throw std::invalid_argument("unknown training stage '" + stage + "'");
  }
  return o;
}

std::vector<SceneSample> load_samples(const Dataset& data, const std::vector<int>& ids) {
  std::vector<SceneSample> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(data.load_sample(id));
  return out;
}

TrainedSystem train_system(const RunConfig& c, const Detector& rgb, const Detector& x, const Dataset& data,
                           const StageLogger& log) {
  std::vector<std::string> taxonomy;
  for (const auto& s : data.scenes) {
    if (s != c.excluded) taxonomy.push_back(s);
  }
  if (taxonomy.empty()) throw std::invalid_argument("no scene left to train on");

  std::vector<int> all_ids;
  for (const auto& s : taxonomy) {
    const auto ids = data.split_ids("train", s);
    all_ids.insert(all_ids.end(), ids.begin(), ids.end());
  }
  std::sort(all_ids.begin(), all_ids.end());
  const std::vector<SceneSample> train = load_samples(data, all_ids);
  std::map<int, const SceneSample*> by_id;
  for (const auto& s : train) by_id[s.id] = &s;
  auto pick = [&](const std::vector<int>& ids) {
    std::vector<SceneSample> out;
    for (int id : ids) out.push_back(*by_id.at(id));
    return out;
  };
  auto with_log = [&](TrainOptions o, const std::string& stage) {
    if (log) o.on_epoch = [&log, stage](const EpochLog& e) { log(stage, e); };
    return o;
  };

  TrainedSystem sys{rgb, x, {}, {}, std::nullopt};
  sys.classifier = train_classifier(rgb, train, taxonomy, with_log(stage_options(c, "classifier"), "classifier"));

  auto fusion = [&](const std::string& scene, const std::vector<int>& ids, std::uint64_t salt,
                    const FusionModel* warm) {
    const std::vector<int> used = c.fraction < 1.0 ? subsample(data, ids, c.fraction, mix_seed(c.seed, 300 + salt))
                                                   : ids;
    FusionOptions fo;
    fo.scene = scene;
    fo.kind = c.module;
    fo.head_mode = c.head_mode;
    fo.train = with_log(stage_options(c, "fusion", salt), "fusion_" + scene);
    fo.warm_start = warm;
    FusionModel m = train_fusion(rgb, x, pick(used), fo);
    m.fraction = c.fraction;
    return m;
  };
  sys.agnostic = fusion("agnostic", all_ids, 0, nullptr);
  for (std::size_t i = 0; i < taxonomy.size(); ++i) {
    sys.banks[taxonomy[i]] =
        fusion(taxonomy[i], data.split_ids("train", taxonomy[i]), i + 1, c.warm_start ? &*sys.agnostic : nullptr);
  }
  return sys;
}

int eval_threads() {
  if (const char* env = std::getenv("RXF_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (int i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

SystemDetections detect_all(const TrainedSystem& system, const std::vector<SceneSample>& samples,
                            const NmsConfig& nms) {
  SystemDetections out;
  out.models = {"rgb", "x"};
  if (system.agnostic) out.models.push_back("agnostic");
  out.models.push_back("adaptive");
  const int n = static_cast<int>(samples.size());
  out.detections.assign(out.models.size(), std::vector<std::vector<Detection>>(n));
  out.routed.resize(n);
  parallel_for(n, eval_threads(), [&](int i) {
    const SceneSample& s = samples[i];
    std::size_t m = 0;
    out.detections[m++][i] = detect_single(s.rgb, system.rgb, nms)[0];
    out.detections[m++][i] = detect_single(s.x, system.x, nms)[0];
    if (system.agnostic) {
      const FusionModel& a = *system.agnostic;
      out.detections[m++][i] =
          detect_fused(s.rgb, s.x, system.rgb, system.x, a.bank, head_for(a, system.rgb, system.x), nms)[0];
    }
    AdaptiveDetections adaptive = detect_scene_adaptive(s.rgb, s.x, system, nms);
    out.detections[m][i] = std::move(adaptive.detections);
    out.routed[i] = adaptive.scene;
  });
  return out;
}

std::vector<MetricRecord> evaluate_system(const TrainedSystem& system, const std::vector<SceneSample>& samples,
                                          const std::vector<std::string>& scenes, const NmsConfig& nms) {
  const SystemDetections d = detect_all(system, samples, nms);
  std::vector<MetricRecord> out;
  for (std::size_t m = 0; m < d.models.size(); ++m) {
    std::vector<EvalImage> images;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      images.push_back({samples[i].scene, samples[i].gts, d.detections[m][i]});
    }
    const auto r = detection_metrics(d.models[m], scenes, images, class_names(), system.rgb.config.image_size);
    out.insert(out.end(), r.begin(), r.end());
  }
  std::vector<std::string> truth;
  for (const auto& s : samples) truth.push_back(s.scene);
  const auto r = classifier_metrics(scenes, d.routed, truth);
  out.insert(out.end(), r.begin(), r.end());
  return out;
}

void write_epoch_log(const fs::path& p, const std::vector<EpochLog>& log) {
  std::string text = "epoch,loss,lr\n";
  char buf[96];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g\n", e.epoch, e.loss, e.lr);
    text += buf;
  }
  write_text(p, text);
}

PipelineResult run_pipeline(const RunConfig& c, const fs::path& out,
                            const std::function<void(const std::string&)>& progress) {
  auto say = [&](const std::string& msg) {
    if (progress) progress(msg);
  };
  fs::create_directories(out / "logs");
  const ordered_json run = to_json(c);
  write_text(out / "config.json", run.dump(2) + "\n");

  say("generating data");
  const Dataset data = generate_dataset(c.data, out / "data");

  std::map<std::string, std::vector<EpochLog>> logs;
  auto logger = [&](const std::string& stage, const EpochLog& e) {
    logs[stage].push_back(e);
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s epoch %d loss %.6f lr %.6g", stage.c_str(), e.epoch, e.loss, e.lr);
    say(buf);
  };
  auto stage_log = [&](const std::string& stage) {
    TrainOptions o = stage_options(c, "detector");
    o.on_epoch = [&logger, stage](const EpochLog& e) { logger(stage, e); };
    return o;
  };

  const std::vector<SceneSample> train = load_samples(data, data.split_ids("train"));
  say("training rgb detector");
  const Detector rgb = train_detector(train, Modality::kRgb, c.detector, stage_log("detector_rgb"));
  save_detector(out / "rgb.rxf", rgb, run);
  say("training x detector");
  const Detector x = train_detector(train, Modality::kX, c.detector, stage_log("detector_x"));
  save_detector(out / "x.rxf", x, run);

  say("training classifier and fusion banks");
  PipelineResult result{train_system(c, rgb, x, data, logger), {}};
  save_classifier(out / "classifier.rxf", result.system.classifier, run);
  for (const auto& [scene, m] : result.system.banks) save_fusion(out / ("fusion_" + scene + ".rxf"), m, c.detector, run);
  save_fusion(out / "fusion_agnostic.rxf", *result.system.agnostic, c.detector, run);
  for (const auto& [stage, log] : logs) write_epoch_log(out / "logs" / (stage + ".csv"), log);

  say("evaluating");
  const std::vector<SceneSample> test = load_samples(data, data.split_ids("test"));
  result.metrics = evaluate_system(result.system, test, data.scenes);
  write_text(out / "metrics.json", metrics_to_json(result.metrics).dump(2) + "\n");
  write_text(out / "metrics.txt", metrics_table(result.metrics));
  return result;
}

}  // namespace rxf
