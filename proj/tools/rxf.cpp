// rxf: command-line workflow over the synthetic RGB + X benchmark.

#include "rxf/checkpoint.hpp"
#include "rxf/experiment.hpp"
#include "rxf/random.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

using namespace rxf;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Stable error codes, one per failure class.
enum class Code {
  kUsage = 1,
  kMissingFile = 2,
  kIo = 3,
  kBadArgument = 4,
  kBadCheckpoint = 5,
  kTaxonomy = 6,
  kTraining = 7,
  kInternal = 99,
};

struct CliError : std::runtime_error {
  Code code;
  CliError(Code c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

bool g_timestamps = true;

void say(const std::string& msg) {
  if (g_timestamps) {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::cout << std::put_time(&tm, "[%Y-%m-%dT%H:%M:%SZ] ");
  }
  std::cout << msg << std::endl;
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw CliError(Code::kMissingFile, what + " not found: " + p.string());
}

template <typename Fn>
auto checkpoint_or_fail(const fs::path& p, const std::string& what, Fn&& load) {
  require_file(p, what);
  try {
    return load(p);
  } catch (const std::exception& e) {
    throw CliError(Code::kBadCheckpoint, e.what());
  }
}

Dataset open_dataset(const fs::path& root) {
  require_file(root / "annotations.json", "dataset");
  try {
    return load_dataset(root);
  } catch (const std::exception& e) {
    throw CliError(Code::kIo, e.what());
  }
}

void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os << text;
  if (!os) throw CliError(Code::kIo, "cannot write " + p.string());
}

fs::path log_path_for(const fs::path& out) {
  fs::path p = out;
  p.replace_extension(".csv");
  return p;
}

TrainOptions with_progress(TrainOptions o, const std::string& stage) {
  o.on_epoch = [stage](const EpochLog& e) {
    std::ostringstream ss;
    ss << stage << " epoch " << e.epoch << " loss " << std::setprecision(6) << e.loss << " lr " << e.lr;
    say(ss.str());
  };
  return o;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Shared flags of the training commands.
struct Common {
  std::uint64_t seed = 42;
  int batch = 8;
};

RunConfig base_config(const Common& common, const Dataset& data) {
  RunConfig c;
  c.seed = common.seed;
  c.batch_size = common.batch;
  c.data.scenes = data.scenes;
  c.data.image_size = data.images.empty() ? c.data.image_size : data.images.front().width;
  c.detector.image_size = c.data.image_size;
  return c;
}

std::string format_detection(const Detection& d) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(4) << class_names().at(d.class_id) << ' ' << d.score << " [" << d.box.x0
     << ", " << d.box.y0 << ", " << d.box.x1 << ", " << d.box.y1 << "]";
  return ss.str();
}

struct SystemPaths {
  std::string rgb, x, classifier;
  std::vector<std::string> fusion;
};

void add_system_flags(CLI::App* cmd, SystemPaths& p, bool need_classifier) {
  cmd->add_option("--rgb-ckpt", p.rgb, "RGB detector checkpoint")->required();
  cmd->add_option("--x-ckpt", p.x, "X detector checkpoint")->required();
  auto* clf = cmd->add_option("--classifier", p.classifier, "scene classifier checkpoint");
  auto* fus = cmd->add_option("--fusion", p.fusion, "fusion checkpoints (one per scene, optionally agnostic)");
  if (need_classifier) {
    clf->required();
    fus->required();
  }
}

TrainedSystem load_system(const SystemPaths& p) {
  TrainedSystem sys;
  sys.rgb = checkpoint_or_fail(p.rgb, "RGB checkpoint", load_detector);
  sys.x = checkpoint_or_fail(p.x, "X checkpoint", load_detector);
  if (sys.rgb.modality != Modality::kRgb || sys.x.modality != Modality::kX) {
    throw CliError(Code::kBadCheckpoint, "--rgb-ckpt and --x-ckpt must hold an rgb and an x detector");
  }
  if (!p.classifier.empty()) sys.classifier = checkpoint_or_fail(p.classifier, "classifier", load_classifier);
  for (const auto& f : p.fusion) {
    FusionModel m = checkpoint_or_fail(f, "fusion checkpoint", load_fusion);
    if (m.scene == "agnostic") {
      sys.agnostic = std::move(m);
    } else {
      const std::string scene = m.scene;
      if (!sys.banks.emplace(scene, std::move(m)).second) {
        throw CliError(Code::kTaxonomy, "two fusion checkpoints for scene '" + scene + "'");
      }
    }
  }
  if (!p.classifier.empty()) {
    const std::set<std::string> want(sys.classifier.taxonomy.begin(), sys.classifier.taxonomy.end());
    std::set<std::string> have;
    for (const auto& [scene, m] : sys.banks) have.insert(scene);
    if (want != have) {
      std::string msg = "classifier taxonomy {";
      for (const auto& s : want) msg += " " + s;
      msg += " } does not match fusion banks {";
      for (const auto& s : have) msg += " " + s;
      throw CliError(Code::kTaxonomy, msg + " }");
    }
  }
  return sys;
}

// ---------------------------------------------------------------------------

void cmd_gen_data(const fs::path& out, std::uint64_t seed, const std::string& counts, const std::string& scenes,
                  int image_size) {
  SplitSpec spec;
  spec.seed = seed;
  spec.image_size = image_size;
  if (!scenes.empty()) spec.scenes = split_list(scenes);
  const auto parts = split_list(counts);
  if (parts.size() != 3) throw CliError(Code::kBadArgument, "--per-scene-counts expects train,val,test");
  try {
    spec.train = std::stoi(parts[0]);
    spec.val = std::stoi(parts[1]);
    spec.test = std::stoi(parts[2]);
  } catch (const std::exception&) {
    throw CliError(Code::kBadArgument, "--per-scene-counts expects three integers");
  }
  if (spec.train < 0 || spec.val < 0 || spec.test < 0) {
    throw CliError(Code::kBadArgument, "--per-scene-counts must be non-negative");
  }
  Dataset d;
  try {
    d = generate_dataset(spec, out);
  } catch (const std::invalid_argument& e) {
    throw CliError(Code::kBadArgument, e.what());
  } catch (const std::exception& e) {
    throw CliError(Code::kIo, e.what());
  }
  say("wrote " + std::to_string(d.images.size()) + " samples to " + out.string());
}

void cmd_train_detector(const Common& common, const std::string& modality, const fs::path& data_root, int epochs,
                        double lr, const fs::path& out) {
  const Dataset data = open_dataset(data_root);
  RunConfig c = base_config(common, data);
  c.detector_epochs = epochs;
  c.detector_lr = lr;
  const Modality m = parse_modality(modality);
  const auto train = load_samples(data, data.split_ids("train"));
  std::vector<EpochLog> log;
  const Detector d =
      train_detector(train, m, c.detector, with_progress(stage_options(c, "detector"), "detector_" + modality), &log);
  save_detector(out, d, to_json(c));
  write_epoch_log(log_path_for(out), log);
  say("saved " + out.string());
}

void cmd_train_classifier(const Common& common, const fs::path& data_root, const std::string& rgb_path, int epochs,
                          double lr, const std::string& excluded, const fs::path& out) {
  const Dataset data = open_dataset(data_root);
  RunConfig c = base_config(common, data);
  c.classifier_epochs = epochs;
  c.classifier_lr = lr;
  c.excluded = excluded;
  if (!excluded.empty() && data.scene_index(excluded) < 0) {
    throw CliError(Code::kBadArgument, "excluded scene '" + excluded + "' is not in the dataset");
  }
  const Detector rgb = checkpoint_or_fail(rgb_path, "RGB checkpoint", load_detector);
  std::vector<std::string> taxonomy;
  std::vector<int> ids;
  for (const auto& s : data.scenes) {
    if (s == excluded) continue;
    taxonomy.push_back(s);
    const auto part = data.split_ids("train", s);
    ids.insert(ids.end(), part.begin(), part.end());
  }
  std::sort(ids.begin(), ids.end());
  std::vector<EpochLog> log;
  const SceneClassifier clf = train_classifier(rgb, load_samples(data, ids), taxonomy,
                                               with_progress(stage_options(c, "classifier"), "classifier"), &log);
  save_classifier(out, clf, to_json(c));
  write_epoch_log(log_path_for(out), log);
  say("saved " + out.string());
}

void cmd_train_fusion(const Common& common, const fs::path& data_root, const std::string& rgb_path,
                      const std::string& x_path, const std::string& scene, double percent, const std::string& head,
                      const std::string& module, int epochs, double lr, const std::string& excluded,
                      const std::string& warm_path, const fs::path& out) {
  if (!(percent > 0.0 && percent <= 100.0)) throw CliError(Code::kBadArgument, "--fraction must lie in (0, 100]");
  const Dataset data = open_dataset(data_root);
  RunConfig c = base_config(common, data);
  c.fusion_epochs = epochs;
  c.fusion_lr = lr;
  c.fraction = percent / 100.0;
  c.head_mode = parse_head_mode(head);
  c.module = parse_attention_kind(module);
  c.excluded = excluded;
  c.warm_start = !warm_path.empty();
  const Detector rgb = checkpoint_or_fail(rgb_path, "RGB checkpoint", load_detector);
  const Detector x = checkpoint_or_fail(x_path, "X checkpoint", load_detector);
  std::optional<FusionModel> warm;
  if (c.warm_start) {
    warm = checkpoint_or_fail(warm_path, "warm-start checkpoint", load_fusion);
    if (warm->kind != c.module || warm->head_mode != c.head_mode) {
      throw CliError(Code::kBadArgument, "warm-start checkpoint has a different module or head mode");
    }
  }

  // Salts match train_system: 0 for agnostic, 1 + taxonomy position otherwise.
  std::vector<int> ids;
  std::uint64_t salt = 0;
  if (scene == "agnostic") {
    for (const auto& s : data.scenes) {
      if (s == excluded) continue;
      const auto part = data.split_ids("train", s);
      ids.insert(ids.end(), part.begin(), part.end());
    }
    std::sort(ids.begin(), ids.end());
  } else {
    if (data.scene_index(scene) < 0) throw CliError(Code::kBadArgument, "unknown scene '" + scene + "'");
    if (scene == excluded) throw CliError(Code::kBadArgument, "cannot train the excluded scene");
    std::uint64_t position = 0;
    for (const auto& s : data.scenes) {
      if (s == excluded) continue;
      ++position;
      if (s == scene) salt = position;
    }
    ids = data.split_ids("train", scene);
  }
  if (c.fraction < 1.0) ids = subsample(data, ids, c.fraction, mix_seed(c.seed, 300 + salt));

  FusionOptions fo;
  fo.scene = scene;
  fo.kind = c.module;
  fo.head_mode = c.head_mode;
  fo.train = with_progress(stage_options(c, "fusion", salt), "fusion_" + scene);
  if (warm) fo.warm_start = &*warm;
  std::vector<EpochLog> log;
  FusionModel m = train_fusion(rgb, x, load_samples(data, ids), fo, &log);
  m.fraction = c.fraction;
  save_fusion(out, m, rgb.config, to_json(c));
  write_epoch_log(log_path_for(out), log);

  const ParamCounts bank = param_count(m.bank);
  std::int64_t trainable = bank.trainable, total = bank.total;
  ParameterList head_list;
  head_for(m, rgb, x).collect(head_list, "head");
  const std::int64_t head_params = param_count(head_list).total;
  if (c.head_mode == HeadMode::kTrained) trainable += head_params;
  total += head_params + param_count(rgb.parameters()).total + param_count(x.parameters()).total -
           2 * head_params;  // the branch heads are replaced by the fusion head
  std::ostringstream ss;
  ss << "samples " << ids.size() << " trainable " << trainable << " total " << total << " trainable_fraction "
     << std::setprecision(6) << double(trainable) / double(total);
  say(ss.str());
  say("saved " + out.string());
}

void cmd_eval(const SystemPaths& paths, const fs::path& data_root, const std::string& split,
              const std::string& detections_file, const std::string& model_name, const fs::path& out) {
  const Dataset data = open_dataset(data_root);
  const std::vector<int> ids = data.split_ids(split);
  std::vector<MetricRecord> metrics;
  if (!detections_file.empty()) {
    require_file(detections_file, "detections file");
    std::ifstream is(detections_file);
    json j;
    try {
      j = json::parse(is);
    } catch (const json::exception& e) {
      throw CliError(Code::kIo, detections_file + ": " + e.what());
    }
    std::vector<std::vector<Detection>> dets;
    try {
      dets = detections_from_json(j, ids, static_cast<int>(class_names().size()));
    } catch (const std::exception& e) {
      throw CliError(Code::kBadArgument, detections_file + ": " + e.what());
    }
    std::vector<EvalImage> images;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const ImageRecord& r = data.image(ids[i]);
      images.push_back({r.scene, r.gts, dets[i]});
    }
    const int size = data.images.empty() ? 128 : data.images.front().width;
    metrics = detection_metrics(model_name, data.scenes, images, class_names(), size);
  } else {
    if (paths.rgb.empty() || paths.x.empty() || paths.classifier.empty() || paths.fusion.empty()) {
      throw CliError(Code::kBadArgument,
                     "eval needs --rgb-ckpt, --x-ckpt, --classifier and --fusion, or --detections");
    }
    const TrainedSystem sys = load_system(paths);
    say("evaluating " + std::to_string(ids.size()) + " images on " + std::to_string(eval_threads()) + " threads");
    metrics = evaluate_system(sys, load_samples(data, ids), data.scenes);
  }
  fs::create_directories(out);
  write_file(out / "metrics.json", metrics_to_json(metrics).dump(2) + "\n");
  const std::string table = metrics_table(metrics);
  write_file(out / "metrics.txt", table);
  std::cout << table;
}

void cmd_infer(const SystemPaths& paths, const fs::path& data_root, int id, double score_threshold) {
  const Dataset data = open_dataset(data_root);
  if (id < 0 || id >= static_cast<int>(data.images.size())) {
    throw CliError(Code::kBadArgument, "no image with id " + std::to_string(id));
  }
  const TrainedSystem sys = load_system(paths);
  const SceneSample s = data.load_sample(id);
  NmsConfig nms;
  nms.score_threshold = score_threshold;
  const AdaptiveDetections out = detect_scene_adaptive(s.rgb, s.x, sys, nms);
  std::cout << "image " << id << " true_scene " << s.scene << " routed_scene " << out.scene << '\n';
  std::cout << "probabilities";
  for (std::size_t k = 0; k < out.probabilities.size(); ++k) {
    std::cout << ' ' << sys.classifier.taxonomy[k] << '=' << std::fixed << std::setprecision(4)
              << out.probabilities[k];
  }
  std::cout << '\n' << "detections " << out.detections.size() << '\n';
  for (const auto& d : out.detections) std::cout << format_detection(d) << '\n';
  std::cout << std::flush;
}

void cmd_viz(const fs::path& data_root, const std::string& rgb_path, const std::string& x_path,
             const std::string& fusion_path, const std::string& split, int samples, std::uint64_t seed,
             const fs::path& out) {
  const Dataset data = open_dataset(data_root);
  const Detector rgb = checkpoint_or_fail(rgb_path, "RGB checkpoint", load_detector);
  const Detector x = checkpoint_or_fail(x_path, "X checkpoint", load_detector);
  const FusionModel m = checkpoint_or_fail(fusion_path, "fusion checkpoint", load_fusion);
  // A scene bank is profiled on its own scene, the agnostic bank on all.
  const std::vector<int> ids = data.split_ids(split, m.scene == "agnostic" ? "" : m.scene);
  if (ids.empty()) throw CliError(Code::kBadArgument, "no " + split + " images for scene " + m.scene);

  NoGradGuard guard;
  std::vector<Pyramid> rp, xp;
  for (int id : ids) {
    const SceneSample s = data.load_sample(id);
    rp.push_back(rgb.pyramid(as_batch(s.rgb)));
    xp.push_back(x.pyramid(as_batch(s.x)));
  }
  fs::create_directories(out);
  for (int level = 0; level < kPyramidLevels; ++level) {
    const std::string tag = "P" + std::to_string(level + 3);
    std::vector<std::pair<Tensor, Tensor>> slice;
    for (std::size_t i = 0; i < ids.size(); ++i) slice.emplace_back(rp[i][level], xp[i][level]);
    std::ostringstream prof;
    write_profile(prof, export_channel_attention(m.bank, level, slice));
    write_file(out / ("profile_" + m.scene + "_" + tag + ".txt"), prof.str());
  }
  const int n = std::min<int>(samples, static_cast<int>(ids.size()));
  for (int i = 0; i < n; ++i) {
    const Pyramid fused = fuse_pyramids(rp[i], xp[i], m.bank);
    for (int level = 0; level < kPyramidLevels; ++level) {
      const std::string tag = "P" + std::to_string(level + 3);
      const std::pair<const char*, const Tensor*> maps[] = {
          {"rgb", &rp[i][level]}, {"x", &xp[i][level]}, {"fused", &fused[level]}};
      for (const auto& [name, act] : maps) {
        std::ostringstream os;
        write_heatmap(os, cam_heatmap(*act, seed), level, m.scene, act->dim(1));
        write_file(out / ("cam_" + std::to_string(ids[i]) + "_" + tag + "_" + name + ".txt"), os.str());
      }
    }
  }
  say("wrote " + std::to_string(kPyramidLevels) + " profiles and " + std::to_string(n * kPyramidLevels * 3) +
      " heatmaps to " + out.string());
}

void cmd_pipeline(const std::string& config_path, std::optional<std::uint64_t> seed, const fs::path& out) {
  RunConfig c;
  if (!config_path.empty()) {
    require_file(config_path, "config");
    std::ifstream is(config_path);
    try {
      c = run_config_from_json(json::parse(is));
    } catch (const json::exception& e) {
      throw CliError(Code::kIo, config_path + ": " + e.what());
    }
  }
  if (seed) c.seed = *seed;
  const PipelineResult r = run_pipeline(c, out, say);
  std::cout << metrics_table(r.metrics);
}

int fail(Code code, const std::string& msg) {
  std::cerr << 'E' << std::setw(3) << std::setfill('0') << static_cast<int>(code) << ": " << msg << std::endl;
  return static_cast<int>(code);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rxf: scene-adaptive RGB + X fusion detector"};
  app.require_subcommand(1);
  bool no_timestamps = false;
  app.add_flag("--no-timestamps", no_timestamps, "omit the timestamp prefix of progress lines");
  Common common;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--seed", common.seed, "random seed")->capture_default_str();
    cmd->add_option("--batch", common.batch, "batch size")->capture_default_str()->check(CLI::PositiveNumber);
    cmd->add_flag("--no-timestamps", no_timestamps, "omit the timestamp prefix of progress lines");
  };

  std::string out, data, modality, rgb_ckpt, x_ckpt, scene = "agnostic", head = "th", module = "cbam", excluded;
  std::string counts = "200,50,50", scenes, split = "test", detections, model_name = "detections", config, warm_ckpt;
  const RunConfig defaults;
  int det_epochs = defaults.detector_epochs, clf_epochs = defaults.classifier_epochs,
      fus_epochs = defaults.fusion_epochs;
  double det_lr = defaults.detector_lr, clf_lr = defaults.classifier_lr, fus_lr = defaults.fusion_lr;
  int image_size = 128, id = 0, samples = 4;
  double fraction = 100, score_threshold = 0.05;
  std::optional<std::uint64_t> pipeline_seed;
  SystemPaths paths;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  add_common(gen);
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--per-scene-counts", counts, "train,val,test per scene")->capture_default_str();
  gen->add_option("--scenes", scenes, "comma-separated taxonomy (default day,night,fog)");
  gen->add_option("--image-size", image_size, "image side in pixels")->capture_default_str();

  auto* tdet = app.add_subcommand("train-detector", "pretrain one single-modality detector");
  add_common(tdet);
  tdet->add_option("--modality", modality, "rgb or x")->required()->check(CLI::IsMember({"rgb", "x"}));
  tdet->add_option("--data", data, "dataset directory")->required();
  tdet->add_option("--epochs", det_epochs, "epochs")->capture_default_str();
  tdet->add_option("--lr", det_lr, "learning rate")->capture_default_str();
  tdet->add_option("--out", out, "checkpoint path; the loss log goes next to it as .csv")->required();

  auto* tclf = app.add_subcommand("train-classifier", "train the scene classifier on the RGB branch");
  add_common(tclf);
  tclf->add_option("--data", data, "dataset directory")->required();
  tclf->add_option("--rgb-ckpt", rgb_ckpt, "RGB detector checkpoint")->required();
  tclf->add_option("--epochs", clf_epochs, "epochs")->capture_default_str();
  tclf->add_option("--lr", clf_lr, "learning rate")->capture_default_str();
  tclf->add_option("--exclude", excluded, "scene left out of the taxonomy");
  tclf->add_option("--out", out, "checkpoint path")->required();

  auto* tfus = app.add_subcommand("train-fusion", "train one fusion bank on frozen branches");
  add_common(tfus);
  tfus->add_option("--data", data, "dataset directory")->required();
  tfus->add_option("--rgb-ckpt", rgb_ckpt, "RGB detector checkpoint")->required();
  tfus->add_option("--x-ckpt", x_ckpt, "X detector checkpoint")->required();
  tfus->add_option("--scene", scene, "scene name or agnostic")->capture_default_str();
  tfus->add_option("--fraction", fraction, "percent of the training split")->capture_default_str();
  tfus->add_option("--head", head, "tr, rh or th")->capture_default_str()->check(CLI::IsMember({"tr", "rh", "th"}));
  tfus->add_option("--module", module, "cbam or eca")->capture_default_str()->check(CLI::IsMember({"cbam", "eca"}));
  tfus->add_option("--epochs", fus_epochs, "epochs")->capture_default_str();
  tfus->add_option("--lr", fus_lr, "learning rate")->capture_default_str();
  tfus->add_option("--exclude", excluded, "scene left out of agnostic training");
  tfus->add_option("--warm-start", warm_ckpt, "fusion checkpoint to start from, usually the agnostic bank");
  tfus->add_option("--out", out, "checkpoint path")->required();

  auto* eval = app.add_subcommand("eval", "evaluate all models, or a detections file");
  eval->add_flag("--no-timestamps", no_timestamps, "omit the timestamp prefix of progress lines");
  eval->add_option("--data", data, "dataset directory")->required();
  add_system_flags(eval, paths, false);
  for (auto* o : {eval->get_option("--rgb-ckpt"), eval->get_option("--x-ckpt")}) o->required(false);
  eval->add_option("--split", split, "train, val or test")->capture_default_str();
  eval->add_option("--detections", detections, "COCO-style results file to score instead of models");
  eval->add_option("--model-name", model_name, "model label for --detections")->capture_default_str();
  eval->add_option("--out", out, "output directory for metrics.json and metrics.txt")->required();

  auto* infer = app.add_subcommand("infer", "scene-adaptive detection of one sample pair");
  infer->add_option("--data", data, "dataset directory")->required();
  add_system_flags(infer, paths, true);
  infer->add_option("--id", id, "image id")->required();
  infer->add_option("--score-threshold", score_threshold, "minimum detection score")->capture_default_str();

  auto* viz = app.add_subcommand("viz", "channel-attention profiles and CAM heatmaps");
  add_common(viz);
  viz->add_option("--data", data, "dataset directory")->required();
  viz->add_option("--rgb-ckpt", rgb_ckpt, "RGB detector checkpoint")->required();
  viz->add_option("--x-ckpt", x_ckpt, "X detector checkpoint")->required();
  viz->add_option("--fusion", config, "fusion checkpoint")->required();
  viz->add_option("--split", split, "train, val or test")->capture_default_str();
  viz->add_option("--samples", samples, "images to draw heatmaps for")->capture_default_str();
  viz->add_option("--out", out, "output directory")->required();

  auto* pipe = app.add_subcommand("pipeline", "data, training and evaluation end to end");
  pipe->add_flag("--no-timestamps", no_timestamps, "omit the timestamp prefix of progress lines");
  pipe->add_option("--config", config, "run config JSON (defaults otherwise)");
  pipe->add_option("--seed", pipeline_seed, "overrides the config seed");
  pipe->add_option("--out", out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(Code::kUsage, e.what());
  }
  g_timestamps = !no_timestamps;

  try {
    if (*gen) cmd_gen_data(out, common.seed, counts, scenes, image_size);
    if (*tdet) cmd_train_detector(common, modality, data, det_epochs, det_lr, out);
    if (*tclf) cmd_train_classifier(common, data, rgb_ckpt, clf_epochs, clf_lr, excluded, out);
    if (*tfus) {
      cmd_train_fusion(common, data, rgb_ckpt, x_ckpt, scene, fraction, head, module, fus_epochs, fus_lr, excluded,
                       warm_ckpt, out);
    }
    if (*eval) cmd_eval(paths, data, split, detections, model_name, out);
    if (*infer) cmd_infer(paths, data, id, score_threshold);
    if (*viz) cmd_viz(data, rgb_ckpt, x_ckpt, config, split, samples, common.seed, out);
    if (*pipe) cmd_pipeline(config, pipeline_seed, out);
  } catch (const CliError& e) {
    return fail(e.code, e.what());
  } catch (const std::invalid_argument& e) {
    return fail(Code::kBadArgument, e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(Code::kIo, e.what());
  } catch (const std::exception& e) {
    const std::string msg = e.what();
    return fail(msg.find("non-finite") != std::string::npos ? Code::kTraining : Code::kInternal, msg);
  }
  return 0;
}
