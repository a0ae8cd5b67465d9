#include "rxf/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace rxf {

namespace {

const Tensor& image_of(const SceneSample& s, Modality m) { return m == Modality::kRgb ? s.rgb : s.x; }

void flip_into(const Array& src, int C, int H, int W, Scalar* dst) {
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y) {
      const Scalar* row = src.data() + (std::int64_t(c) * H + y) * W;
      Scalar* out = dst + (std::int64_t(c) * H + y) * W;
      for (int x = 0; x < W; ++x) out[x] = row[W - 1 - x];
    }
}

std::vector<GroundTruth> flipped(const std::vector<GroundTruth>& gts, int width) {
  std::vector<GroundTruth> out = gts;
  for (auto& g : out) g.box = {width - g.box.x1, g.box.y0, width - g.box.x0, g.box.y1};
  return out;
}

std::vector<int> shuffled(int n, Rng& rng) {
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int i = n; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(0, i - 1)]);
  return order;
}

void check_finite(double loss, const char* what, int epoch) {
  if (!std::isfinite(loss)) {
    throw std::runtime_error(std::string(what) + ": non-finite loss at epoch " + std::to_string(epoch));
  }
}

// Runs the epoch/batch loop shared by all trainers. `step_loss` builds the
// loss of one batch given sample indices and the batch rng.
void run_epochs(int n, const TrainOptions& options, Adam& adam, const char* what,
                const std::function<Tensor(const std::vector<int>&, Rng&)>& step_loss,
                std::vector<EpochLog>* log) {
  if (n == 0) throw std::invalid_argument(std::string(what) + ": empty training split");
  if (options.batch_size < 1) throw std::invalid_argument(std::string(what) + ": batch size must be positive");
  Rng rng(mix_seed(options.seed, 0x7a11));
  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    const auto order = shuffled(n, rng);
    double total = 0.0;
    int batches = 0;
    for (int start = 0; start < n; start += options.batch_size) {
      const std::vector<int> idx(order.begin() + start,
                                 order.begin() + std::min(n, start + options.batch_size));
      Tensor loss = step_loss(idx, rng);
      check_finite(loss.item(), what, epoch);
      loss.backward();
      adam.step();
      adam.zero_grad();
      total += loss.item();
      ++batches;
    }
    const EpochLog entry{epoch, total / batches, adam.lr()};
    if (log) log->push_back(entry);
    if (options.on_epoch) options.on_epoch(entry);
    adam.end_epoch();
  }
}

// Frozen copy of a head: same values, no gradient tracking, never written.
DetectorHead frozen_copy(const DetectorHead& head) {
  DetectorHead out = head.clone();
  ParameterList p;
  out.collect(p, "head");
  p.set_frozen(true);
  return out;
}

}  // namespace

Tensor stack_images(const std::vector<const SceneSample*>& samples, Modality m) {
  if (samples.empty()) throw std::invalid_argument("stack_images: no samples");
  const Shape& s = image_of(*samples[0], m).shape();
  const std::int64_t n = numel(s);
  Array out(n * static_cast<std::int64_t>(samples.size()));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Tensor& img = image_of(*samples[i], m);
    if (img.shape() != s) throw std::invalid_argument("stack_images: image sizes differ");
    out.segment(static_cast<std::int64_t>(i) * n, n) = img.values();
  }
  return Tensor({static_cast<int>(samples.size()), s[0], s[1], s[2]}, std::move(out));
}

Detector train_detector(const std::vector<SceneSample>& samples, Modality modality,
                        const DetectorConfig& config, const TrainOptions& options,
                        std::vector<EpochLog>* log) {
  Detector det(modality, config, mix_seed(options.seed, modality == Modality::kRgb ? 1 : 2));
  const auto anchors = anchors_for(config.image_size, config);
  const LossConfig loss_cfg;
  std::vector<AnchorTargets> plain, mirrored;
  for (const auto& s : samples) {
    plain.push_back(assign_targets(anchors, s.gts, loss_cfg));
    if (options.flip) mirrored.push_back(assign_targets(anchors, flipped(s.gts, config.image_size), loss_cfg));
  }
  const ParameterList params = det.parameters();
  Adam adam(params, options.adam);
  const int C = modality_channels(modality), S = config.image_size;
  const std::int64_t per = std::int64_t(C) * S * S;

  run_epochs(static_cast<int>(samples.size()), options, adam, "train-detector",
             [&](const std::vector<int>& idx, Rng& rng) {
               Array batch(per * static_cast<std::int64_t>(idx.size()));
               std::vector<AnchorTargets> targets;
               for (std::size_t i = 0; i < idx.size(); ++i) {
                 const Array& src = image_of(samples[idx[i]], modality).values();
                 const bool flip = options.flip && rng.uniform() < 0.5;
                 if (flip) {
                   flip_into(src, C, S, S, batch.data() + i * per);
                 } else {
                   batch.segment(static_cast<std::int64_t>(i) * per, per) = src;
                 }
                 targets.push_back(flip ? mirrored[idx[i]] : plain[idx[i]]);
               }
               Tensor images({static_cast<int>(idx.size()), C, S, S}, std::move(batch));
               return detection_loss(det.forward(images), targets, loss_cfg);
             },
             log);
  return det;
}

SceneClassifier::SceneClassifier(std::vector<std::string> taxonomy_, int feature_dim, std::uint64_t seed)
    : taxonomy(std::move(taxonomy_)) {
  if (taxonomy.empty()) throw std::invalid_argument("scene classifier: empty taxonomy");
  Rng rng(seed);
  fc = Linear(feature_dim, static_cast<int>(taxonomy.size()), true, rng);
}

void SceneClassifier::collect(ParameterList& out, const std::string& prefix) const {
  fc.collect(out, prefix);
}

ParameterList SceneClassifier::parameters() const {
  ParameterList out;
  collect(out);
  return out;
}

Tensor scene_features(const std::vector<Tensor>& stages) {
  if (stages.empty()) throw std::invalid_argument("scene_features: no backbone stages");
  return global_pool(stages.back(), PoolKind::kAvg);
}

Tensor classify_features(const Tensor& features, const SceneClassifier& classifier) {
  if (features.dim(1) != classifier.fc.weight.dim(1)) {
    throw std::invalid_argument("classifier expects " + std::to_string(classifier.fc.weight.dim(1)) +
                                " features, got " + std::to_string(features.dim(1)));
  }
  return softmax(classifier.fc(features));
}

std::vector<double> classify_scene(const Tensor& rgb_image, const Detector& rgb,
                                   const SceneClassifier& classifier) {
  NoGradGuard guard;
  const Tensor p = classify_features(scene_features(rgb.backbone.forward(as_batch(rgb_image))), classifier);
  return {p.data(), p.data() + classifier.num_scenes()};
}

SceneClassifier train_classifier(const Detector& rgb, const std::vector<SceneSample>& samples,
                                 const std::vector<std::string>& taxonomy, const TrainOptions& options,
                                 std::vector<EpochLog>* log) {
  if (samples.empty()) throw std::invalid_argument("train-classifier: empty training split");
  std::vector<Tensor> features;
  std::vector<int> labels;
  {
    NoGradGuard guard;
    for (const auto& s : samples) {
      const auto it = std::find(taxonomy.begin(), taxonomy.end(), s.scene);
      if (it == taxonomy.end()) {
        throw std::invalid_argument("train-classifier: image " + std::to_string(s.id) + " has scene '" +
                                    s.scene + "' outside the taxonomy");
      }
      labels.push_back(static_cast<int>(it - taxonomy.begin()));
      features.push_back(scene_features(rgb.backbone.forward(as_batch(s.rgb))));
    }
  }
  // Pooled activations are small and close across scenes; train on
  // standardized features and fold the affine map into fc afterwards.
  const int dim = features[0].dim(1);
  Array mean = Array::Zero(dim), sq = Array::Zero(dim);
  for (const auto& f : features) {
    mean += f.values();
    sq += f.values().square();
  }
  mean /= static_cast<double>(features.size());
  Array inv_std = (sq / static_cast<double>(features.size()) - mean.square()).max(0.0).sqrt();
  inv_std = (inv_std > 1e-12).select(inv_std.inverse(), 1.0);
  for (auto& f : features) f = Tensor({1, dim}, (f.values() - mean) * inv_std);

  SceneClassifier clf(taxonomy, dim, mix_seed(options.seed, 3));
  const ParameterList params = clf.parameters();
  Adam adam(params, options.adam);
  run_epochs(static_cast<int>(samples.size()), options, adam, "train-classifier",
             [&](const std::vector<int>& idx, Rng&) {
               std::vector<Tensor> f;
               std::vector<int> y;
               for (int i : idx) {
                 f.push_back(features[i]);
                 y.push_back(labels[i]);
               }
               return cross_entropy(clf.fc(concat_batch(f)), y);
             },
             log);

  MatrixMap w(clf.fc.weight.data(), clf.num_scenes(), dim);
  w.array().rowwise() *= inv_std.transpose();
  clf.fc.bias.values() -= (w * mean.matrix()).array();
  return clf;
}

const DetectorHead& head_for(const FusionModel& model, const Detector& rgb, const Detector& x) {
  switch (model.head_mode) {
    case HeadMode::kTrained: return model.head;
    case HeadMode::kFrozenRgb: return rgb.head;
    case HeadMode::kFrozenX: return x.head;
  }
  throw std::logic_error("unreachable head mode");
}

FusionModel train_fusion(const Detector& rgb, const Detector& x, const std::vector<SceneSample>& samples,
                         const FusionOptions& options, std::vector<EpochLog>* log) {
  if (samples.empty()) throw std::invalid_argument("train-fusion: empty training split");
  const DetectorConfig& cfg = rgb.config;
  std::vector<Pyramid> rgb_p, x_p;
  {
    NoGradGuard guard;
    for (const auto& s : samples) {
      rgb_p.push_back(rgb.pyramid(as_batch(s.rgb)));
      x_p.push_back(x.pyramid(as_batch(s.x)));
    }
  }
  const auto anchors = anchors_for(cfg.image_size, cfg);
  const LossConfig loss_cfg;
  std::vector<AnchorTargets> targets;
  for (const auto& s : samples) targets.push_back(assign_targets(anchors, s.gts, loss_cfg));

  FusionModel model;
  model.scene = options.scene;
  model.kind = options.kind;
  model.head_mode = options.head_mode;
  const FusionModel* warm = options.warm_start;
  if (warm && (warm->kind != options.kind || warm->head_mode != options.head_mode)) {
    throw std::invalid_argument("train-fusion: warm start differs in module kind or head mode");
  }
  if (warm) {
    model.bank = warm->bank.clone();
    model.bank.scene = options.scene;
  } else {
    model.bank = FusionBank(options.scene, cfg.feature_channels, options.kind, mix_seed(options.train.seed, 4));
  }
  ParameterList params = model.bank.parameters();
  DetectorHead head;
  if (options.head_mode == HeadMode::kTrained) {
    // Start from the thermal head (or the warm start's) and let it adapt together with the bank.
    model.head = warm ? warm->head.clone() : x.head.clone();
    model.head.collect(params, "head");
    head = model.head;
  } else {
    head = frozen_copy(options.head_mode == HeadMode::kFrozenRgb ? rgb.head : x.head);
  }
  Adam adam(params, options.train.adam);

  run_epochs(static_cast<int>(samples.size()), options.train, adam, "train-fusion",
             [&](const std::vector<int>& idx, Rng&) {
               Pyramid rb(kPyramidLevels), xb(kPyramidLevels);
               for (int l = 0; l < kPyramidLevels; ++l) {
                 std::vector<Tensor> r, xx;
                 for (int i : idx) {
                   r.push_back(rgb_p[i][l]);
                   xx.push_back(x_p[i][l]);
                 }
                 rb[l] = concat_batch(r);
                 xb[l] = concat_batch(xx);
               }
               std::vector<AnchorTargets> t;
               for (int i : idx) t.push_back(targets[i]);
               return detection_loss(head.forward(fuse_pyramids(rb, xb, model.bank)), t, loss_cfg);
             },
             log);
  return model;
}

int route(const std::vector<double>& probabilities) {
  if (probabilities.empty()) throw std::invalid_argument("route: empty probability vector");
  int best = 0;
  for (int i = 1; i < static_cast<int>(probabilities.size()); ++i) {
    if (probabilities[i] > probabilities[best]) best = i;
  }
  return best;
}

AdaptiveDetections detect_scene_adaptive(const Tensor& rgb_image, const Tensor& x_image,
                                         const TrainedSystem& system, const NmsConfig& nms) {
  NoGradGuard guard;
  const Tensor rb = as_batch(rgb_image), xb = as_batch(x_image);
  const auto stages = system.rgb.backbone.forward(rb);
  const Tensor p = classify_features(scene_features(stages), system.classifier);
  AdaptiveDetections out;
  out.probabilities.assign(p.data(), p.data() + system.classifier.num_scenes());
  out.scene = system.classifier.taxonomy[route(out.probabilities)];
  const auto it = system.banks.find(out.scene);
  if (it == system.banks.end()) throw std::runtime_error("no fusion bank for scene '" + out.scene + "'");
  const FusionModel& model = it->second;
  const Pyramid fused = fuse_pyramids(system.rgb.fpn.forward(stages), system.x.pyramid(xb), model.bank);
  const auto anchors = anchors_for(rb.dim(2), system.rgb.config);
  const HeadOutput head_out = head_for(model, system.rgb, system.x).forward(fused);
  out.detections = decode_detections(head_out, anchors, rb.dim(2), nms)[0];
  return out;
}

TrainedSystem train_excluding(const TrainedSystem& system, const std::string& excluded,
                              const std::vector<SceneSample>& samples, const TrainOptions& options) {
  const auto& tax = system.classifier.taxonomy;
  if (std::find(tax.begin(), tax.end(), excluded) == tax.end()) {
    throw std::invalid_argument("cannot exclude unknown scene '" + excluded + "'");
  }
  if (tax.size() < 2) throw std::invalid_argument("cannot exclude the only scene");
  TrainedSystem out = system;
  out.banks.erase(excluded);
  std::vector<std::string> kept;
  for (const auto& s : tax) {
    if (s != excluded) kept.push_back(s);
  }
  std::vector<SceneSample> remaining;
  for (const auto& s : samples) {
    if (s.scene != excluded) remaining.push_back(s);
  }
  out.classifier = train_classifier(system.rgb, remaining, kept, options);
  return out;
}

}  // namespace rxf
