#include "rxf/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace rxf {

namespace {

constexpr double kPriorProbability = 0.01;
// Caps exp() in box_decode at 1000/16 size ratio.
const double kMaxLogRatio = std::log(1000.0 / 16.0);

void check_divisible(int h, int w) {
  if (h % 128 != 0 || w % 128 != 0 || h <= 0 || w <= 0) {
    throw std::invalid_argument("backbone: input " + std::to_string(h) + "x" + std::to_string(w) +
                                " is not divisible by 128");
  }
}

bool all_finite(const ParameterList& params) {
  for (const auto& p : params.items()) {
    if (!p.tensor.values().allFinite()) return false;
  }
  return true;
}

// He-uniform weights and zero bias for convolutions followed by ReLU, so
// activations keep their scale through the stack.
Conv2d relu_conv(int cin, int cout, int stride, Rng& rng) {
  Conv2d c(cin, cout, 3, stride, true, rng);
  const double bound = std::sqrt(6.0 / (cin * 9));
  for (auto& v : c.weight.values()) v = rng.uniform(-bound, bound);
  c.bias.values().setZero();
  return c;
}

}  // namespace

Backbone::Backbone(int in_channels, const std::array<int, 4>& widths, Rng& rng) {
  int cin = in_channels;
  for (int i = 0; i < 4; ++i) {
    stages[i] = relu_conv(cin, widths[i], 2, rng);
    cin = widths[i];
  }
}

std::vector<Tensor> Backbone::forward(const Tensor& image) const {
  if (image.rank() != 4) {
    throw std::invalid_argument("backbone: expected [B,C,H,W], got " + to_string(image.shape()));
  }
  check_divisible(image.dim(2), image.dim(3));
  std::vector<Tensor> out;
  Tensor x = image;
  for (const auto& stage : stages) {
    x = relu(stage(x));
    out.push_back(x);
  }
  return out;
}

void Backbone::collect(ParameterList& out, const std::string& prefix) const {
  for (int i = 0; i < 4; ++i) stages[i].collect(out, prefix + ".stage" + std::to_string(i));
}

Fpn::Fpn(const std::array<int, 4>& widths, int cf, Rng& rng) {
  lateral[0] = Conv2d(widths[2], cf, 1, 1, true, rng);
  lateral[1] = Conv2d(widths[3], cf, 1, 1, true, rng);
  lateral[2] = Conv2d(widths[3], cf, 1, 1, true, rng);
  for (auto& s : smooth) s = Conv2d(cf, cf, 3, 1, true, rng);
}

Pyramid Fpn::forward(const std::vector<Tensor>& stages) const {
  if (stages.size() != 4) {
    throw std::invalid_argument("fpn: expected 4 stage features, got " + std::to_string(stages.size()));
  }
  Tensor l5 = lateral[2](maxpool2(stages[3]));
  Tensor l4 = lateral[1](stages[3]) + upsample_nearest2(l5);
  Tensor l3 = lateral[0](stages[2]) + upsample_nearest2(l4);
  Pyramid p(kPyramidLevels);
  p[0] = smooth[0](l3);
  p[1] = smooth[1](l4);
  p[2] = smooth[2](l5);
  p[3] = maxpool2(p[2]);
  p[4] = maxpool2(p[3]);
  return p;
}

void Fpn::collect(ParameterList& out, const std::string& prefix) const {
  for (int i = 0; i < 3; ++i) {
    lateral[i].collect(out, prefix + ".lateral" + std::to_string(i));
    smooth[i].collect(out, prefix + ".smooth" + std::to_string(i));
  }
}

DetectorHead::DetectorHead(int cf, int num_classes_, Rng& rng) : num_classes(num_classes_) {
  for (auto& c : cls_tower) c = relu_conv(cf, cf, 1, rng);
  for (auto& c : reg_tower) c = relu_conv(cf, cf, 1, rng);
  cls_out = Conv2d(cf, kAnchorsPerCell * num_classes, 3, 1, true, rng);
  reg_out = Conv2d(cf, kAnchorsPerCell * 4, 3, 1, true, rng);
  cls_out.bias.values().setConstant(-std::log((1.0 - kPriorProbability) / kPriorProbability));
}

HeadOutput DetectorHead::forward(const Pyramid& pyramid) const {
  std::vector<Tensor> cls, reg;
  for (const auto& level : pyramid) {
    Tensor c = level, r = level;
    for (const auto& conv : cls_tower) c = relu(conv(c));
    for (const auto& conv : reg_tower) r = relu(conv(r));
    cls.push_back(flatten_anchors(cls_out(c), kAnchorsPerCell));
    reg.push_back(flatten_anchors(reg_out(r), kAnchorsPerCell));
  }
  return {concat_rows(cls), concat_rows(reg)};
}

void DetectorHead::collect(ParameterList& out, const std::string& prefix) const {
  for (int i = 0; i < 2; ++i) {
    cls_tower[i].collect(out, prefix + ".cls" + std::to_string(i));
    reg_tower[i].collect(out, prefix + ".reg" + std::to_string(i));
  }
  cls_out.collect(out, prefix + ".cls_out");
  reg_out.collect(out, prefix + ".reg_out");
}

DetectorHead DetectorHead::clone() const {
  DetectorHead out = *this;
  auto deep = [](Conv2d& c) {
    c.weight = c.weight.clone();
    if (c.bias.defined()) c.bias = c.bias.clone();
  };
  for (auto& c : out.cls_tower) deep(c);
  for (auto& c : out.reg_tower) deep(c);
  deep(out.cls_out);
  deep(out.reg_out);
  return out;
}

std::string to_string(HeadMode mode) {
  switch (mode) {
    case HeadMode::kTrained: return "tr";
    case HeadMode::kFrozenRgb: return "rh";
    case HeadMode::kFrozenX: return "th";
  }
  return "?";
}

HeadMode parse_head_mode(const std::string& name) {
  if (name == "tr") return HeadMode::kTrained;
  if (name == "rh") return HeadMode::kFrozenRgb;
  if (name == "th") return HeadMode::kFrozenX;
  throw std::invalid_argument("unknown head mode: " + name + " (expected tr, rh or th)");
}

std::string to_string(Modality m) { return m == Modality::kRgb ? "rgb" : "x"; }

Modality parse_modality(const std::string& name) {
  if (name == "rgb") return Modality::kRgb;
  if (name == "x") return Modality::kX;
  throw std::invalid_argument("unknown modality: " + name + " (expected rgb or x)");
}

Detector::Detector(Modality modality_, const DetectorConfig& config_, std::uint64_t seed)
    : modality(modality_), config(config_) {
  Rng rng(seed);
  backbone = Backbone(modality_channels(modality), config.stage_widths, rng);
  fpn = Fpn(config.stage_widths, config.feature_channels, rng);
  head = DetectorHead(config.feature_channels, config.num_classes, rng);
}

void Detector::collect(ParameterList& out, const std::string& prefix) const {
  backbone.collect(out, prefix + "backbone");
  fpn.collect(out, prefix + "fpn");
  head.collect(out, prefix + "head");
}

ParameterList Detector::parameters() const {
  ParameterList out;
  collect(out);
  return out;
}

std::vector<Anchor> anchors_for(int image_size, const DetectorConfig& config) {
  check_divisible(image_size, image_size);
  static const double kAspects[kAnchorsPerCell] = {1.0, 2.0, 0.5};
  std::vector<Anchor> out;
  for (int level = 0; level < kPyramidLevels; ++level) {
    const int stride = kLevelStrides[level];
    const int cells = image_size / stride;
    const double base = config.anchor_scale * stride;
    for (int row = 0; row < cells; ++row) {
      for (int col = 0; col < cells; ++col) {
        const double cx = (col + 0.5) * stride, cy = (row + 0.5) * stride;
        for (double aspect : kAspects) {
          const double r = std::sqrt(aspect);
          out.push_back({level, Box::from_center(cx, cy, base * r, base / r)});
        }
      }
    }
  }
  return out;
}

std::array<double, 4> box_encode(const Box& gt, const Box& anchor) {
  const double gw = gt.width(), gh = gt.height(), aw = anchor.width(), ah = anchor.height();
  if (!(gw > 0 && gh > 0 && aw > 0 && ah > 0)) {
    throw std::invalid_argument("box_encode: boxes need positive width and height");
  }
  return {(gt.cx() - anchor.cx()) / aw, (gt.cy() - anchor.cy()) / ah, std::log(gw / aw),
          std::log(gh / ah)};
}

Box box_decode(const std::array<double, 4>& d, const Box& anchor) {
  const double aw = anchor.width(), ah = anchor.height();
  if (!(aw > 0 && ah > 0)) throw std::invalid_argument("box_decode: anchor needs positive size");
  const double w = aw * std::exp(std::min(d[2], kMaxLogRatio));
  const double h = ah * std::exp(std::min(d[3], kMaxLogRatio));
  return Box::from_center(anchor.cx() + d[0] * aw, anchor.cy() + d[1] * ah, w, h);
}

AnchorTargets assign_targets(const std::vector<Anchor>& anchors, const std::vector<GroundTruth>& gts,
                             const LossConfig& config) {
  const std::size_t n = anchors.size(), g = gts.size();
  AnchorTargets t;
  t.label.assign(n, 0);
  t.offsets.assign(n, {0, 0, 0, 0});
  if (g == 0) return t;

  std::vector<int> best_gt(n, -1);
  std::vector<double> best_iou(n, 0.0);
  std::vector<std::size_t> gt_best_anchor(g, 0);
  std::vector<double> gt_best_iou(g, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < g; ++j) {
      const double v = iou(anchors[i].box, gts[j].box);
      if (v > best_iou[i]) {
        best_iou[i] = v;
        best_gt[i] = static_cast<int>(j);
      }
      if (v > gt_best_iou[j]) {
        gt_best_iou[j] = v;
        gt_best_anchor[j] = i;
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (best_iou[i] >= config.positive_iou) {
      t.label[i] = gts[best_gt[i]].class_id + 1;
    } else if (best_iou[i] >= config.negative_iou) {
      t.label[i] = -1;
    }
  }
  if (config.force_best_anchor) {
    for (std::size_t j = 0; j < g; ++j) {
      if (gt_best_iou[j] <= 0.0) continue;
      const std::size_t i = gt_best_anchor[j];
      best_gt[i] = static_cast<int>(j);
      t.label[i] = gts[j].class_id + 1;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (t.label[i] > 0) {
      t.offsets[i] = box_encode(gts[best_gt[i]].box, anchors[i].box);
      ++t.positives;
    }
  }
  return t;
}

Tensor detection_loss(const HeadOutput& out, const std::vector<AnchorTargets>& targets,
                      const LossConfig& config) {
  const int B = out.logits.dim(0), N = out.logits.dim(1), K = out.logits.dim(2);
  if (static_cast<int>(targets.size()) != B) {
    throw std::invalid_argument("detection_loss: " + std::to_string(targets.size()) +
                                " target sets for batch of " + std::to_string(B));
  }
  Array cls_target = Array::Zero(std::int64_t(B) * N * K);
  Array weight = Array::Zero(std::int64_t(B) * N);
  Array box_target = Array::Zero(std::int64_t(B) * N * 4);
  Array mask = Array::Zero(std::int64_t(B) * N);
  int positives = 0;
  for (int b = 0; b < B; ++b) {
    const auto& t = targets[b];
    if (static_cast<int>(t.label.size()) != N) {
      throw std::invalid_argument("detection_loss: targets cover " + std::to_string(t.label.size()) +
                                  " anchors, head produced " + std::to_string(N));
    }
    for (int i = 0; i < N; ++i) {
      const std::int64_t row = std::int64_t(b) * N + i;
      const int label = t.label[i];
      if (label < 0) continue;
      weight[row] = 1.0;
      if (label > 0) {
        if (label > K) throw std::invalid_argument("detection_loss: class id out of range");
        cls_target[row * K + label - 1] = 1.0;
        mask[row] = 1.0;
        for (int c = 0; c < 4; ++c) box_target[row * 4 + c] = t.offsets[i][c];
        ++positives;
      }
    }
  }
  Tensor cls = sigmoid_focal_loss(out.logits, cls_target, weight, config.alpha, config.gamma);
  Tensor box = smooth_l1_loss(out.offsets, box_target, mask, config.smooth_l1_beta);
  const double norm = 1.0 / std::max(1, positives);
  return scale(cls + scale(box, config.box_weight), norm);
}

Tensor detection_loss(const HeadOutput& out, const std::vector<Anchor>& anchors,
                      const std::vector<std::vector<GroundTruth>>& gts, const LossConfig& config) {
  std::vector<AnchorTargets> targets;
  for (const auto& g : gts) targets.push_back(assign_targets(anchors, g, config));
  return detection_loss(out, targets, config);
}

std::vector<Detection> nms(const std::vector<Detection>& detections, const NmsConfig& config) {
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < detections.size(); ++i) {
    if (detections[i].score > config.score_threshold) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return detections[a].score > detections[b].score;
  });
  std::vector<Detection> kept;
  for (std::size_t i : order) {
    const auto& d = detections[i];
    bool suppressed = false;
    for (const auto& k : kept) {
      if (k.class_id == d.class_id && iou(k.box, d.box) >= config.iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) {
      kept.push_back(d);
      if (static_cast<int>(kept.size()) >= config.max_detections) break;
    }
  }
  return kept;
}

std::vector<std::vector<Detection>> decode_detections(const HeadOutput& out,
                                                      const std::vector<Anchor>& anchors,
                                                      int image_size, const NmsConfig& config) {
  const int B = out.logits.dim(0), N = out.logits.dim(1), K = out.logits.dim(2);
  if (N != static_cast<int>(anchors.size())) {
    throw std::invalid_argument("decode_detections: " + std::to_string(N) + " predictions for " +
                                std::to_string(anchors.size()) + " anchors");
  }
  const Scalar* logits = out.logits.data();
  const Scalar* offsets = out.offsets.data();
  std::vector<std::vector<Detection>> result(B);
  for (int b = 0; b < B; ++b) {
    struct Candidate {
      int anchor, cls;
      double score;
    };
    std::vector<Candidate> cand;
    for (int i = 0; i < N; ++i) {
      for (int k = 0; k < K; ++k) {
        const double z = logits[(std::int64_t(b) * N + i) * K + k];
        const double s = 1.0 / (1.0 + std::exp(-z));
        if (s > config.score_threshold) cand.push_back({i, k, s});
      }
    }
    std::stable_sort(cand.begin(), cand.end(),
                     [](const Candidate& a, const Candidate& c) { return a.score > c.score; });
    if (static_cast<int>(cand.size()) > config.max_candidates) cand.resize(config.max_candidates);
    std::vector<Detection> dets;
    for (const auto& c : cand) {
      const Scalar* o = offsets + (std::int64_t(b) * N + c.anchor) * 4;
      Box box = box_decode({o[0], o[1], o[2], o[3]}, anchors[c.anchor].box);
      box.x0 = std::clamp(box.x0, 0.0, double(image_size));
      box.x1 = std::clamp(box.x1, 0.0, double(image_size));
      box.y0 = std::clamp(box.y0, 0.0, double(image_size));
      box.y1 = std::clamp(box.y1, 0.0, double(image_size));
      if (box.x1 <= box.x0 || box.y1 <= box.y0) continue;
      dets.push_back({c.cls, c.score, box});
    }
    result[b] = nms(dets, config);
  }
  return result;
}

Tensor as_batch(const Tensor& image) {
  if (image.rank() == 4) return image;
  if (image.rank() != 3) {
    throw std::invalid_argument("expected [C,H,W] or [B,C,H,W] image, got " + to_string(image.shape()));
  }
  return reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
}

std::vector<std::vector<Detection>> detect_single(const Tensor& image, const Detector& detector,
                                                  const NmsConfig& config) {
  if (!all_finite(detector.parameters())) {
    throw std::runtime_error("detect_single: detector has non-finite weights");
  }
  NoGradGuard guard;
  Tensor batch = as_batch(image);
  const auto anchors = anchors_for(batch.dim(2), detector.config);
  return decode_detections(detector.forward(batch), anchors, batch.dim(2), config);
}

Pyramid fuse_pyramids(const Pyramid& rgb, const Pyramid& x, const FusionBank& bank) {
  if (rgb.size() != x.size() || rgb.size() != bank.modules.size()) {
    throw std::invalid_argument("fuse_pyramids: level counts differ (rgb " + std::to_string(rgb.size()) +
                                ", x " + std::to_string(x.size()) + ", fusion " +
                                std::to_string(bank.modules.size()) + ")");
  }
  Pyramid out;
  for (std::size_t l = 0; l < rgb.size(); ++l) out.push_back(cbam_fuse(rgb[l], x[l], bank.modules[l]));
  return out;
}

std::vector<std::vector<Detection>> detect_fused(const Tensor& rgb_image, const Tensor& x_image,
                                                 const Detector& rgb, const Detector& x,
                                                 const FusionBank& bank, const DetectorHead& head,
                                                 const NmsConfig& config) {
  NoGradGuard guard;
  Tensor rb = as_batch(rgb_image), xb = as_batch(x_image);
  Pyramid fused = fuse_pyramids(rgb.pyramid(rb), x.pyramid(xb), bank);
  const auto anchors = anchors_for(rb.dim(2), rgb.config);
  return decode_detections(head.forward(fused), anchors, rb.dim(2), config);
}

}  // namespace rxf
