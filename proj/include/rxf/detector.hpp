#pragma once

#include "rxf/box.hpp"
#include "rxf/fusion.hpp"
#include "rxf/nn.hpp"

#include <array>
#include <string>
#include <vector>

namespace rxf {

struct DetectorConfig {
  int image_size = 128;
  int feature_channels = 16;  // Cfeat, every pyramid level
  int num_classes = 2;
  std::array<int, 4> stage_widths{16, 32, 64, 64};
  double anchor_scale = 4.0;  // base anchor side = scale * stride
};

inline constexpr int kAnchorsPerCell = 3;
inline constexpr int kPyramidLevels = 5;
inline constexpr std::array<int, kPyramidLevels> kLevelStrides{8, 16, 32, 64, 128};

/// P3..P7.
using Pyramid = std::vector<Tensor>;

/// Four stride-2 conv+ReLU stages.
struct Backbone {
  std::array<Conv2d, 4> stages;

  Backbone() = default;
  Backbone(int in_channels, const std::array<int, 4>& widths, Rng& rng);
  /// Throws unless H and W are divisible by 128.
  std::vector<Tensor> forward(const Tensor& image) const;
  void collect(ParameterList& out, const std::string& prefix) const;
};

/// Lateral 1x1 convs, one top-down nearest-upsampling pass and 3x3 smoothing
/// for P3..P5; P6 and P7 by repeated 2x max pooling of P5.
/// P3 taps stage 3 (stride 8), P4 stage 4 (stride 16), P5 stage 4 pooled.
struct Fpn {
  std::array<Conv2d, 3> lateral;
  std::array<Conv2d, 3> smooth;

  Fpn() = default;
  Fpn(const std::array<int, 4>& widths, int feature_channels, Rng& rng);
  Pyramid forward(const std::vector<Tensor>& stages) const;
  void collect(ParameterList& out, const std::string& prefix) const;
};

struct HeadOutput {
  Tensor logits;   // [B, N, K]
  Tensor offsets;  // [B, N, 4]
};

/// Classification and regression towers shared across pyramid levels.
struct DetectorHead {
  std::array<Conv2d, 2> cls_tower;
  std::array<Conv2d, 2> reg_tower;
  Conv2d cls_out;  // -> A*K
  Conv2d reg_out;  // -> A*4
  int num_classes = 0;

  DetectorHead() = default;
  DetectorHead(int feature_channels, int num_classes, Rng& rng);
  HeadOutput forward(const Pyramid& pyramid) const;
  void collect(ParameterList& out, const std::string& prefix) const;
  DetectorHead clone() const;
};

enum class HeadMode { kTrained, kFrozenRgb, kFrozenX };
std::string to_string(HeadMode mode);  // "tr", "rh", "th"
HeadMode parse_head_mode(const std::string& name);

enum class Modality { kRgb, kX };
std::string to_string(Modality m);
Modality parse_modality(const std::string& name);
inline int modality_channels(Modality m) { return m == Modality::kRgb ? 3 : 1; }

/// One single-modality detector branch.
struct Detector {
  Modality modality = Modality::kRgb;
  DetectorConfig config;
  Backbone backbone;
  Fpn fpn;
  DetectorHead head;

  Detector() = default;
  Detector(Modality modality, const DetectorConfig& config, std::uint64_t seed);

  Pyramid pyramid(const Tensor& image) const { return fpn.forward(backbone.forward(image)); }
  HeadOutput forward(const Tensor& image) const { return head.forward(pyramid(image)); }
  void collect(ParameterList& out, const std::string& prefix = "") const;
  ParameterList parameters() const;
};

struct Anchor {
  int level = 0;
  Box box;
};

/// Anchors ordered (level, row, col, aspect) with aspects 1:1, 2:1, 1:2 (w:h).
std::vector<Anchor> anchors_for(int image_size, const DetectorConfig& config);

/// (dx, dy, dw, dh): center shift over anchor size, log size ratios.
std::array<double, 4> box_encode(const Box& gt, const Box& anchor);
Box box_decode(const std::array<double, 4>& offsets, const Box& anchor);

struct LossConfig {
  double alpha = 0.25;
  double gamma = 2.0;
  double positive_iou = 0.5;
  double negative_iou = 0.4;
  double smooth_l1_beta = 1.0 / 9.0;
  double box_weight = 1.0;
  /// Also mark each ground truth's best anchor positive.
  bool force_best_anchor = true;
};

/// Per-anchor training targets for one image.
struct AnchorTargets {
  std::vector<int> label;  // -1 ignore, 0 background, k+1 positive of class k
  std::vector<std::array<double, 4>> offsets;
  int positives = 0;
};

AnchorTargets assign_targets(const std::vector<Anchor>& anchors, const std::vector<GroundTruth>& gts,
                             const LossConfig& config);

/// Focal classification loss over non-ignored anchors plus smooth-L1 over
/// positives, normalized by max(1, #positives).
Tensor detection_loss(const HeadOutput& out, const std::vector<Anchor>& anchors,
                      const std::vector<std::vector<GroundTruth>>& gts, const LossConfig& config = {});
Tensor detection_loss(const HeadOutput& out, const std::vector<AnchorTargets>& targets,
                      const LossConfig& config = {});

struct NmsConfig {
  double iou_threshold = 0.5;
  double score_threshold = 0.05;
  int max_candidates = 1000;
  int max_detections = 100;
};

/// Greedy per-class suppression by descending score (ties: earlier index).
/// Drops detections below the score threshold.
std::vector<Detection> nms(const std::vector<Detection>& detections, const NmsConfig& config = {});

/// Decodes head outputs of every image in the batch into detections.
std::vector<std::vector<Detection>> decode_detections(const HeadOutput& out,
                                                      const std::vector<Anchor>& anchors,
                                                      int image_size, const NmsConfig& config = {});

/// Single-modality inference. `image` is [C,H,W] or [B,C,H,W].
std::vector<std::vector<Detection>> detect_single(const Tensor& image, const Detector& detector,
                                                  const NmsConfig& config = {});

/// Per-level fusion of two pyramids.
Pyramid fuse_pyramids(const Pyramid& rgb, const Pyramid& x, const FusionBank& bank);

std::vector<std::vector<Detection>> detect_fused(const Tensor& rgb_image, const Tensor& x_image,
                                                 const Detector& rgb, const Detector& x,
                                                 const FusionBank& bank, const DetectorHead& head,
                                                 const NmsConfig& config = {});

/// Adds a leading batch axis to a [C,H,W] image.
Tensor as_batch(const Tensor& image);

}  // namespace rxf
