#pragma once

#include "rxf/box.hpp"

#include <optional>
#include <string>
#include <vector>

namespace rxf {

/// Outcome of one detection after matching.
enum class MatchFlag { kFalsePositive, kTruePositive, kIgnored };

struct MatchResult {
  std::vector<MatchFlag> flags;     // per detection, input order
  std::vector<int> matched_gt;      // per detection, -1 if none
  int num_gt = 0;                   // non-ignored ground truths
  int unmatched_gt = 0;
};

/// Single image, single class. Detections are visited by descending score
/// (stable, so equal scores keep input order); each takes the unmatched
/// ground truth of highest IoU (lowest index on ties) if that IoU reaches
/// `iou_threshold`. `ignore[j]` marks ground truth j as an ignore region: a
/// detection with no eligible match but IoU >= threshold against any ignore
/// region is flagged kIgnored. `ignore` may be empty.
MatchResult match(const std::vector<Detection>& detections, const std::vector<Box>& gts,
                  double iou_threshold, const std::vector<bool>& ignore = {});

enum class ApInterpolation {
  kAllPoint,   // exact area under the precision envelope
  kCoco101,    // recall 0, 0.01, ..., 1
  kKitti40,    // recall 1/40, 2/40, ..., 1
};

struct ScoredFlag {
  double score = 0.0;
  bool true_positive = false;
};

/// AP of a ranked list pooled over images; `num_gt` > 0. Equal scores keep
/// the given order.
double average_precision(const std::vector<ScoredFlag>& ranked, int num_gt,
                         ApInterpolation mode = ApInterpolation::kCoco101);

/// Per image detections / ground truths, any classes.
using DetectionSet = std::vector<std::vector<Detection>>;
using GroundTruthSet = std::vector<std::vector<GroundTruth>>;

/// Per-class AP at one IoU threshold; nullopt for classes without ground truth.
std::vector<std::optional<double>> per_class_ap(const DetectionSet& dets, const GroundTruthSet& gts,
                                                int num_classes, double iou_threshold,
                                                ApInterpolation mode = ApInterpolation::kCoco101);

/// Mean over classes with ground truth, then over thresholds; nullopt when
/// there is no ground truth at all.
std::optional<double> map_at(const DetectionSet& dets, const GroundTruthSet& gts, int num_classes,
                             const std::vector<double>& thresholds,
                             ApInterpolation mode = ApInterpolation::kCoco101);

std::vector<double> coco_thresholds();  // 0.50, 0.55, ..., 0.95

struct DifficultyBucket {
  std::string name;
  double min_height = 0;  // pixels at the reference size
};

/// easy >= 40, moderate >= 25, hard >= 15 px of a 128 px image.
std::vector<DifficultyBucket> kitti_buckets();

/// Ground truths shorter than the bucket height (scaled by image_size/128)
/// become ignore regions; 40-point AP at IoU 0.5, averaged over classes that
/// keep at least one eligible ground truth.
std::optional<double> kitti_ap(const DetectionSet& dets, const GroundTruthSet& gts, int num_classes,
                               const DifficultyBucket& bucket, int image_size = 128,
                               double iou_threshold = 0.5);

/// Percentage of equal entries. Throws on empty or mismatched input.
double top1_accuracy(const std::vector<int>& predicted, const std::vector<int>& truth);

}  // namespace rxf
