#include "rxf/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace rxf {

namespace {

std::vector<std::size_t> by_descending_score(const std::vector<Detection>& dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  return order;
}

// Pools one class at one threshold over all images, in (image, detection) order.
std::vector<ScoredFlag> pooled_flags(const DetectionSet& dets, const GroundTruthSet& gts, int cls,
                                     double iou_threshold, const std::vector<std::vector<bool>>* ignore,
                                     int* num_gt) {
  std::vector<ScoredFlag> out;
  *num_gt = 0;
  for (std::size_t img = 0; img < gts.size(); ++img) {
    std::vector<Detection> d;
    std::vector<Box> g;
    std::vector<bool> ign;
    if (img < dets.size()) {
      for (const auto& det : dets[img]) {
        if (det.class_id == cls) d.push_back(det);
      }
    }
    for (std::size_t j = 0; j < gts[img].size(); ++j) {
      if (gts[img][j].class_id != cls) continue;
      g.push_back(gts[img][j].box);
      ign.push_back(ignore ? (*ignore)[img][j] : false);
    }
    const MatchResult m = match(d, g, iou_threshold, ign);
    *num_gt += m.num_gt;
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (m.flags[i] == MatchFlag::kIgnored) continue;
      out.push_back({d[i].score, m.flags[i] == MatchFlag::kTruePositive});
    }
  }
  return out;
}

}  // namespace

MatchResult match(const std::vector<Detection>& detections, const std::vector<Box>& gts,
                  double iou_threshold, const std::vector<bool>& ignore) {
  if (!ignore.empty() && ignore.size() != gts.size()) {
    throw std::invalid_argument("match: ignore mask length differs from ground truth count");
  }
  auto ignored = [&](std::size_t j) { return !ignore.empty() && ignore[j]; };
  MatchResult r;
  r.flags.assign(detections.size(), MatchFlag::kFalsePositive);
  r.matched_gt.assign(detections.size(), -1);
  for (std::size_t j = 0; j < gts.size(); ++j) r.num_gt += ignored(j) ? 0 : 1;

  std::vector<bool> taken(gts.size(), false);
  for (std::size_t i : by_descending_score(detections)) {
    int best = -1;
    double best_iou = -1.0;
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (taken[j] || ignored(j)) continue;
      const double v = iou(detections[i].box, gts[j]);
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(j);
      }
    }
    if (best >= 0 && best_iou >= iou_threshold) {
      taken[best] = true;
      r.flags[i] = MatchFlag::kTruePositive;
      r.matched_gt[i] = best;
      continue;
    }
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (ignored(j) && iou(detections[i].box, gts[j]) >= iou_threshold) {
        r.flags[i] = MatchFlag::kIgnored;
        break;
      }
    }
  }
  r.unmatched_gt = r.num_gt - static_cast<int>(std::count(taken.begin(), taken.end(), true));
  return r;
}

double average_precision(const std::vector<ScoredFlag>& ranked, int num_gt, ApInterpolation mode) {
  if (num_gt <= 0) throw std::invalid_argument("average_precision: needs at least one ground truth");
  std::vector<std::size_t> order(ranked.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return ranked[a].score > ranked[b].score; });
  const std::size_t n = order.size();
  std::vector<double> recall(n), precision(n);
  int tp = 0;
  for (std::size_t k = 0; k < n; ++k) {
    tp += ranked[order[k]].true_positive ? 1 : 0;
    recall[k] = static_cast<double>(tp) / num_gt;
    precision[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
  }
  for (std::size_t k = n; k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);

  if (mode == ApInterpolation::kAllPoint) {
    double ap = 0.0, prev = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      ap += (recall[k] - prev) * precision[k];
      prev = recall[k];
    }
    return ap;
  }
  const int points = mode == ApInterpolation::kCoco101 ? 101 : 40;
  double total = 0.0;
  for (int i = 0; i < points; ++i) {
    const double t = mode == ApInterpolation::kCoco101 ? i / 100.0 : (i + 1) / 40.0;
    // First rank whose recall reaches t; the envelope there is the max
    // precision over all ranks with recall >= t.
    const auto it = std::lower_bound(recall.begin(), recall.end(), t);
    if (it != recall.end()) total += precision[it - recall.begin()];
  }
  return total / points;
}

std::vector<std::optional<double>> per_class_ap(const DetectionSet& dets, const GroundTruthSet& gts,
                                                int num_classes, double iou_threshold,
                                                ApInterpolation mode) {
  std::vector<std::optional<double>> out(num_classes);
  for (int c = 0; c < num_classes; ++c) {
    int num_gt = 0;
    const auto flags = pooled_flags(dets, gts, c, iou_threshold, nullptr, &num_gt);
    if (num_gt > 0) out[c] = average_precision(flags, num_gt, mode);
  }
  return out;
}

std::optional<double> map_at(const DetectionSet& dets, const GroundTruthSet& gts, int num_classes,
                             const std::vector<double>& thresholds, ApInterpolation mode) {
  if (thresholds.empty()) throw std::invalid_argument("map_at: no IoU thresholds");
  double total = 0.0;
  for (double thr : thresholds) {
    double sum = 0.0;
    int classes = 0;
    for (const auto& ap : per_class_ap(dets, gts, num_classes, thr, mode)) {
      if (!ap) continue;
      sum += *ap;
      ++classes;
    }
    if (classes == 0) return std::nullopt;
    total += sum / classes;
  }
  return total / static_cast<double>(thresholds.size());
}

std::vector<double> coco_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

std::vector<DifficultyBucket> kitti_buckets() {
  return {{"easy", 40.0}, {"moderate", 25.0}, {"hard", 15.0}};
}

std::optional<double> kitti_ap(const DetectionSet& dets, const GroundTruthSet& gts, int num_classes,
                               const DifficultyBucket& bucket, int image_size, double iou_threshold) {
  const double min_h = bucket.min_height * image_size / 128.0;
  std::vector<std::vector<bool>> ignore(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) {
    for (const auto& g : gts[i]) ignore[i].push_back(g.box.height() < min_h);
  }
  double sum = 0.0;
  int classes = 0;
  for (int c = 0; c < num_classes; ++c) {
    int num_gt = 0;
    const auto flags = pooled_flags(dets, gts, c, iou_threshold, &ignore, &num_gt);
    if (num_gt == 0) continue;
    sum += average_precision(flags, num_gt, ApInterpolation::kKitti40);
    ++classes;
  }
  if (classes == 0) return std::nullopt;
  return sum / classes;
}

double top1_accuracy(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.empty()) throw std::invalid_argument("top1_accuracy: empty input");
  if (predicted.size() != truth.size()) {
    throw std::invalid_argument("top1_accuracy: " + std::to_string(predicted.size()) +
                                " predictions for " + std::to_string(truth.size()) + " labels");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i] ? 1 : 0;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(truth.size());
}

}  // namespace rxf
