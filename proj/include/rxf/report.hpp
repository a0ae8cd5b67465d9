#pragma once

#include "rxf/metrics.hpp"

#include "json.hpp"

#include <optional>
#include <string>
#include <vector>

namespace rxf {

inline constexpr int kMetricsVersion = 1;

/// One number of an evaluation. `scene` is a taxonomy label or "all";
/// `cls` is a class name or "all". An absent value means undefined (no
/// ground truth to score against).
struct MetricRecord {
  std::string metric;
  std::string scene;
  std::string cls = "all";
  std::string model;
  std::optional<double> value;

  bool operator==(const MetricRecord&) const = default;
};

/// {"version": 1, "records": [{metric, scene, class, model, value}, ...]}
nlohmann::ordered_json metrics_to_json(const std::vector<MetricRecord>& records);
/// Throws std::runtime_error on a different version or malformed records.
std::vector<MetricRecord> metrics_from_json(const nlohmann::json& j);

/// Fixed-width text table, one row per (model, scene, class), one column per
/// metric in first-seen order.
std::string metrics_table(const std::vector<MetricRecord>& records);

/// Looks up one value; nullopt if the record is absent or undefined.
std::optional<double> find_metric(const std::vector<MetricRecord>& records, const std::string& metric,
                                  const std::string& scene, const std::string& model,
                                  const std::string& cls = "all");

struct EvalImage {
  std::string scene;
  std::vector<GroundTruth> gts;
  std::vector<Detection> detections;
};

/// mAP@0.5, mAP@0.75, mAP@0.5:0.95, per-class AP@0.5 and KITTI-style
/// easy/moderate/hard AP for each scene in `scenes` and for "all" images.
std::vector<MetricRecord> detection_metrics(const std::string& model, const std::vector<std::string>& scenes,
                                            const std::vector<EvalImage>& images,
                                            const std::vector<std::string>& class_names, int image_size);

/// Top-1 accuracy (percent) per true scene and overall, model "classifier".
std::vector<MetricRecord> classifier_metrics(const std::vector<std::string>& scenes,
                                             const std::vector<std::string>& predicted,
                                             const std::vector<std::string>& truth);

/// Detections in the COCO results layout:
/// [{"image_id", "category_id", "bbox": [x, y, w, h], "score"}, ...].
nlohmann::ordered_json detections_to_json(const std::vector<int>& image_ids,
                                          const std::vector<std::vector<Detection>>& detections);
/// Groups detections by image id; ids absent from the file get no
/// detections. Throws std::runtime_error naming the offending entry.
std::vector<std::vector<Detection>> detections_from_json(const nlohmann::json& j, const std::vector<int>& image_ids,
                                                         int num_classes);

}  // namespace rxf
