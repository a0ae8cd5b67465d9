#include "rxf/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>

namespace rxf {

using nlohmann::json;
using nlohmann::ordered_json;

ordered_json metrics_to_json(const std::vector<MetricRecord>& records) {
  ordered_json out;
  out["version"] = kMetricsVersion;
  out["records"] = ordered_json::array();
  for (const auto& r : records) {
    ordered_json e;
    e["metric"] = r.metric;
    e["scene"] = r.scene;
    e["class"] = r.cls;
    e["model"] = r.model;
    e["value"] = r.value ? ordered_json(*r.value) : ordered_json(nullptr);
    out["records"].push_back(std::move(e));
  }
  return out;
}

std::vector<MetricRecord> metrics_from_json(const json& j) {
  if (!j.is_object() || j.value("version", -1) != kMetricsVersion) {
    throw std::runtime_error("unsupported metrics document (expected version " + std::to_string(kMetricsVersion) +
                             ")");
  }
  std::vector<MetricRecord> out;
  int index = 0;
  for (const auto& e : j.at("records")) {
    try {
      MetricRecord r{e.at("metric").get<std::string>(), e.at("scene").get<std::string>(),
                     e.at("class").get<std::string>(), e.at("model").get<std::string>(), std::nullopt};
      if (!e.at("value").is_null()) r.value = e.at("value").get<double>();
      out.push_back(std::move(r));
    } catch (const json::exception& ex) {
      throw std::runtime_error("metrics record " + std::to_string(index) + ": " + ex.what());
    }
    ++index;
  }
  return out;
}

std::string metrics_table(const std::vector<MetricRecord>& records) {
  std::vector<std::string> columns;
  std::vector<std::string> row_order;
  std::map<std::string, std::map<std::string, std::optional<double>>> cells;
  for (const auto& r : records) {
    if (std::find(columns.begin(), columns.end(), r.metric) == columns.end()) columns.push_back(r.metric);
    const std::string key = r.model + "\t" + r.scene + "\t" + r.cls;
    if (!cells.count(key)) row_order.push_back(key);
    cells[key][r.metric] = r.value;
  }
  std::ostringstream os;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-12s %-10s %-10s", "model", "scene", "class");
  os << buf;
  for (const auto& c : columns) {
    std::snprintf(buf, sizeof buf, " %14s", c.c_str());
    os << buf;
  }
  os << '\n';
  for (const auto& key : row_order) {
    std::istringstream parts(key);
    std::string model, scene, cls;
    std::getline(parts, model, '\t');
    std::getline(parts, scene, '\t');
    std::getline(parts, cls, '\t');
    std::snprintf(buf, sizeof buf, "%-12s %-10s %-10s", model.c_str(), scene.c_str(), cls.c_str());
    os << buf;
    for (const auto& c : columns) {
      const auto it = cells[key].find(c);
      if (it == cells[key].end()) {
        std::snprintf(buf, sizeof buf, " %14s", "");
      } else if (!it->second) {
        std::snprintf(buf, sizeof buf, " %14s", "-");
      } else {
        std::snprintf(buf, sizeof buf, " %14.4f", *it->second);
      }
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

std::optional<double> find_metric(const std::vector<MetricRecord>& records, const std::string& metric,
                                  const std::string& scene, const std::string& model, const std::string& cls) {
  for (const auto& r : records) {
    if (r.metric == metric && r.scene == scene && r.model == model && r.cls == cls) return r.value;
  }
  return std::nullopt;
}

std::vector<MetricRecord> detection_metrics(const std::string& model, const std::vector<std::string>& scenes,
                                            const std::vector<EvalImage>& images,
                                            const std::vector<std::string>& class_names, int image_size) {
  const int K = static_cast<int>(class_names.size());
  std::vector<MetricRecord> out;
  std::vector<std::string> groups = scenes;
  groups.push_back("all");
  for (const auto& group : groups) {
    DetectionSet dets;
    GroundTruthSet gts;
    for (const auto& im : images) {
      if (group != "all" && im.scene != group) continue;
      dets.push_back(im.detections);
      gts.push_back(im.gts);
    }
    auto add = [&](const std::string& metric, std::optional<double> v, const std::string& cls = "all") {
      out.push_back({metric, group, cls, model, v});
    };
    add("mAP@0.5", map_at(dets, gts, K, {0.5}));
    add("mAP@0.75", map_at(dets, gts, K, {0.75}));
    add("mAP@0.5:0.95", map_at(dets, gts, K, coco_thresholds()));
    const auto per_class = per_class_ap(dets, gts, K, 0.5);
    for (int k = 0; k < K; ++k) add("AP@0.5", per_class[k], class_names[k]);
    for (const auto& bucket : kitti_buckets()) {
      add("kitti_" + bucket.name, kitti_ap(dets, gts, K, bucket, image_size));
    }
  }
  return out;
}

std::vector<MetricRecord> classifier_metrics(const std::vector<std::string>& scenes,
                                             const std::vector<std::string>& predicted,
                                             const std::vector<std::string>& truth) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("classifier_metrics: length mismatch");
  std::vector<MetricRecord> out;
  std::vector<std::string> groups = scenes;
  groups.push_back("all");
  for (const auto& group : groups) {
    std::vector<int> p, t;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      if (group != "all" && truth[i] != group) continue;
      p.push_back(predicted[i] == truth[i] ? 1 : 0);
      t.push_back(1);
    }
    std::optional<double> v;
    if (!t.empty()) v = top1_accuracy(p, t);
    out.push_back({"top1", group, "all", "classifier", v});
  }
  return out;
}

ordered_json detections_to_json(const std::vector<int>& image_ids,
                                const std::vector<std::vector<Detection>>& detections) {
  if (image_ids.size() != detections.size()) throw std::invalid_argument("detections_to_json: length mismatch");
  ordered_json out = ordered_json::array();
  for (std::size_t i = 0; i < image_ids.size(); ++i) {
    for (const auto& d : detections[i]) {
      ordered_json e;
      e["image_id"] = image_ids[i];
      e["category_id"] = d.class_id;
      e["bbox"] = {d.box.x0, d.box.y0, d.box.width(), d.box.height()};
      e["score"] = d.score;
      out.push_back(std::move(e));
    }
  }
  return out;
}

std::vector<std::vector<Detection>> detections_from_json(const json& j, const std::vector<int>& image_ids,
                                                         int num_classes) {
  if (!j.is_array()) throw std::runtime_error("detections file must hold a JSON array");
  std::map<int, std::size_t> slot;
  for (std::size_t i = 0; i < image_ids.size(); ++i) slot[image_ids[i]] = i;
  std::vector<std::vector<Detection>> out(image_ids.size());
  for (std::size_t n = 0; n < j.size(); ++n) {
    const auto& e = j[n];
    const std::string where = "detection " + std::to_string(n);
    try {
      const int image_id = e.at("image_id").get<int>();
      const auto it = slot.find(image_id);
      if (it == slot.end()) throw std::runtime_error("unknown image_id " + std::to_string(image_id));
      const int cls = e.at("category_id").get<int>();
      if (cls < 0 || cls >= num_classes) throw std::runtime_error("category_id out of range");
      const auto bbox = e.at("bbox").get<std::vector<double>>();
      if (bbox.size() != 4 || bbox[2] < 0 || bbox[3] < 0) throw std::runtime_error("bbox must be [x,y,w,h], w,h >= 0");
      const double score = e.at("score").get<double>();
      if (!std::isfinite(score)) throw std::runtime_error("non-finite score");
      out[it->second].push_back({cls, score, {bbox[0], bbox[1], bbox[0] + bbox[2], bbox[1] + bbox[3]}});
    } catch (const json::exception& ex) {
      throw std::runtime_error(where + ": " + ex.what());
    } catch (const std::runtime_error& ex) {
      throw std::runtime_error(where + ": " + ex.what());
    }
  }
  return out;
}

}  // namespace rxf
