#pragma once

#include "rxf/box.hpp"
#include "rxf/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace rxf {

inline const std::vector<std::string>& default_taxonomy() {
  static const std::vector<std::string> t{"day", "night", "fog"};
  return t;
}

inline const std::vector<std::string>& class_names() {
  static const std::vector<std::string> n{"rect", "ellipse"};
  return n;
}

struct SceneSample {
  int id = 0;
  std::string scene;
  Tensor rgb;  // [3,H,W] in [0,1]
  Tensor x;    // [1,H,W] in [0,1]
  std::vector<GroundTruth> gts;
  std::uint64_t seed = 0;
};

/// Per-pixel noise standard deviation the generator adds to a modality
/// ("rgb" or "x") in a scene.
double scene_noise(const std::string& scene, const std::string& modality);

/// Deterministic in (scene, seed, id). Pixel values are rounded to float
/// precision so that f32 storage round-trips exactly. Throws on unknown scene.
SceneSample generate_sample(const std::string& scene, std::uint64_t seed, int id = 0, int image_size = 128);

struct SplitSpec {
  std::vector<std::string> scenes = default_taxonomy();
  int train = 200, val = 50, test = 50;  // per scene
  std::uint64_t seed = 42;
  int image_size = 128;
};

struct ImageRecord {
  int id = 0;
  std::string file;  // relative to the dataset root
  int width = 0, height = 0;
  std::string scene;
  std::vector<GroundTruth> gts;
};

struct SceneSplits {
  std::vector<int> train, val, test;
};

struct Dataset {
  std::filesystem::path root;
  std::vector<std::string> scenes;
  std::vector<ImageRecord> images;  // ascending id
  std::map<std::string, SceneSplits> splits;

  const ImageRecord& image(int id) const;
  int scene_index(const std::string& scene) const;  // -1 if absent
  /// Ids of `split` ("train", "val", "test") for one scene, or all scenes in
  /// taxonomy order when `scene` is empty.
  std::vector<int> split_ids(const std::string& split, const std::string& scene = "") const;
  /// Reads the image tensors of one sample.
  SceneSample load_sample(int id) const;
};

/// Writes annotations.json, images/<id>.rxf and <scene>/{train,val,test}.ids.
/// Ids are dense from 0 in (scene, split) order; sample seed = mix(seed, id).
Dataset generate_dataset(const SplitSpec& spec, const std::filesystem::path& out);

/// Validates and loads annotations and manifests; throws std::runtime_error
/// with a diagnostic naming the offending image or field.
Dataset load_dataset(const std::filesystem::path& root);

/// Seeded subset of ceil(fraction * N) ids, allocated across scenes by largest
/// remainder so every scene keeps its share. Returned ids ascend.
std::vector<int> subsample(const Dataset& data, const std::vector<int>& ids, double fraction,
                           std::uint64_t seed);

}  // namespace rxf
