#include "rxf/data.hpp"

#include "rxf/container.hpp"
#include "rxf/random.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

namespace rxf {

namespace {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

constexpr const char* kSplitNames[3] = {"train", "val", "test"};

struct SceneLook {
  double rgb_noise;
  double x_noise;
  double x_background;
  double x_object[2];
  double cold_fraction;  // objects at ambient temperature, invisible in X
  int lamps;             // night only: lit pools in an otherwise dark frame
};

// Thermal contrast is weakest in daylight, when the background is warm and
// some objects sit at ambient temperature (thermal crossover).
const std::map<std::string, SceneLook>& scene_looks() {
  static const std::map<std::string, SceneLook> looks{
      {"day", {0.01, 0.12, 0.45, {0.75, 0.65}, 0.3, 0}},
      {"night", {0.10, 0.03, 0.15, {0.80, 0.60}, 0.0, 2}},
      {"fog", {0.01, 0.03, 0.30, {0.80, 0.60}, 0.3, 0}},
  };
  return looks;
}

const SceneLook& look_for(const std::string& scene) {
  const auto it = scene_looks().find(scene);
  if (it == scene_looks().end()) throw std::invalid_argument("unknown scene: " + scene);
  return it->second;
}

struct Wave {
  double amp, fx, fy, phase;
  double at(int y, int x) const { return amp * std::sin(2 * std::numbers::pi * (fx * x + fy * y) + phase); }
};

Wave random_wave(Rng& rng, double lo, double hi) {
  return {rng.uniform(lo, hi), rng.uniform(-0.06, 0.06), rng.uniform(-0.06, 0.06),
          rng.uniform(0, 2 * std::numbers::pi)};
}

bool covers(const GroundTruth& g, int y, int x) {
  const double px = x + 0.5, py = y + 0.5;
  if (px < g.box.x0 || px >= g.box.x1 || py < g.box.y0 || py >= g.box.y1) return false;
  if (g.class_id == 0) return true;
  const double rx = 0.5 * g.box.width(), ry = 0.5 * g.box.height();
  const double dx = (px - g.box.cx()) / rx, dy = (py - g.box.cy()) / ry;
  return dx * dx + dy * dy <= 1.0;
}

double to_float_precision(double v) { return static_cast<double>(static_cast<float>(std::clamp(v, 0.0, 1.0))); }

std::string read_text(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw std::runtime_error("cannot open " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << text;
  if (!os) throw std::runtime_error("failed writing " + p.string());
}

}  // namespace

double scene_noise(const std::string& scene, const std::string& modality) {
  const auto& look = look_for(scene);
  if (modality == "rgb") return look.rgb_noise;
  if (modality == "x") return look.x_noise;
  throw std::invalid_argument("unknown modality: " + modality);
}

SceneSample generate_sample(const std::string& scene, std::uint64_t seed, int id, int S) {
  const SceneLook& look = look_for(scene);
  if (S < 64) throw std::invalid_argument("generate_sample: image size too small");
  Rng rng(seed);
  SceneSample s;
  s.id = id;
  s.scene = scene;
  s.seed = seed;

  const double unit = S / 128.0;
  const int lo = static_cast<int>(std::lround(16 * unit)), hi = static_cast<int>(std::lround(48 * unit));
  const int wanted = rng.uniform_int(1, 5);
  for (int attempt = 0; attempt < 200 && static_cast<int>(s.gts.size()) < wanted; ++attempt) {
    const int w = rng.uniform_int(lo, hi);
    const int h = rng.uniform_int(std::max(lo, w / 2), std::min(hi, 2 * w));
    const int x = rng.uniform_int(0, S - w), y = rng.uniform_int(0, S - h);
    const int cls = rng.uniform_int(0, 1);
    const Box box{double(x), double(y), double(x + w), double(y + h)};
    // Keep a 2 px gap between objects.
    const Box grown{box.x0 - 2, box.y0 - 2, box.x1 + 2, box.y1 + 2};
    bool clear = true;
    for (const auto& g : s.gts) clear &= iou(grown, g.box) == 0.0;
    if (clear) s.gts.push_back({cls, box});
  }

  // Clean appearance.
  const double gray = rng.uniform(0.25, 0.75);
  double tint[3];
  for (double& t : tint) t = rng.uniform(-0.06, 0.06);
  const Wave w1 = random_wave(rng, 0.03, 0.08), w2 = random_wave(rng, 0.03, 0.08);
  const Wave xw = random_wave(rng, 0.02, 0.05);
  static const double kColor[2][3] = {{0.85, 0.20, 0.15}, {0.15, 0.30, 0.85}};
  std::vector<std::array<double, 3>> colors;
  std::vector<double> heat;
  std::vector<bool> cold;
  for (const auto& g : s.gts) {
    std::array<double, 3> c;
    for (int k = 0; k < 3; ++k) c[k] = kColor[g.class_id][k] + rng.uniform(-0.07, 0.07);
    colors.push_back(c);
    heat.push_back(look.x_object[g.class_id] + rng.uniform(-0.04, 0.04));
    cold.push_back(rng.uniform() < look.cold_fraction);
  }
  struct Lamp {
    double x, y, r;
  };
  std::vector<Lamp> lamps;
  for (int i = 0; i < look.lamps; ++i) {
    lamps.push_back({rng.uniform(0, S), rng.uniform(0, S), rng.uniform(15, 30) * unit});
  }

  const std::int64_t hw = std::int64_t(S) * S;
  Array rgb(3 * hw), xc(hw);
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      const std::int64_t p = std::int64_t(y) * S + x;
      const double texture = w1.at(y, x) + w2.at(y, x);
      for (int k = 0; k < 3; ++k) rgb[k * hw + p] = gray + tint[k] + texture;
      xc[p] = look.x_background + xw.at(y, x);
      for (std::size_t o = 0; o < s.gts.size(); ++o) {
        if (!covers(s.gts[o], y, x)) continue;
        for (int k = 0; k < 3; ++k) rgb[k * hw + p] = colors[o][k];
        if (!cold[o]) xc[p] = heat[o];
      }
    }
  }

  // Scene-dependent degradation.
  Array xo(hw);
  if (scene == "fog") {
    for (int y = 0; y < S; ++y) {
      for (int x = 0; x < S; ++x) {
        double acc = 0;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = std::clamp(y + dy, 0, S - 1), xx = std::clamp(x + dx, 0, S - 1);
            acc += xc[std::int64_t(yy) * S + xx];
          }
        }
        xo[std::int64_t(y) * S + x] = acc / 9.0;
      }
    }
  } else {
    xo = xc;
  }
  for (int k = 0; k < 3; ++k) {
    for (int y = 0; y < S; ++y) {
      // Far (top) rows are foggier; the blend averages 70% toward gray.
      const double alpha = std::min(0.95, 0.7 * (1.3 - 0.6 * y / (S - 1.0)));
      for (int x = 0; x < S; ++x) {
        double& v = rgb[k * hw + std::int64_t(y) * S + x];
        if (scene == "night") {
          // Contrast x0.15 inside lamp pools, dimmer still away from them.
          double light = 0.2;
          for (const auto& l : lamps) {
            const double d2 = (x + 0.5 - l.x) * (x + 0.5 - l.x) + (y + 0.5 - l.y) * (y + 0.5 - l.y);
            light = std::max(light, std::exp(-0.5 * d2 / (l.r * l.r)));
          }
          v *= 0.15 * light;
        }
        if (scene == "fog") v = (1 - alpha) * v + alpha * 0.6;
        v = to_float_precision(v + rng.normal(0.0, look.rgb_noise));
      }
    }
  }
  for (auto& v : xo) v = to_float_precision(v + rng.normal(0.0, look.x_noise));

  s.rgb = Tensor({3, S, S}, std::move(rgb));
  s.x = Tensor({1, S, S}, std::move(xo));
  return s;
}

const ImageRecord& Dataset::image(int id) const {
  const auto it = std::lower_bound(images.begin(), images.end(), id,
                                   [](const ImageRecord& r, int v) { return r.id < v; });
  if (it == images.end() || it->id != id) throw std::out_of_range("dataset has no image " + std::to_string(id));
  return *it;
}

int Dataset::scene_index(const std::string& scene) const {
  const auto it = std::find(scenes.begin(), scenes.end(), scene);
  return it == scenes.end() ? -1 : static_cast<int>(it - scenes.begin());
}

std::vector<int> Dataset::split_ids(const std::string& split, const std::string& scene) const {
  auto pick = [&](const SceneSplits& s) -> const std::vector<int>& {
    if (split == "train") return s.train;
    if (split == "val") return s.val;
    if (split == "test") return s.test;
    throw std::invalid_argument("unknown split: " + split);
  };
  std::vector<int> out;
  for (const auto& name : scenes) {
    if (!scene.empty() && name != scene) continue;
    const auto it = splits.find(name);
    if (it == splits.end()) continue;
    const auto& ids = pick(it->second);
    out.insert(out.end(), ids.begin(), ids.end());
  }
  if (!scene.empty() && scene_index(scene) < 0) throw std::invalid_argument("unknown scene: " + scene);
  return out;
}

SceneSample Dataset::load_sample(int id) const {
  const ImageRecord& rec = image(id);
  const Container c = load_container(root / rec.file);
  SceneSample s;
  s.id = id;
  s.scene = rec.scene;
  s.gts = rec.gts;
  s.rgb = c.get("rgb");
  s.x = c.get("x");
  const Shape want_rgb{3, rec.height, rec.width}, want_x{1, rec.height, rec.width};
  if (s.rgb.shape() != want_rgb || s.x.shape() != want_x) {
    throw std::runtime_error("image " + std::to_string(id) + ": tensor shapes " + to_string(s.rgb.shape()) +
                             "/" + to_string(s.x.shape()) + " do not match annotated size");
  }
  return s;
}

Dataset generate_dataset(const SplitSpec& spec, const std::filesystem::path& out) {
  for (const auto& scene : spec.scenes) look_for(scene);
  if (spec.train < 0 || spec.val < 0 || spec.test < 0) throw std::invalid_argument("negative split count");
  std::filesystem::create_directories(out / "images");

  ordered_json images = ordered_json::array(), annotations = ordered_json::array();
  int next_id = 0, next_ann = 0;
  const int counts[3] = {spec.train, spec.val, spec.test};
  for (const auto& scene : spec.scenes) {
    std::filesystem::create_directories(out / scene);
    for (int split = 0; split < 3; ++split) {
      std::string manifest;
      for (int k = 0; k < counts[split]; ++k) {
        const int id = next_id++;
        const SceneSample s = generate_sample(scene, mix_seed(spec.seed, id), id, spec.image_size);
        const std::string file = "images/" + std::to_string(id) + ".rxf";
        Container c;
        c.add("rgb", s.rgb, Dtype::kF32);
        c.add("x", s.x, Dtype::kF32);
        c.metadata = {{"id", id}, {"scene", scene}};
        save_container(out / file, c);
        images.push_back({{"id", id}, {"file", file}, {"width", spec.image_size},
                          {"height", spec.image_size}, {"scene", scene}});
        for (const auto& g : s.gts) {
          annotations.push_back({{"id", next_ann++}, {"image_id", id}, {"category_id", g.class_id},
                                 {"bbox", {g.box.x0, g.box.y0, g.box.width(), g.box.height()}}});
        }
        manifest += std::to_string(id) + "\n";
      }
      write_text(out / scene / (std::string(kSplitNames[split]) + ".ids"), manifest);
    }
  }
  ordered_json categories = ordered_json::array();
  for (std::size_t i = 0; i < class_names().size(); ++i) {
    categories.push_back({{"id", i}, {"name", class_names()[i]}});
  }
  ordered_json doc;
  doc["info"] = {{"seed", spec.seed}, {"scenes", spec.scenes}, {"image_size", spec.image_size}};
  doc["images"] = images;
  doc["annotations"] = annotations;
  doc["categories"] = categories;
  write_text(out / "annotations.json", doc.dump(1) + "\n");
  return load_dataset(out);
}

Dataset load_dataset(const std::filesystem::path& root) {
  const auto ann_path = root / "annotations.json";
  if (!std::filesystem::exists(ann_path)) throw std::runtime_error("missing " + ann_path.string());
  json doc;
  try {
    doc = json::parse(read_text(ann_path));
  } catch (const json::parse_error& e) {
    throw std::runtime_error(ann_path.string() + ": invalid JSON: " + e.what());
  }
  auto fail = [](const std::string& where, const std::string& what) {
    throw std::runtime_error(where + ": " + what);
  };
  for (const char* key : {"images", "annotations", "categories"}) {
    if (!doc.contains(key) || !doc[key].is_array()) fail("annotations.json", std::string("missing array '") + key + "'");
  }
  const int num_classes = static_cast<int>(doc["categories"].size());

  Dataset d;
  d.root = root;
  if (doc.contains("info") && doc["info"].contains("scenes")) {
    d.scenes = doc["info"]["scenes"].get<std::vector<std::string>>();
  }
  const bool declared = !d.scenes.empty();
  std::map<int, std::size_t> index;
  for (std::size_t i = 0; i < doc["images"].size(); ++i) {
    const json& im = doc["images"][i];
    if (!im.contains("id") || !im["id"].is_number_integer()) {
      fail("images[" + std::to_string(i) + "]", "missing integer field 'id'");
    }
    ImageRecord r;
    r.id = im["id"].get<int>();
    const std::string where = "image " + std::to_string(r.id);
    for (const char* key : {"file", "scene"}) {
      if (!im.contains(key) || !im[key].is_string()) fail(where, std::string("missing string field '") + key + "'");
    }
    for (const char* key : {"width", "height"}) {
      if (!im.contains(key) || !im[key].is_number_integer() || im[key].get<int>() <= 0) {
        fail(where, std::string("missing positive integer field '") + key + "'");
      }
    }
    r.file = im["file"].get<std::string>();
    r.scene = im["scene"].get<std::string>();
    r.width = im["width"].get<int>();
    r.height = im["height"].get<int>();
    if (std::find(d.scenes.begin(), d.scenes.end(), r.scene) == d.scenes.end()) {
      if (declared) fail(where, "scene '" + r.scene + "' is not in the declared taxonomy");
      d.scenes.push_back(r.scene);
    }
    if (index.count(r.id)) fail(where, "duplicate id");
    index[r.id] = d.images.size();
    d.images.push_back(std::move(r));
  }
  for (std::size_t i = 0; i < doc["annotations"].size(); ++i) {
    const json& a = doc["annotations"][i];
    const std::string where = "annotations[" + std::to_string(i) + "]";
    if (!a.contains("image_id") || !a["image_id"].is_number_integer()) fail(where, "missing integer field 'image_id'");
    const int image_id = a["image_id"].get<int>();
    const auto it = index.find(image_id);
    if (it == index.end()) fail(where, "refers to unknown image " + std::to_string(image_id));
    ImageRecord& r = d.images[it->second];
    const std::string img_where = where + " (image " + std::to_string(image_id) + ")";
    if (!a.contains("category_id") || !a["category_id"].is_number_integer()) {
      fail(img_where, "missing integer field 'category_id'");
    }
    const int cls = a["category_id"].get<int>();
    if (cls < 0 || cls >= num_classes) fail(img_where, "category_id " + std::to_string(cls) + " out of range");
    if (!a.contains("bbox") || !a["bbox"].is_array() || a["bbox"].size() != 4) {
      fail(img_where, "field 'bbox' must be [x, y, w, h]");
    }
    const auto b = a["bbox"].get<std::vector<double>>();
    if (!(b[2] > 0 && b[3] > 0) || b[0] < 0 || b[1] < 0 || b[0] + b[2] > r.width || b[1] + b[3] > r.height) {
      fail(img_where, "bbox outside the image or with non-positive size");
    }
    r.gts.push_back({cls, Box{b[0], b[1], b[0] + b[2], b[1] + b[3]}});
  }
  std::sort(d.images.begin(), d.images.end(), [](const auto& a, const auto& b) { return a.id < b.id; });

  std::set<int> seen;
  for (const auto& scene : d.scenes) {
    SceneSplits s;
    std::vector<int>* lists[3] = {&s.train, &s.val, &s.test};
    for (int k = 0; k < 3; ++k) {
      const auto path = root / scene / (std::string(kSplitNames[k]) + ".ids");
      if (!std::filesystem::exists(path)) fail(scene, "missing split manifest " + path.string());
      std::istringstream is(read_text(path));
      std::string line;
      while (std::getline(is, line)) {
        if (line.empty()) continue;
        int id = 0;
        try {
          id = std::stoi(line);
        } catch (const std::exception&) {
          fail(path.string(), "bad id '" + line + "'");
        }
        if (!index.count(id)) fail(path.string(), "unknown image " + std::to_string(id));
        if (d.image(id).scene != scene) fail(path.string(), "image " + std::to_string(id) + " belongs to scene " + d.image(id).scene);
        if (!seen.insert(id).second) fail(path.string(), "image " + std::to_string(id) + " listed in two splits");
        lists[k]->push_back(id);
      }
    }
    d.splits[scene] = std::move(s);
  }
  return d;
}

std::vector<int> subsample(const Dataset& data, const std::vector<int>& ids, double fraction,
                           std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("fraction must be in (0, 1], got " + std::to_string(fraction));
  }
  std::vector<std::vector<int>> groups(data.scenes.size());
  for (int id : ids) {
    const int s = data.scene_index(data.image(id).scene);
    groups[s].push_back(id);
  }
  const std::int64_t total = static_cast<std::int64_t>(std::ceil(fraction * ids.size() - 1e-9));
  std::vector<std::int64_t> quota(groups.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::int64_t assigned = 0;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double exact = fraction * groups[g].size();
    quota[g] = static_cast<std::int64_t>(std::floor(exact + 1e-9));
    assigned += quota[g];
    remainders.push_back({exact - quota[g], g});
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < total && k < remainders.size(); ++k) {
    const std::size_t g = remainders[k].second;
    if (quota[g] < static_cast<std::int64_t>(groups[g].size())) {
      ++quota[g];
      ++assigned;
    }
  }
  std::vector<int> out;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    auto& v = groups[g];
    Rng rng(mix_seed(seed, g));
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[rng.uniform_int(0, static_cast<int>(i) - 1)]);
    }
    out.insert(out.end(), v.begin(), v.begin() + quota[g]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace rxf
