#include "rxf/container.hpp"
#include "rxf/data.hpp"
#include "rxf/random.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

using namespace rxf;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("rxf_data_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

double pooled_std(const std::vector<Tensor>& ts) {
  double s = 0, s2 = 0, n = 0;
  for (const auto& t : ts) {
    s += t.values().sum();
    s2 += t.values().square().sum();
    n += t.numel();
  }
  const double m = s / n;
  return std::sqrt(s2 / n - m * m);
}

}  // namespace

TEST(Container, RoundTripIsBitExact) {
  Rng rng(1);
  Tensor a({2, 3, 4});
  for (auto& v : a.values()) v = rng.normal(0, 1e3);
  a.values()[0] = -0.0;
  a.values()[1] = 1e-310;  // subnormal
  Tensor b({5}, {0.125, 0.25, 1.0, 0.0, 0.75});  // float-exact
  Container c;
  c.add("model.weight", a);
  c.add("image", b, Dtype::kF32);
  c.add("scalar", Tensor({1}, {3.5}));
  c.metadata = {{"seed", 42}, {"taxonomy", {"day", "night"}}, {"head", "th"}};
  const Container d = decode_container(encode_container(c));
  ASSERT_EQ(d.entries.size(), 3u);
  EXPECT_EQ(d.entries[0].name, "model.weight");
  EXPECT_EQ(d.get("model.weight").shape(), a.shape());
  EXPECT_EQ(0, std::memcmp(d.get("model.weight").data(), a.data(), sizeof(double) * a.numel()));
  EXPECT_TRUE(std::signbit(d.get("model.weight").values()[0]));
  EXPECT_TRUE((d.get("image").values() == b.values()).all());
  EXPECT_EQ(d.entries[1].dtype, Dtype::kF32);
  EXPECT_EQ(d.metadata, c.metadata);
  EXPECT_EQ(encode_container(d), encode_container(c));
}

TEST(Container, LayoutHeader) {
  Container c;
  c.add("t", Tensor({1}, {1.0}));
  const std::string bytes = encode_container(c);
  EXPECT_EQ(bytes.substr(0, 4), "RXF1");
  EXPECT_EQ(bytes[4], 1);  // version, little-endian u32
  EXPECT_EQ(bytes[8], 1);  // endianness flag
  EXPECT_EQ(bytes[9], 1);  // tensor count
}

TEST(Container, RejectsBadInput) {
  Container c;
  c.add("t", Tensor({2}, {1.0, 2.0}));
  std::string bytes = encode_container(c);
  std::string future = bytes;
  future[4] = 2;
  EXPECT_THROW(decode_container(future), std::runtime_error);
  EXPECT_THROW(decode_container(bytes.substr(0, bytes.size() - 3)), std::runtime_error);
  EXPECT_THROW(decode_container("XXXX" + bytes.substr(4)), std::runtime_error);
  EXPECT_THROW(decode_container(""), std::runtime_error);
  EXPECT_THROW(c.get("missing"), std::out_of_range);
  EXPECT_THROW(c.add("t", Tensor({1})), std::invalid_argument);
}

TEST(Synth, SameSeedIsBitIdentical) {
  for (const auto& scene : default_taxonomy()) {
    const auto a = generate_sample(scene, 77, 3), b = generate_sample(scene, 77, 3);
    EXPECT_TRUE((a.rgb.values() == b.rgb.values()).all());
    EXPECT_TRUE((a.x.values() == b.x.values()).all());
    EXPECT_EQ(a.gts, b.gts);
    const auto c = generate_sample(scene, 78, 3);
    EXPECT_FALSE((a.rgb.values() == c.rgb.values()).all());
  }
  EXPECT_THROW(generate_sample("snow", 1), std::invalid_argument);
}

TEST(Synth, BoxesAndValuesWellFormed) {
  for (const auto& scene : default_taxonomy()) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      const auto s = generate_sample(scene, seed);
      EXPECT_EQ(s.rgb.shape(), (Shape{3, 128, 128}));
      EXPECT_EQ(s.x.shape(), (Shape{1, 128, 128}));
      ASSERT_GE(s.gts.size(), 1u);
      EXPECT_LE(s.gts.size(), 5u);
      for (const auto& g : s.gts) {
        EXPECT_GE(g.box.x0, 0);
        EXPECT_GE(g.box.y0, 0);
        EXPECT_LE(g.box.x1, 128);
        EXPECT_LE(g.box.y1, 128);
        EXPECT_GT(g.box.area(), 0);
        EXPECT_TRUE(g.class_id == 0 || g.class_id == 1);
      }
      for (const Tensor* t : {&s.rgb, &s.x}) {
        EXPECT_GE(t->values().minCoeff(), 0.0);
        EXPECT_LE(t->values().maxCoeff(), 1.0);
        for (double v : t->values()) ASSERT_EQ(v, static_cast<double>(static_cast<float>(v)));
      }
    }
  }
}

TEST(Synth, NightRgbHasLowSpread) {
  std::vector<Tensor> day, night;
  for (std::uint64_t i = 0; i < 100; ++i) {
    day.push_back(generate_sample("day", mix_seed(5, i)).rgb);
    night.push_back(generate_sample("night", mix_seed(6, i)).rgb);
  }
  EXPECT_LT(pooled_std(night), 0.5 * pooled_std(day));
}

TEST(Synth, EveryObjectStandsOutInSomeModality) {
  for (const auto& scene : default_taxonomy()) {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
      const auto s = generate_sample(scene, mix_seed(9, seed));
      const int S = 128;
      std::vector<bool> object(S * S, false);
      for (const auto& g : s.gts) {
        for (int y = int(g.box.y0); y < int(g.box.y1); ++y)
          for (int x = int(g.box.x0); x < int(g.box.x1); ++x) object[y * S + x] = true;
      }
      for (const auto& g : s.gts) {
        double best = 0;
        for (const auto& [t, name] : {std::pair{&s.rgb, "rgb"}, std::pair{&s.x, "x"}}) {
          const double sigma = scene_noise(scene, name);
          for (int c = 0; c < t->dim(0); ++c) {
            double in = 0, out = 0;
            int n_in = 0, n_out = 0;
            // Central half of the box, away from edges and ellipse corners.
            const double qx = 0.25 * g.box.width(), qy = 0.25 * g.box.height();
            for (int y = 0; y < S; ++y) {
              for (int x = 0; x < S; ++x) {
                const double v = t->values()[(c * S + y) * S + x];
                if (x + 0.5 > g.box.x0 + qx && x + 0.5 < g.box.x1 - qx && y + 0.5 > g.box.y0 + qy &&
                    y + 0.5 < g.box.y1 - qy) {
                  in += v;
                  ++n_in;
                } else if (!object[y * S + x]) {
                  out += v;
                  ++n_out;
                }
              }
            }
            best = std::max(best, std::abs(in / n_in - out / n_out) / sigma);
          }
        }
        EXPECT_GE(best, 3.0) << scene << " seed " << seed;
      }
    }
  }
}

TEST(Dataset, GenerateLoadAndRegenerate) {
  const fs::path a = scratch("a"), b = scratch("b");
  SplitSpec spec;
  spec.train = 10;
  spec.val = 5;
  spec.test = 5;
  spec.seed = 3;
  const Dataset d = generate_dataset(spec, a);
  EXPECT_EQ(d.images.size(), 60u);
  EXPECT_EQ(d.scenes, default_taxonomy());
  std::set<int> all;
  for (const auto& scene : d.scenes) {
    for (const char* split : {"train", "val", "test"}) {
      for (int id : d.split_ids(split, scene)) {
        EXPECT_TRUE(all.insert(id).second);
        EXPECT_EQ(d.image(id).scene, scene);
      }
    }
  }
  EXPECT_EQ(all.size(), 60u);
  EXPECT_EQ(d.split_ids("train").size(), 30u);

  // Loading reproduces the generator exactly.
  const SceneSample loaded = d.load_sample(17);
  const SceneSample fresh = generate_sample(loaded.scene, mix_seed(3, 17), 17);
  EXPECT_TRUE((loaded.rgb.values() == fresh.rgb.values()).all());
  EXPECT_TRUE((loaded.x.values() == fresh.x.values()).all());
  EXPECT_EQ(loaded.gts, fresh.gts);

  generate_dataset(spec, b);
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), a);
    EXPECT_EQ(slurp(entry.path()), slurp(b / rel)) << rel;
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Dataset, ValidationNamesTheImage) {
  const fs::path root = scratch("bad");
  SplitSpec spec;
  spec.scenes = {"night"};
  spec.train = 2;
  spec.val = 1;
  spec.test = 1;
  generate_dataset(spec, root);
  std::string text = slurp(root / "annotations.json");
  nlohmann::json doc = nlohmann::json::parse(text);
  doc["images"][2].erase("scene");
  std::ofstream(root / "annotations.json") << doc.dump();
  try {
    load_dataset(root);
    FAIL() << "expected a validation error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("image 2"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("scene"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_dataset(scratch("nothing")), std::runtime_error);
  fs::remove_all(root);
}

TEST(Dataset, FractionSubsetIsSeededAndStratified) {
  const fs::path root = scratch("frac");
  SplitSpec spec;
  spec.train = 7;
  spec.val = 0;
  spec.test = 0;
  const Dataset d = generate_dataset(spec, root);
  const auto ids = d.split_ids("train");
  const auto half = subsample(d, ids, 0.5, 11);
  EXPECT_EQ(half, subsample(d, ids, 0.5, 11));
  EXPECT_EQ(half.size(), 11u);  // ceil(0.5 * 21)
  std::map<std::string, int> per_scene;
  for (int id : half) per_scene[d.image(id).scene]++;
  for (const auto& [scene, n] : per_scene) EXPECT_TRUE(n == 3 || n == 4) << scene;
  EXPECT_NE(half, subsample(d, ids, 0.5, 12));
  const auto night = d.split_ids("train", "night");
  EXPECT_EQ(subsample(d, night, 0.25, 1).size(), 2u);  // ceil(1.75)
  EXPECT_EQ(subsample(d, ids, 1.0, 1), ids);
  EXPECT_THROW(subsample(d, ids, 0.0, 1), std::invalid_argument);
  fs::remove_all(root);
}
