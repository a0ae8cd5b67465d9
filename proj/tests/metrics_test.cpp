#include "oracles.hpp"
#include "rxf/metrics.hpp"

#include <gtest/gtest.h>

using namespace rxf;

namespace {

std::vector<ScoredFlag> ranked(std::initializer_list<bool> flags) {
  std::vector<ScoredFlag> out;
  double s = 1.0;
  for (bool f : flags) {
    out.push_back({s, f});
    s -= 0.1;
  }
  return out;
}

}  // namespace

TEST(Iou, HandCases) {
  const Box a{0, 0, 2, 2};
  EXPECT_EQ(iou(a, a), 1.0);
  EXPECT_EQ(iou(a, Box{5, 5, 6, 6}), 0.0);
  EXPECT_EQ(iou(a, Box{2, 0, 4, 2}), 0.0);  // touching edges
  EXPECT_DOUBLE_EQ(iou(a, Box{1, 0, 3, 2}), 1.0 / 3.0);
  EXPECT_EQ(iou(a, Box{1, 1, 1, 3}), 0.0);  // zero area
}

TEST(Iou, PropertiesOnRandomBoxes) {
  Rng rng(1);
  for (int i = 0; i < 2000; ++i) {
    const double x = rng.uniform(0, 10), y = rng.uniform(0, 10);
    const Box a{x, y, x + rng.uniform(0.1, 5), y + rng.uniform(0.1, 5)};
    const double u = rng.uniform(0, 10), v = rng.uniform(0, 10);
    const Box b{u, v, u + rng.uniform(0.1, 5), v + rng.uniform(0.1, 5)};
    const double ab = iou(a, b);
    EXPECT_EQ(ab, iou(b, a));
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 1.0);
    EXPECT_NEAR(ab, oracle::iou(a, b), 1e-12);
  }
}

TEST(Match, HandCases) {
  const std::vector<Box> gt{{0, 0, 10, 10}};
  // IoU 0.6 against threshold 0.5.
  const auto one = match({{0, 0.9, {0, 0, 10, 6}}}, gt, 0.5);
  EXPECT_EQ(one.flags[0], MatchFlag::kTruePositive);
  EXPECT_EQ(one.unmatched_gt, 0);
  const auto two = match({{0, 0.4, {0, 0, 10, 10}}, {0, 0.8, {0, 0, 10, 9}}}, gt, 0.5);
  EXPECT_EQ(two.flags[1], MatchFlag::kTruePositive);
  EXPECT_EQ(two.flags[0], MatchFlag::kFalsePositive);
  const auto none = match({}, gt, 0.5);
  EXPECT_EQ(none.unmatched_gt, 1);
}

TEST(Match, CrossingAssignmentFollowsGreedyRule) {
  // The top detection overlaps both ground truths and takes the better one,
  // leaving the second detection to the other ground truth.
  const std::vector<Box> gts{{0, 0, 10, 10}, {4, 0, 14, 10}};
  const std::vector<Detection> dets{{0, 0.9, {3, 0, 13, 10}}, {0, 0.8, {1, 0, 11, 10}}};
  const auto got = match(dets, gts, 0.5);
  std::vector<oracle::Flag> flags;
  const auto expect = oracle::match(dets, gts, 0.5, {false, false}, &flags);
  EXPECT_EQ(got.matched_gt, expect);
  EXPECT_EQ(got.matched_gt[0], 1);
  EXPECT_EQ(got.matched_gt[1], 0);
}

TEST(Match, IgnoreRegionsCountNeither) {
  const std::vector<Box> gts{{0, 0, 10, 10}};
  const auto r = match({{0, 0.9, {0, 0, 10, 10}}}, gts, 0.5, {true});
  EXPECT_EQ(r.flags[0], MatchFlag::kIgnored);
  EXPECT_EQ(r.num_gt, 0);
}

TEST(AveragePrecision, DocumentedCases) {
  EXPECT_EQ(average_precision(ranked({true}), 1), 1.0);
  EXPECT_EQ(average_precision(ranked({false}), 1), 0.0);
  EXPECT_EQ(average_precision({}, 1), 0.0);
  // TP, FP, TP with two ground truths.
  EXPECT_NEAR(average_precision(ranked({true, false, true}), 2, ApInterpolation::kAllPoint),
              (1.0 + 2.0 / 3.0) / 2.0, 1e-15);
  // 101-point sampling: 51 recall points at 1, 50 at 2/3.
  EXPECT_NEAR(average_precision(ranked({true, false, true}), 2, ApInterpolation::kCoco101),
              (51.0 + 50.0 * 2.0 / 3.0) / 101.0, 1e-15);
  EXPECT_NEAR(average_precision(ranked({true, false, true}), 2, ApInterpolation::kKitti40),
              (20.0 + 20.0 * 2.0 / 3.0) / 40.0, 1e-15);
  EXPECT_THROW(average_precision({}, 0), std::invalid_argument);
}

TEST(AveragePrecision, RemovingFalsePositiveNeverHurts) {
  Rng rng(2);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<ScoredFlag> list;
    const int n = rng.uniform_int(1, 12);
    int tps = 0;
    for (int i = 0; i < n; ++i) {
      list.push_back({rng.uniform(), rng.uniform() < 0.5});
      tps += list.back().true_positive;
    }
    const int num_gt = tps + rng.uniform_int(0, 3);
    if (num_gt == 0) continue;
    for (std::size_t i = 0; i < list.size(); ++i) {
      if (list[i].true_positive) continue;
      auto shorter = list;
      shorter.erase(shorter.begin() + i);
      for (auto mode : {ApInterpolation::kAllPoint, ApInterpolation::kCoco101, ApInterpolation::kKitti40}) {
        EXPECT_GE(average_precision(shorter, num_gt, mode) + 1e-12, average_precision(list, num_gt, mode));
      }
    }
  }
}

TEST(MapAt, PerfectDetectorAndSingleThreshold) {
  GroundTruthSet gts{{{0, {0, 0, 20, 20}}, {1, {30, 30, 60, 50}}}, {{1, {5, 5, 40, 40}}}};
  DetectionSet perfect(2);
  for (std::size_t i = 0; i < gts.size(); ++i) {
    for (const auto& g : gts[i]) perfect[i].push_back({g.class_id, 0.9, g.box});
  }
  EXPECT_EQ(map_at(perfect, gts, 2, {0.5}), 1.0);
  EXPECT_EQ(map_at(perfect, gts, 2, coco_thresholds()), 1.0);
  EXPECT_EQ(map_at(perfect, gts, 2, {0.75}), 1.0);
  EXPECT_FALSE(map_at(perfect, GroundTruthSet(2), 2, {0.5}).has_value());

  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const auto inst = oracle::random_instance(rng);
    const auto aps = per_class_ap(inst.dets, inst.gts, 2, 0.5);
    double sum = 0;
    int n = 0;
    for (const auto& ap : aps) {
      if (ap) {
        sum += *ap;
        ++n;
      }
    }
    const auto m = map_at(inst.dets, inst.gts, 2, {0.5});
    ASSERT_EQ(m.has_value(), n > 0);
    if (m) {
      EXPECT_EQ(*m, sum / n);
    }
  }
}

TEST(KittiAp, BucketRules) {
  EXPECT_EQ(coco_thresholds().size(), 10u);
  const auto buckets = kitti_buckets();
  ASSERT_EQ(buckets.size(), 3u);
  EXPECT_EQ(buckets[0].name, "easy");
  const GroundTruthSet easy_gt{{{0, {0, 0, 50, 50}}}};
  const DetectionSet hit{{{0, 0.8, {0, 0, 50, 50}}}};
  EXPECT_EQ(kitti_ap(hit, easy_gt, 2, buckets[0]), 1.0);
  // A 20 px object is hard-only: it does not count for easy.
  const GroundTruthSet hard_only{{{0, {0, 0, 20, 20}}}};
  EXPECT_FALSE(kitti_ap(hit, hard_only, 2, buckets[0]).has_value());
  EXPECT_FALSE(kitti_ap(DetectionSet{{{0, 0.8, {0, 0, 20, 20}}}}, hard_only, 2, buckets[0]).has_value());
  EXPECT_EQ(kitti_ap(DetectionSet{{{0, 0.8, {0, 0, 20, 20}}}}, hard_only, 2, buckets[2]), 1.0);
  // Mixed: detecting the small box does not add a false positive for easy.
  const GroundTruthSet mixed{{{0, {0, 0, 50, 50}}, {0, {60, 60, 80, 80}}}};
  const DetectionSet both{{{0, 0.9, {60, 60, 80, 80}}, {0, 0.8, {0, 0, 50, 50}}}};
  EXPECT_EQ(kitti_ap(both, mixed, 2, buckets[0]), 1.0);
  // Heights scale with the image size.
  EXPECT_FALSE(kitti_ap(hit, easy_gt, 2, buckets[0], 256).has_value());
}

TEST(Top1Accuracy, Cases) {
  EXPECT_EQ(top1_accuracy({0, 1, 2}, {0, 1, 2}), 100.0);
  EXPECT_EQ(top1_accuracy({1, 2}, {0, 1}), 0.0);
  EXPECT_EQ(top1_accuracy({0, 1, 2, 2}, {0, 1, 2, 0}), 75.0);
  EXPECT_THROW(top1_accuracy({}, {}), std::invalid_argument);
  EXPECT_THROW(top1_accuracy({0}, {0, 1}), std::invalid_argument);
}

TEST(Oracles, ThousandRandomInstancesAgree) {
  const auto rep = oracle::check_metrics(2024, 1000, 1e-9);
  EXPECT_EQ(rep.instances, 1000);
  EXPECT_EQ(rep.iou_failures, 0);
  EXPECT_EQ(rep.match_failures, 0);
  EXPECT_EQ(rep.ap_failures, 0);
  EXPECT_EQ(rep.kitti_failures, 0);
  EXPECT_LE(rep.max_error, 1e-9);
}
