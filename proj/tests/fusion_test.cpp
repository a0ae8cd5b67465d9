#include "rxf/fusion.hpp"
#include "rxf/gradcheck.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

using namespace rxf;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

FusionModule zero_attention_module(int cf, Rng& rng) {
  FusionModule m(cf, 0, AttentionKind::kCbam, rng, 2);
  m.channel.w0.values().setZero();
  m.channel.w1.values().setZero();
  m.spatial.kernel.values().setZero();
  m.spatial.bias.values().setZero();
  return m;
}

}  // namespace

TEST(ChannelAttention, ZeroWeightsGiveHalf) {
  Rng rng(1);
  ChannelAttention ca(8, 2, rng);
  ca.w0.values().setZero();
  const Tensor mask = channel_attention(random_tensor({2, 8, 3, 3}, rng), ca);
  EXPECT_EQ(mask.shape(), (Shape{2, 8, 1, 1}));
  EXPECT_TRUE((mask.values() == 0.5).all());
}

TEST(ChannelAttention, IdentityWeightsClosedForm) {
  Rng rng(2);
  ChannelAttention ca(2, 1, rng);
  ca.w0.values() << 1, 0, 0, 1;
  ca.w1.values() << 1, 0, 0, 1;
  Tensor f({1, 2, 2, 2}, {1, 1, 1, 1, -1, -1, -1, -1});
  const Tensor mask = channel_attention(f, ca);
  // avg == max per channel, so the pre-activation is 2 * mean.
  EXPECT_NEAR(mask.values()[0], 0.88079708, 1e-8);
  EXPECT_NEAR(mask.values()[1], 0.11920292, 1e-8);
  EXPECT_DOUBLE_EQ(mask.values()[0], sig(2.0));
}

TEST(ChannelAttention, ConstantChannelsUseDoubledAverage) {
  Rng rng(3);
  ChannelAttention ca(4, 2, rng);
  Tensor f({1, 4, 3, 3});
  const double means[4] = {0.3, -1.2, 2.0, 0.0};
  for (int c = 0; c < 4; ++c) f.values().segment(c * 9, 9).setConstant(means[c]);
  const Tensor mask = channel_attention(f, ca);
  for (int c = 0; c < 4; ++c) {
    double pre = 0;
    for (int h = 0; h < 2; ++h) {
      double hidden = 0;
      for (int j = 0; j < 4; ++j) hidden += ca.w0.at({h, j}) * means[j];
      pre += ca.w1.at({c, h}) * hidden;
    }
    EXPECT_NEAR(mask.values()[c], sig(2 * pre), 1e-14);
  }
  EXPECT_THROW(channel_attention(Tensor({1, 3, 2, 2}), ca), std::invalid_argument);
}

TEST(SpatialAttention, ZeroKernelAndSingleChannel) {
  Rng rng(4);
  SpatialAttention sa(rng);
  Tensor f = random_tensor({2, 3, 5, 4}, rng);
  {
    SpatialAttention zero = sa;
    zero.kernel = Tensor::zeros({1, 2, 7, 7});
    zero.bias = Tensor::zeros({1});
    const Tensor mask = spatial_attention(f, zero);
    EXPECT_EQ(mask.shape(), (Shape{2, 1, 5, 4}));
    EXPECT_TRUE((mask.values() == 0.5).all());
  }
  Tensor single = random_tensor({1, 1, 4, 4}, rng);
  EXPECT_TRUE((channel_pool(single, PoolKind::kAvg).values() ==
               channel_pool(single, PoolKind::kMax).values()).all());
}

TEST(SpatialAttention, MatchesComposedPrimitives) {
  Rng rng(5);
  SpatialAttention sa(rng);
  Tensor f = random_tensor({2, 6, 8, 8}, rng);
  Tensor planes = concat_channels(channel_pool(f, PoolKind::kAvg), channel_pool(f, PoolKind::kMax));
  Tensor oracle = sigmoid(conv2d(planes, sa.kernel, sa.bias, 1, 3));
  EXPECT_TRUE((spatial_attention(f, sa).values() == oracle.values()).all());
}

TEST(EcaAttention, ZeroPointwiseAndLoopOracle) {
  Rng rng(6);
  Tensor f = random_tensor({2, 6, 3, 3}, rng);
  EcaAttention eca(3, rng);
  {
    EcaAttention zero = eca;
    zero.kernel = Tensor::zeros({3});
    EXPECT_TRUE((eca_attention(f, zero).values() == 0.5).all());
  }
  const Tensor avg = global_pool(f, PoolKind::kAvg);
  {
    EcaAttention one(1, rng);
    one.kernel.values()[0] = 0.7;
    const Tensor mask = eca_attention(f, one);
    for (int i = 0; i < 12; ++i) EXPECT_NEAR(mask.values()[i], sig(0.7 * avg.values()[i]), 1e-15);
  }
  const Tensor mask = eca_attention(f, eca);
  for (int b = 0; b < 2; ++b)
    for (int c = 0; c < 6; ++c) {
      double acc = 0;
      for (int j = -1; j <= 1; ++j) {
        if (c + j < 0 || c + j >= 6) continue;
        acc += eca.kernel.values()[j + 1] * avg.at({b, c + j});
      }
      EXPECT_NEAR(mask.at({b, c, 0, 0}), sig(acc), 1e-14);
    }
  EXPECT_THROW(EcaAttention(2, rng), std::invalid_argument);
}

TEST(CbamFuse, OutputShapeMatchesModalityChannels) {
  Rng rng(7);
  FusionModule m(4, 0, AttentionKind::kCbam, rng);
  Tensor a = random_tensor({3, 4, 5, 6}, rng), b = random_tensor({3, 4, 5, 6}, rng);
  EXPECT_EQ(cbam_fuse(a, b, m).shape(), (Shape{3, 4, 5, 6}));
  EXPECT_THROW(cbam_fuse(a, random_tensor({3, 4, 5, 5}, rng), m), std::invalid_argument);
  EXPECT_THROW(cbam_fuse(random_tensor({1, 2, 2, 2}, rng), random_tensor({1, 2, 2, 2}, rng), m),
               std::invalid_argument);
}

TEST(CbamFuse, ZeroAttentionWithAveragingReduce) {
  Rng rng(8);
  FusionModule m = zero_attention_module(4, rng);
  m.reduce.weight.values().setConstant(1.0 / 8);
  m.reduce.bias.values().setZero();
  Tensor a = random_tensor({2, 4, 3, 3}, rng), b = random_tensor({2, 4, 3, 3}, rng);
  const Tensor out = cbam_fuse(a, b, m);
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double mean = 0;
        for (int c = 0; c < 4; ++c) mean += a.at({n, c, i, j}) + b.at({n, c, i, j});
        mean /= 8;
        for (int c = 0; c < 4; ++c) EXPECT_NEAR(out.at({n, c, i, j}), 0.25 * mean, 1e-15);
      }
}

TEST(CbamFuse, AllZeroWeightsLeaveReduceBias) {
  Rng rng(9);
  FusionModule m = zero_attention_module(3, rng);
  m.reduce.weight.values().setZero();
  m.reduce.bias.values() << 0.1, -0.2, 0.3;
  const Tensor out = cbam_fuse(random_tensor({1, 3, 4, 4}, rng), random_tensor({1, 3, 4, 4}, rng), m);
  for (int c = 0; c < 3; ++c) {
    EXPECT_TRUE((out.values().segment(c * 16, 16) == m.reduce.bias.values()[c]).all());
  }
}

TEST(CbamFuse, InitialReduceAveragesModalities) {
  Rng rng(10);
  FusionModule m = zero_attention_module(4, rng);
  FusionModule fresh(4, 0, AttentionKind::kCbam, rng, 2);
  m.reduce = fresh.reduce;
  Tensor a = random_tensor({1, 4, 3, 3}, rng), b = random_tensor({1, 4, 3, 3}, rng);
  const Array want = 0.5 * (a.values() + b.values());
  EXPECT_LT((cbam_fuse(a, b, m).values() - want).abs().maxCoeff(), 1e-14);
}

TEST(CbamFuse, MasksShrinkMagnitudes) {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    FusionModule m(4, 0, AttentionKind::kCbam, rng);
    for (auto* t : {&m.channel.w0, &m.channel.w1, &m.spatial.kernel}) t->values() *= 5.0;
    Tensor f = random_tensor({2, 8, 6, 6}, rng, -3, 3);
    const Tensor mc = channel_attention(f, m.channel);
    EXPECT_TRUE((mc.values() > 0.0).all() && (mc.values() < 1.0).all());
    const Tensor f1 = f * mc;
    const Tensor ms = spatial_attention(f1, m.spatial);
    EXPECT_TRUE((ms.values() > 0.0).all() && (ms.values() < 1.0).all());
    const Tensor f2 = f1 * ms;
    EXPECT_TRUE((f1.values().abs() <= f.values().abs()).all());
    EXPECT_TRUE((f2.values().abs() <= f1.values().abs()).all());
  }
}

TEST(GradientCheck, AttentionBlocksAndFusionModule) {
  Rng rng(12);
  Tensor f = random_tensor({2, 8, 6, 6}, rng);
  Tensor a = random_tensor({2, 4, 6, 6}, rng), b = random_tensor({2, 4, 6, 6}, rng);
  Tensor r = random_tensor({2, 4, 6, 6}, rng);
  Tensor rc = random_tensor({2, 8, 1, 1}, rng);
  Tensor rs = random_tensor({2, 1, 6, 6}, rng);

  ChannelAttention ca(8, 2, rng);
  auto rep = grad_check([&] { return sum(channel_attention(f, ca) * rc); }, {ca.w0, ca.w1, f});
  EXPECT_LT(rep.max_rel_error, 1e-4) << rep.worst;

  SpatialAttention sa(rng);
  rep = grad_check([&] { return sum(spatial_attention(f, sa) * rs); }, {sa.kernel, sa.bias, f});
  EXPECT_LT(rep.max_rel_error, 1e-4) << rep.worst;

  EcaAttention eca(3, rng);
  rep = grad_check([&] { return sum(eca_attention(f, eca) * rc); }, {eca.kernel, f});
  EXPECT_LT(rep.max_rel_error, 1e-4) << rep.worst;

  for (auto kind : {AttentionKind::kCbam, AttentionKind::kEca}) {
    FusionModule m(4, 0, kind, rng, 2);
    ParameterList params;
    m.collect(params, "m");
    std::vector<Tensor> ts = params.trainable();
    ts.push_back(a);
    ts.push_back(b);
    rep = grad_check([&] { return sum(cbam_fuse(a, b, m) * r); }, ts);
    EXPECT_LT(rep.max_rel_error, 1e-4) << to_string(kind) << " " << rep.worst;
  }
}

TEST(ParamCount, AnalyticFormula) {
  Rng rng(13);
  FusionModule m(4, 0, AttentionKind::kCbam, rng, 2);
  const int C = 8, Cf = 4, r = 2;
  const std::int64_t mlp = 2 * C * (C / r), spatial = 2 * 49 + 1, reduce = C * Cf + Cf;
  EXPECT_EQ(mlp, 64);
  EXPECT_EQ(mlp + spatial + reduce, 199);
  EXPECT_EQ(param_count(m).total, 199);
  EXPECT_EQ(param_count(m).trainable, 199);

  FusionBank bank("day", 8, AttentionKind::kCbam, 1);
  const auto per = param_count(bank.modules[0]).total;
  EXPECT_EQ(per, 2 * 16 * 1 + 99 + 16 * 8 + 8);
  EXPECT_EQ(param_count(bank).total, 5 * per);

  ParameterList frozen = bank.parameters();
  frozen.set_frozen(true);
  EXPECT_EQ(param_count(frozen).trainable, 0);
}

TEST(ReductionRatio, Defaults) {
  EXPECT_EQ(default_reduction_ratio(512), 16);
  EXPECT_EQ(default_reduction_ratio(16), 16);
  EXPECT_EQ(default_reduction_ratio(8), 2);
  EXPECT_EQ(default_reduction_ratio(2), 1);
}

TEST(ExportChannelAttention, DegenerateSingleAndAverage) {
  Rng rng(14);
  FusionBank bank("night", 4, AttentionKind::kCbam, 3);
  auto& ca = bank.modules[1].channel;
  Tensor a = random_tensor({1, 4, 2, 2}, rng), b = random_tensor({1, 4, 2, 2}, rng);
  Tensor c = random_tensor({1, 4, 2, 2}, rng), d = random_tensor({1, 4, 2, 2}, rng);

  EXPECT_THROW(export_channel_attention(bank, 1, {}), std::invalid_argument);

  FusionBank constant = bank;
  constant.modules[1].channel.w1 = Tensor::zeros(ca.w1.shape());
  const auto flat = export_channel_attention(constant, 1, {{a, b}});
  EXPECT_TRUE((flat.mean_mask == 0.5).all());
  EXPECT_TRUE((flat.normalized == 0.0).all());

  const auto single = export_channel_attention(bank, 1, {{a, b}});
  const Array mask1 = channel_attention(concat_channels(a, b), ca).values();
  EXPECT_TRUE((single.mean_mask == mask1).all());
  EXPECT_EQ(single.normalized.size(), 8);
  EXPECT_DOUBLE_EQ(single.normalized.minCoeff(), 0.0);
  EXPECT_DOUBLE_EQ(single.normalized.maxCoeff(), 1.0);

  const auto pair = export_channel_attention(bank, 1, {{a, b}, {c, d}});
  const Array mask2 = channel_attention(concat_channels(c, d), ca).values();
  for (int i = 0; i < 8; ++i) EXPECT_NEAR(pair.mean_mask[i], (mask1[i] + mask2[i]) / 2, 1e-15);
  EXPECT_EQ(pair.modality(3), "rgb");
  EXPECT_EQ(pair.modality(4), "x");

  std::ostringstream os;
  write_profile(os, pair);
  std::istringstream is(os.str());
  std::string header;
  std::getline(is, header);
  EXPECT_EQ(header, "# level=1 scene=night channels=8");
  int lines = 0;
  for (std::string line; std::getline(is, line);) ++lines;
  EXPECT_EQ(lines, 8);
}

TEST(CamHeatmap, RankOneConstantAndNegation) {
  // a v^T with v >= 0 and min(v) = 0: heatmap = v / max(v).
  const int C = 3, H = 3, W = 4;
  Array av(C), v(H * W);
  av << 0.5, -2.0, 1.5;
  for (int i = 0; i < H * W; ++i) v[i] = (i * 7) % 5;
  Tensor act({1, C, H, W});
  for (int c = 0; c < C; ++c)
    for (int p = 0; p < H * W; ++p) act.values()[c * H * W + p] = av[c] * v[p];
  const Tensor heat = cam_heatmap(act);
  EXPECT_EQ(heat.shape(), (Shape{H, W}));
  for (int p = 0; p < H * W; ++p) EXPECT_NEAR(heat.values()[p], v[p] / v.maxCoeff(), 1e-9);

  const Tensor neg = cam_heatmap(scale(act, -1.0));
  EXPECT_LT((neg.values() - heat.values()).abs().maxCoeff(), 1e-12);

  const Tensor flat = cam_heatmap(Tensor({1, 2, 3, 3}, 4.0));
  EXPECT_TRUE((flat.values() == flat.values()[0]).all());
  EXPECT_TRUE((cam_heatmap(Tensor({1, 2, 3, 3}, 0.0)).values() == 0.0).all());

  Rng rng(15);
  Tensor r = random_tensor({1, 4, 5, 5}, rng);
  EXPECT_TRUE((cam_heatmap(r).values() == cam_heatmap(r).values()).all());
  EXPECT_GE(cam_heatmap(r).values().minCoeff(), 0.0);
  EXPECT_LE(cam_heatmap(r).values().maxCoeff(), 1.0);
}
