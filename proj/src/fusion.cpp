#include "rxf/fusion.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>
#include <stdexcept>

namespace rxf {

int default_reduction_ratio(int channels) { return channels >= 16 ? 16 : std::max(1, channels / 4); }

ChannelAttention::ChannelAttention(int channels, int reduction_, Rng& rng) : reduction(reduction_) {
  if (reduction < 1 || channels % reduction != 0) {
    throw std::invalid_argument("channel attention: " + std::to_string(channels) +
                                " channels not divisible by ratio " + std::to_string(reduction));
  }
  const int hidden = channels / reduction;
  w0 = Tensor(Shape{hidden, channels});
  w1 = Tensor(Shape{channels, hidden});
  init_uniform_fan_in(w0, channels, rng);
  init_uniform_fan_in(w1, hidden, rng);
}

void ChannelAttention::collect(ParameterList& out, const std::string& prefix) const {
  out.add(prefix + ".w0", w0);
  out.add(prefix + ".w1", w1);
}

SpatialAttention::SpatialAttention(Rng& rng)
    : kernel(Shape{1, 2, kKernel, kKernel}), bias(Shape{1}) {
  init_uniform_fan_in(kernel, 2 * kKernel * kKernel, rng);
  init_uniform_fan_in(bias, 2 * kKernel * kKernel, rng);
}

void SpatialAttention::collect(ParameterList& out, const std::string& prefix) const {
  out.add(prefix + ".kernel", kernel);
  out.add(prefix + ".bias", bias);
}

EcaAttention::EcaAttention(int width, Rng& rng) : kernel(Shape{width}) {
  if (width < 1 || width % 2 == 0) {
    throw std::invalid_argument("eca attention: kernel width must be odd, got " + std::to_string(width));
  }
  init_uniform_fan_in(kernel, width, rng);
}

void EcaAttention::collect(ParameterList& out, const std::string& prefix) const {
  out.add(prefix + ".kernel", kernel);
}

Tensor channel_attention(const Tensor& features, const ChannelAttention& ca) {
  if (features.rank() != 4 || features.dim(1) != ca.channels()) {
    throw std::invalid_argument("channel_attention: expected " + std::to_string(ca.channels()) +
                                " channels, got shape " + to_string(features.shape()));
  }
  const int B = features.dim(0), C = features.dim(1);
  Tensor avg = linear(linear(global_pool(features, PoolKind::kAvg), ca.w0), ca.w1);
  Tensor mx = linear(linear(global_pool(features, PoolKind::kMax), ca.w0), ca.w1);
  return reshape(sigmoid(avg + mx), {B, C, 1, 1});
}

Tensor spatial_attention(const Tensor& features, const SpatialAttention& sa) {
  Tensor pooled = concat_channels(channel_pool(features, PoolKind::kAvg),
                                  channel_pool(features, PoolKind::kMax));
  return sigmoid(conv2d(pooled, sa.kernel, sa.bias, 1, SpatialAttention::kKernel / 2));
}

Tensor eca_attention(const Tensor& features, const EcaAttention& eca) {
  if (features.rank() != 4) throw std::invalid_argument("eca_attention: expected [B,C,H,W]");
  const int B = features.dim(0), C = features.dim(1);
  if (eca.kernel.dim(0) > C) {
    throw std::invalid_argument("eca_attention: kernel width exceeds channel count");
  }
  return reshape(sigmoid(conv1d_channels(global_pool(features, PoolKind::kAvg), eca.kernel)),
                 {B, C, 1, 1});
}

std::string to_string(AttentionKind kind) { return kind == AttentionKind::kCbam ? "cbam" : "eca"; }

AttentionKind parse_attention_kind(const std::string& name) {
  if (name == "cbam") return AttentionKind::kCbam;
  if (name == "eca") return AttentionKind::kEca;
  throw std::invalid_argument("unknown fusion module kind: " + name);
}

FusionModule::FusionModule(int cf, int level_, AttentionKind kind_, Rng& rng, int reduction,
                           int eca_width)
    : kind(kind_), level(level_), feature_channels(cf) {
  const int c = 2 * cf;
  if (kind == AttentionKind::kCbam) {
    channel = ChannelAttention(c, reduction > 0 ? reduction : default_reduction_ratio(c), rng);
  } else {
    eca = EcaAttention(eca_width, rng);
  }
  spatial = SpatialAttention(rng);
  reduce = Conv2d(c, cf, 1, 1, true, rng);
  // Start as 0.5 * (rgb + x) after two ~0.5 gates: diagonal weight 0.5 / 0.25.
  reduce.weight.values().setZero();
  reduce.bias.values().setZero();
  for (int j = 0; j < cf; ++j) {
    reduce.weight.values()[std::int64_t(j) * c + j] = 2.0;
    reduce.weight.values()[std::int64_t(j) * c + cf + j] = 2.0;
  }
}

void FusionModule::collect(ParameterList& out, const std::string& prefix) const {
  if (kind == AttentionKind::kCbam) {
    channel.collect(out, prefix + ".channel");
  } else {
    eca.collect(out, prefix + ".eca");
  }
  spatial.collect(out, prefix + ".spatial");
  reduce.collect(out, prefix + ".reduce");
}

FusionBank::FusionBank(std::string scene_, int feature_channels, AttentionKind kind,
                       std::uint64_t seed)
    : scene(std::move(scene_)) {
  Rng rng(seed);
  for (int level = 0; level < kFusionLevels; ++level) {
    modules.emplace_back(feature_channels, level, kind, rng);
  }
}

void FusionBank::collect(ParameterList& out, const std::string& prefix) const {
  for (const auto& m : modules) m.collect(out, prefix + ".level" + std::to_string(m.level));
}

ParameterList FusionBank::parameters(const std::string& prefix) const {
  ParameterList out;
  collect(out, prefix);
  return out;
}

FusionBank FusionBank::clone() const {
  FusionBank out = *this;
  for (auto& m : out.modules) {
    for (auto* t : {&m.channel.w0, &m.channel.w1, &m.eca.kernel, &m.spatial.kernel, &m.spatial.bias,
                    &m.reduce.weight, &m.reduce.bias}) {
      if (t->defined()) *t = t->clone();
    }
  }
  return out;
}

Tensor cbam_fuse(const Tensor& rgb, const Tensor& x, const FusionModule& m) {
  if (rgb.shape() != x.shape()) {
    throw std::invalid_argument("cbam_fuse: modality shapes differ: " + to_string(rgb.shape()) +
                                " vs " + to_string(x.shape()));
  }
  if (rgb.dim(1) != m.feature_channels) {
    throw std::invalid_argument("cbam_fuse: module expects " + std::to_string(m.feature_channels) +
                                " channels per modality, got " + std::to_string(rgb.dim(1)));
  }
  Tensor f = concat_channels(rgb, x);
  Tensor gate = m.kind == AttentionKind::kCbam ? channel_attention(f, m.channel) : eca_attention(f, m.eca);
  Tensor f1 = f * gate;
  Tensor f2 = f1 * spatial_attention(f1, m.spatial);
  return m.reduce(f2);
}

ParamCounts param_count(const ParameterList& params) {
  return {params.total_count(), params.trainable_count()};
}

ParamCounts param_count(const FusionModule& m) {
  ParameterList p;
  m.collect(p, "m");
  return param_count(p);
}

ParamCounts param_count(const FusionBank& bank) { return param_count(bank.parameters()); }

Array min_max_normalize(const Array& values) {
  if (values.size() == 0) return values;
  const double lo = values.minCoeff(), hi = values.maxCoeff();
  if (!(hi > lo)) return Array::Zero(values.size());
  return (values - lo) / (hi - lo);
}

ChannelProfile export_channel_attention(const FusionBank& bank, int level,
                                        const std::vector<std::pair<Tensor, Tensor>>& slice) {
  if (slice.empty()) throw std::invalid_argument("export_channel_attention: empty slice");
  if (level < 0 || level >= static_cast<int>(bank.modules.size())) {
    throw std::out_of_range("export_channel_attention: no fusion level " + std::to_string(level));
  }
  const auto& m = bank.modules[level];
  NoGradGuard guard;
  Array acc = Array::Zero(2 * m.feature_channels);
  std::int64_t count = 0;
  for (const auto& [rgb, x] : slice) {
    Tensor f = concat_channels(rgb, x);
    Tensor gate = m.kind == AttentionKind::kCbam ? channel_attention(f, m.channel) : eca_attention(f, m.eca);
    const int B = gate.dim(0);
    const auto C = acc.size();
    for (int b = 0; b < B; ++b) acc += gate.values().segment(b * C, C);
    count += B;
  }
  ChannelProfile profile;
  profile.level = level;
  profile.scene = bank.scene;
  profile.feature_channels = m.feature_channels;
  profile.mean_mask = acc / static_cast<double>(count);
  profile.normalized = min_max_normalize(profile.mean_mask);
  return profile;
}

Tensor cam_heatmap(const Tensor& activations, std::uint64_t seed, int max_iterations,
                   double tolerance) {
  if (activations.rank() != 4 || activations.dim(0) != 1) {
    throw std::invalid_argument("cam_heatmap: expected [1,C,H,W], got " + to_string(activations.shape()));
  }
  const int C = activations.dim(1), H = activations.dim(2), W = activations.dim(3);
  const std::int64_t hw = std::int64_t(H) * W;
  ConstMatrixMap a(activations.data(), C, hw);
  if (a.cwiseAbs().maxCoeff() == 0.0) return Tensor::zeros({H, W});

  Rng rng(seed);
  Eigen::VectorXd v(hw);
  for (auto& e : v) e = rng.uniform(0.5, 1.5);
  v.normalize();
  for (int it = 0; it < max_iterations; ++it) {
    Eigen::VectorXd next = a.transpose() * (a * v);
    const double n = next.norm();
    if (n == 0.0) break;
    next /= n;
    // Iterates may flip sign; compare up to sign.
    const double delta = std::min((next - v).norm(), (next + v).norm());
    v = next;
    if (delta < tolerance) break;
  }
  Eigen::Index idx;
  v.cwiseAbs().maxCoeff(&idx);
  if (v[idx] < 0) v = -v;
  Array out = min_max_normalize(v.array());
  return Tensor({H, W}, std::move(out));
}

void write_profile(std::ostream& os, const ChannelProfile& profile) {
  os << "# level=" << profile.level << " scene=" << profile.scene
     << " channels=" << profile.normalized.size() << '\n';
  os << std::setprecision(17);
  for (Eigen::Index i = 0; i < profile.normalized.size(); ++i) {
    os << profile.modality(static_cast<int>(i)) << ' ' << profile.normalized[i] << '\n';
  }
}

void write_heatmap(std::ostream& os, const Tensor& heatmap, int level, const std::string& scene,
                   int channels) {
  os << "# level=" << level << " scene=" << scene << " channels=" << channels << '\n';
  os << std::setprecision(17);
  for (auto v : heatmap.values()) os << v << '\n';
}

}  // namespace rxf
