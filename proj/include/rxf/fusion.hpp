#pragma once

#include "rxf/nn.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace rxf {

/// Reduction ratio used for a channel-attention MLP over `channels` inputs:
/// 16 when channels >= 16, else max(1, channels / 4).
int default_reduction_ratio(int channels);

/// Shared bottleneck MLP (no biases) producing a per-channel gate.
struct ChannelAttention {
  Tensor w0;  // [C/r, C]
  Tensor w1;  // [C, C/r]
  int reduction = 1;

  ChannelAttention() = default;
  ChannelAttention(int channels, int reduction, Rng& rng);
  int channels() const { return w0.dim(1); }
  void collect(ParameterList& out, const std::string& prefix) const;
};

/// 7x7 convolution over the stacked channel-mean and channel-max planes.
struct SpatialAttention {
  static constexpr int kKernel = 7;
  Tensor kernel;  // [1,2,7,7]
  Tensor bias;    // [1]

  SpatialAttention() = default;
  explicit SpatialAttention(Rng& rng);
  void collect(ParameterList& out, const std::string& prefix) const;
};

/// Efficient channel attention: 1-D conv over the pooled channel descriptor.
struct EcaAttention {
  Tensor kernel;  // [k], k odd

  EcaAttention() = default;
  EcaAttention(int width, Rng& rng);
  void collect(ParameterList& out, const std::string& prefix) const;
};

/// sigma(W1 W0 avg + W1 W0 max) per batch element -> [B,C,1,1].
Tensor channel_attention(const Tensor& features, const ChannelAttention& ca);

/// sigma(conv7x7([mean_c; max_c])) -> [B,1,H,W].
Tensor spatial_attention(const Tensor& features, const SpatialAttention& sa);

/// sigma(conv1d_k(avg)) -> [B,C,1,1].
Tensor eca_attention(const Tensor& features, const EcaAttention& eca);

enum class AttentionKind { kCbam, kEca };

std::string to_string(AttentionKind kind);
AttentionKind parse_attention_kind(const std::string& name);

/// Fuses two same-scale feature maps of Cf channels each into Cf channels:
/// channel gate, then spatial gate on the 2Cf concatenation, then a 1x1
/// reduction back to Cf.
struct FusionModule {
  AttentionKind kind = AttentionKind::kCbam;
  int level = 0;
  int feature_channels = 0;  // Cf
  ChannelAttention channel;  // used when kind == kCbam
  EcaAttention eca;          // used when kind == kEca
  SpatialAttention spatial;
  Conv2d reduce;             // 1x1, 2Cf -> Cf, with bias

  FusionModule() = default;
  FusionModule(int feature_channels, int level, AttentionKind kind, Rng& rng,
               int reduction = 0, int eca_width = 3);
  void collect(ParameterList& out, const std::string& prefix) const;
};

inline constexpr int kFusionLevels = 5;

struct FusionBank {
  std::string scene;  // scene label or "agnostic"
  std::vector<FusionModule> modules;

  FusionBank() = default;
  FusionBank(std::string scene, int feature_channels, AttentionKind kind, std::uint64_t seed);
  void collect(ParameterList& out, const std::string& prefix) const;
  ParameterList parameters(const std::string& prefix = "fusion") const;
  /// Copies share tensors; this does not.
  FusionBank clone() const;
};

/// Returns reduce(M_s(F') * F') with F' = M_c(F) * F, F = [rgb; x].
Tensor cbam_fuse(const Tensor& rgb, const Tensor& x, const FusionModule& m);

struct ParamCounts {
  std::int64_t total = 0;
  std::int64_t trainable = 0;
};

ParamCounts param_count(const FusionModule& m);
ParamCounts param_count(const FusionBank& bank);
ParamCounts param_count(const ParameterList& params);

/// Normalized channel-attention profile of one fusion level.
struct ChannelProfile {
  int level = 0;
  std::string scene;
  int feature_channels = 0;
  Array mean_mask;   // averaged raw masks, length 2Cf
  Array normalized;  // min-max to [0,1]; a constant profile maps to zeros
  std::string modality(int channel) const { return channel < feature_channels ? "rgb" : "x"; }
};

/// Averages the level's channel masks over the (rgb, x) feature pairs of a
/// slice. Throws on an empty slice.
ChannelProfile export_channel_attention(const FusionBank& bank, int level,
                                        const std::vector<std::pair<Tensor, Tensor>>& slice);

Array min_max_normalize(const Array& values);

/// Eigen-CAM style map: first right singular vector of the C x (H*W)
/// activation matrix by power iteration, sign-fixed so the largest-magnitude
/// entry is positive, min-max normalized. Returns [H,W]. All-zero or
/// constant activations give an all-zero map.
Tensor cam_heatmap(const Tensor& activations, std::uint64_t seed = 0, int max_iterations = 200,
                   double tolerance = 1e-10);

/// Plain-text plot data: the header line `# level=<l> scene=<s> channels=<c>`
/// followed by one value per line. Profiles write `<modality> <value>`.
void write_profile(std::ostream& os, const ChannelProfile& profile);
void write_heatmap(std::ostream& os, const Tensor& heatmap, int level, const std::string& scene,
                   int channels);

}  // namespace rxf
