#pragma once

#include "rxf/tensor.hpp"

#include <span>
#include <vector>

namespace rxf {

enum class PoolKind { kAvg, kMax };

// Feature maps are [B,C,H,W] throughout.

/// Cross-correlation with square odd kernel `weight` [Cout,Cin,k,k].
/// `bias` may be undefined.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride = 1,
              int padding = 0);

/// input [B,Din], weight [Dout,Din], bias [Dout] or undefined.
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias = {});

/// Reduces H,W: [B,C,H,W] -> [B,C]. Max routes gradient to the first maximum.
Tensor global_pool(const Tensor& input, PoolKind kind);

/// Reduces C: [B,C,H,W] -> [B,1,H,W].
Tensor channel_pool(const Tensor& input, PoolKind kind);

Tensor sigmoid(const Tensor& input);
Tensor relu(const Tensor& input);

/// Elementwise product / sum. `b` may also be a [B,C,1,1] or [B,1,H,W] mask
/// broadcast over a [B,C,H,W] `a`.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Scalar factor);

inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator*(Scalar s, const Tensor& a) { return scale(a, s); }

Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice_channels(const Tensor& input, int begin, int count);

/// Stacks [1,...] tensors (or any [Bi,...] with equal trailing dims) along dim 0.
Tensor concat_batch(std::span<const Tensor> parts);

Tensor maxpool2(const Tensor& input);
Tensor upsample_nearest2(const Tensor& input);

Tensor reshape(const Tensor& input, Shape shape);
Tensor sum(const Tensor& input);
Tensor mean(const Tensor& input);

/// 1-D zero-padded convolution along the channel axis of [B,C] with an odd
/// width kernel [k].
Tensor conv1d_channels(const Tensor& input, const Tensor& kernel);

/// [B, A*G, H, W] -> [B, H*W*A, G], rows ordered (row, col, anchor).
Tensor flatten_anchors(const Tensor& input, int anchors_per_cell);

/// Concatenates [B,Ni,G] tensors along dim 1.
Tensor concat_rows(std::span<const Tensor> parts);

/// Row-wise softmax of [B,S]; no gradient.
Tensor softmax(const Tensor& logits);

/// Mean cross-entropy of [B,S] logits against class indices.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Sum over entries with weight != 0 of the sigmoid focal loss. `logits` and
/// `targets` are [B,N,K]; `weights` is [B*N] (0 = ignored anchor).
Tensor sigmoid_focal_loss(const Tensor& logits, const Array& targets, const Array& weights,
                          Scalar alpha, Scalar gamma);

/// Sum of smooth-L1 over rows with mask != 0. `pred` [B,N,4], `target` same
/// size flat, `mask` [B*N].
Tensor smooth_l1_loss(const Tensor& pred, const Array& target, const Array& mask, Scalar beta);

}  // namespace rxf
