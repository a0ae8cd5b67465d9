#include "rxf/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace rxf {

using detail::make_result;
using detail::Node;

namespace {

void require(bool cond, const std::string& what) {
  if (!cond) throw std::invalid_argument(what);
}

void require_rank(const Tensor& t, int rank, const char* op, const char* arg) {
  require(t.defined(), std::string(op) + ": " + arg + " is undefined");
  require(t.rank() == rank, std::string(op) + ": " + arg + " must have rank " +
                                std::to_string(rank) + ", got shape " + to_string(t.shape()));
}

struct ConvGeometry {
  int batch, cin, h, w, cout, k, stride, pad, ho, wo;
  std::int64_t patch() const { return std::int64_t(cin) * k * k; }
  std::int64_t out_pixels() const { return std::int64_t(ho) * wo; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

// cols is (cin*k*k) x (ho*wo), row-major.
void im2col(const Scalar* x, const ConvGeometry& g, Scalar* cols) {
  const int k = g.k;
  for (int c = 0; c < g.cin; ++c) {
    const Scalar* plane = x + std::int64_t(c) * g.h * g.w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        Scalar* row = cols + ((std::int64_t(c) * k + ky) * k + kx) * g.out_pixels();
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          Scalar* out = row + std::int64_t(oy) * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(out, out + g.wo, 0.0);
            continue;
          }
          const Scalar* src = plane + std::int64_t(iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            out[ox] = (ix >= 0 && ix < g.w) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const Scalar* cols, const ConvGeometry& g, Scalar* dx) {
  const int k = g.k;
  for (int c = 0; c < g.cin; ++c) {
    Scalar* plane = dx + std::int64_t(c) * g.h * g.w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const Scalar* row = cols + ((std::int64_t(c) * k + ky) * k + kx) * g.out_pixels();
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          Scalar* dst = plane + std::int64_t(iy) * g.w;
          const Scalar* in = row + std::int64_t(oy) * g.wo;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) dst[ix] += in[ox];
          }
        }
      }
    }
  }
}

enum class Broadcast { kNone, kChannel, kSpatial };

Broadcast broadcast_kind(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Broadcast::kNone;
  if (a.size() == 4 && b.size() == 4 && a[0] == b[0]) {
    if (b[1] == a[1] && b[2] == 1 && b[3] == 1) return Broadcast::kChannel;
    if (b[1] == 1 && b[2] == a[2] && b[3] == a[3]) return Broadcast::kSpatial;
  }
  throw std::invalid_argument(std::string(op) + ": shapes " + to_string(a) + " and " +
                              to_string(b) + " are not broadcastable");
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(weight, 4, "conv2d", "weight");
  const auto& xs = input.shape();
  const auto& ws = weight.shape();
  ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], stride, padding, 0, 0};
  require(ws[1] == g.cin, "conv2d: weight in-channels (dim 1) = " + std::to_string(ws[1]) +
                              " but input channels = " + std::to_string(g.cin));
  require(ws[2] == ws[3], "conv2d: kernel must be square, got " + to_string(ws));
  require(g.k % 2 == 1, "conv2d: kernel size must be odd, got " + std::to_string(g.k));
  require(stride >= 1 && padding >= 0, "conv2d: invalid stride/padding");
  if (bias.defined()) {
    require(bias.rank() == 1 && bias.dim(0) == g.cout,
            "conv2d: bias length must equal out-channels " + std::to_string(g.cout));
  }
  const int hnum = g.h + 2 * padding - g.k;
  const int wnum = g.w + 2 * padding - g.k;
  require(hnum >= 0, "conv2d: output height < 1 for input height " + std::to_string(g.h));
  require(wnum >= 0, "conv2d: output width < 1 for input width " + std::to_string(g.w));
  g.ho = hnum / stride + 1;
  g.wo = wnum / stride + 1;

  const auto patch = g.patch();
  const auto pix = g.out_pixels();
  const std::int64_t in_stride = std::int64_t(g.cin) * g.h * g.w;
  const std::int64_t out_stride = std::int64_t(g.cout) * pix;

  // Columns are kept for the backward pass only when needed.
  const bool track = grad_enabled() && (input.requires_grad() || weight.requires_grad() ||
                                        bias.requires_grad());
  auto cols = std::make_shared<Array>();
  if (!g.pointwise()) cols->resize(track ? patch * pix * g.batch : patch * pix);

  Array out(out_stride * g.batch);
  ConstMatrixMap wmat(weight.data(), g.cout, patch);
  for (int b = 0; b < g.batch; ++b) {
    const Scalar* xb = input.data() + b * in_stride;
    const Scalar* colb = xb;
    if (!g.pointwise()) {
      Scalar* dst = cols->data() + (track ? b * patch * pix : 0);
      im2col(xb, g, dst);
      colb = dst;
    }
    MatrixMap omat(out.data() + b * out_stride, g.cout, pix);
    omat.noalias() = wmat * ConstMatrixMap(colb, patch, pix);
    if (bias.defined()) omat.colwise() += bias.values().matrix();
  }

  return make_result(
      {g.batch, g.cout, g.ho, g.wo}, std::move(out), {input, weight, bias},
      [g, cols, patch, pix, in_stride, out_stride](Node& self) {
        const auto& x = *self.inputs[0];
        const auto& w = *self.inputs[1];
        ConstMatrixMap wmat(w.value.data(), g.cout, patch);
        RowMatrix dcol;
        for (int b = 0; b < g.batch; ++b) {
          ConstMatrixMap gout(self.grad.data() + b * out_stride, g.cout, pix);
          const Scalar* colb =
              g.pointwise() ? x.value.data() + b * in_stride : cols->data() + b * patch * pix;
          if (self.input_needs_grad(1)) {
            MatrixMap dw(self.inputs[1]->grad_buffer().data(), g.cout, patch);
            dw.noalias() += gout * ConstMatrixMap(colb, patch, pix).transpose();
          }
          if (self.input_needs_grad(2)) {
            self.inputs[2]->grad_buffer() += gout.rowwise().sum().array();
          }
          if (self.input_needs_grad(0)) {
            Scalar* dx = self.inputs[0]->grad_buffer().data() + b * in_stride;
            if (g.pointwise()) {
              MatrixMap(dx, patch, pix).noalias() += wmat.transpose() * gout;
            } else {
              dcol.noalias() = wmat.transpose() * gout;
              col2im_add(dcol.data(), g, dx);
            }
          }
        }
      });
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank(input, 2, "linear", "input");
  require_rank(weight, 2, "linear", "weight");
  const int batch = input.dim(0), din = input.dim(1), dout = weight.dim(0);
  require(weight.dim(1) == din, "linear: weight in-features (dim 1) = " +
                                    std::to_string(weight.dim(1)) + " but input features = " +
                                    std::to_string(din));
  if (bias.defined()) {
    require(bias.rank() == 1 && bias.dim(0) == dout,
            "linear: bias length must equal out-features " + std::to_string(dout));
  }
  Array out(std::int64_t(batch) * dout);
  MatrixMap omat(out.data(), batch, dout);
  omat.noalias() = ConstMatrixMap(input.data(), batch, din) *
                   ConstMatrixMap(weight.data(), dout, din).transpose();
  if (bias.defined()) omat.rowwise() += bias.values().matrix().transpose();

  return make_result({batch, dout}, std::move(out), {input, weight, bias},
                     [batch, din, dout](Node& self) {
                       ConstMatrixMap gout(self.grad.data(), batch, dout);
                       if (self.input_needs_grad(0)) {
                         MatrixMap(self.inputs[0]->grad_buffer().data(), batch, din).noalias() +=
                             gout * ConstMatrixMap(self.inputs[1]->value.data(), dout, din);
                       }
                       if (self.input_needs_grad(1)) {
                         MatrixMap(self.inputs[1]->grad_buffer().data(), dout, din).noalias() +=
                             gout.transpose() *
                             ConstMatrixMap(self.inputs[0]->value.data(), batch, din);
                       }
                       if (self.input_needs_grad(2)) {
                         self.inputs[2]->grad_buffer() += gout.colwise().sum().transpose().array();
                       }
                     });
}

Tensor global_pool(const Tensor& input, PoolKind kind) {
  require_rank(input, 4, "global_pool", "input");
  const int B = input.dim(0), C = input.dim(1);
  const std::int64_t hw = std::int64_t(input.dim(2)) * input.dim(3);
  require(hw >= 1, "global_pool: empty spatial extent");
  ConstMatrixMap x(input.data(), std::int64_t(B) * C, hw);
  Array out(std::int64_t(B) * C);
  std::vector<std::int64_t> argmax;
  if (kind == PoolKind::kAvg) {
    out = x.rowwise().mean().array();
  } else {
    argmax.resize(out.size());
    for (std::int64_t r = 0; r < out.size(); ++r) {
      Eigen::Index idx;
      out[r] = x.row(r).maxCoeff(&idx);  // first maximum
      argmax[r] = idx;
    }
  }
  return make_result({B, C}, std::move(out), {input},
                     [kind, hw, argmax = std::move(argmax)](Node& self) {
                       auto& dx = self.inputs[0]->grad_buffer();
                       MatrixMap d(dx.data(), self.grad.size(), hw);
                       if (kind == PoolKind::kAvg) {
                         d.colwise() += (self.grad / Scalar(hw)).matrix();
                       } else {
                         for (std::int64_t r = 0; r < self.grad.size(); ++r) {
                           d(r, argmax[r]) += self.grad[r];
                         }
                       }
                     });
}

Tensor channel_pool(const Tensor& input, PoolKind kind) {
  require_rank(input, 4, "channel_pool", "input");
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  require(C >= 1, "channel_pool: zero channels");
  const std::int64_t hw = std::int64_t(H) * W;
  Array out(std::int64_t(B) * hw);
  std::vector<int> argmax;
  if (kind == PoolKind::kMax) argmax.resize(out.size());
  for (int b = 0; b < B; ++b) {
    ConstMatrixMap x(input.data() + std::int64_t(b) * C * hw, C, hw);
    if (kind == PoolKind::kAvg) {
      out.segment(b * hw, hw) = x.colwise().mean().transpose().array();
    } else {
      for (std::int64_t p = 0; p < hw; ++p) {
        int best = 0;
        Scalar v = x(0, p);
        for (int c = 1; c < C; ++c) {
          if (x(c, p) > v) {
            v = x(c, p);
            best = c;
          }
        }
        out[b * hw + p] = v;
        argmax[b * hw + p] = best;
      }
    }
  }
  return make_result({B, 1, H, W}, std::move(out), {input},
                     [kind, B, C, hw, argmax = std::move(argmax)](Node& self) {
                       auto& dx = self.inputs[0]->grad_buffer();
                       for (int b = 0; b < B; ++b) {
                         MatrixMap d(dx.data() + std::int64_t(b) * C * hw, C, hw);
                         const auto g = self.grad.segment(b * hw, hw);
                         if (kind == PoolKind::kAvg) {
                           d.rowwise() += (g / Scalar(C)).matrix().transpose();
                         } else {
                           for (std::int64_t p = 0; p < hw; ++p) {
                             d(argmax[b * hw + p], p) += g[p];
                           }
                         }
                       }
                     });
}

Tensor sigmoid(const Tensor& input) {
  // Saturated values are pinned to the nearest doubles strictly inside (0,1).
  constexpr Scalar kLo = std::numeric_limits<Scalar>::min();
  constexpr Scalar kHi = 1.0 - std::numeric_limits<Scalar>::epsilon() / 2;
  const Array& x = input.values();
  Array out(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Scalar s;
    if (x[i] >= 0) {
      s = 1.0 / (1.0 + std::exp(-x[i]));
    } else {
      const Scalar e = std::exp(x[i]);
      s = e / (1.0 + e);
    }
    out[i] = std::clamp(s, kLo, kHi);
  }
  return make_result(input.shape(), std::move(out), {input}, [](Node& self) {
    self.inputs[0]->grad_buffer() += self.grad * self.value * (1.0 - self.value);
  });
}

Tensor relu(const Tensor& input) {
  Array out = input.values().max(0.0);
  return make_result(input.shape(), std::move(out), {input}, [](Node& self) {
    self.inputs[0]->grad_buffer() += (self.value > 0.0).select(self.grad, 0.0);
  });
}

namespace {

// Applies `f(i, j)` for every element i of a and its broadcast partner j of b.
template <typename F>
void for_each_broadcast(const Shape& a, Broadcast kind, F&& f) {
  const std::int64_t n = numel(a);
  if (kind == Broadcast::kNone) {
    for (std::int64_t i = 0; i < n; ++i) f(i, i);
    return;
  }
  const std::int64_t B = a[0], C = a[1], hw = std::int64_t(a[2]) * a[3];
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t c = 0; c < C; ++c) {
      const std::int64_t base = (b * C + c) * hw;
      for (std::int64_t p = 0; p < hw; ++p) {
        const std::int64_t j = kind == Broadcast::kChannel ? b * C + c : b * hw + p;
        f(base + p, j);
      }
    }
  }
}

}  // namespace

Tensor mul(const Tensor& a, const Tensor& b) {
  const auto kind = broadcast_kind(a.shape(), b.shape(), "mul");
  const Array& av = a.values();
  const Array& bv = b.values();
  Array out(av.size());
  if (kind == Broadcast::kNone) {
    out = av * bv;
  } else {
    for_each_broadcast(a.shape(), kind, [&](std::int64_t i, std::int64_t j) { out[i] = av[i] * bv[j]; });
  }
  return make_result(a.shape(), std::move(out), {a, b}, [kind](Node& self) {
    const Array& av = self.inputs[0]->value;
    const Array& bv = self.inputs[1]->value;
    const bool ga = self.input_needs_grad(0), gb = self.input_needs_grad(1);
    if (kind == Broadcast::kNone) {
      if (ga) self.inputs[0]->grad_buffer() += self.grad * bv;
      if (gb) self.inputs[1]->grad_buffer() += self.grad * av;
      return;
    }
    Scalar* da = ga ? self.inputs[0]->grad_buffer().data() : nullptr;
    Scalar* db = gb ? self.inputs[1]->grad_buffer().data() : nullptr;
    for_each_broadcast(self.shape, kind, [&](std::int64_t i, std::int64_t j) {
      if (da) da[i] += self.grad[i] * bv[j];
      if (db) db[j] += self.grad[i] * av[i];
    });
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  const auto kind = broadcast_kind(a.shape(), b.shape(), "add");
  const Array& av = a.values();
  const Array& bv = b.values();
  Array out(av.size());
  if (kind == Broadcast::kNone) {
    out = av + bv;
  } else {
    for_each_broadcast(a.shape(), kind, [&](std::int64_t i, std::int64_t j) { out[i] = av[i] + bv[j]; });
  }
  return make_result(a.shape(), std::move(out), {a, b}, [kind](Node& self) {
    if (self.input_needs_grad(0)) self.inputs[0]->grad_buffer() += self.grad;
    if (!self.input_needs_grad(1)) return;
    auto& db = self.inputs[1]->grad_buffer();
    if (kind == Broadcast::kNone) {
      db += self.grad;
    } else {
      for_each_broadcast(self.shape, kind,
                         [&](std::int64_t i, std::int64_t j) { db[j] += self.grad[i]; });
    }
  });
}

Tensor scale(const Tensor& a, Scalar factor) {
  return make_result(a.shape(), a.values() * factor, {a}, [factor](Node& self) {
    self.inputs[0]->grad_buffer() += self.grad * factor;
  });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_rank(a, 4, "concat_channels", "a");
  require_rank(b, 4, "concat_channels", "b");
  const auto& as = a.shape();
  const auto& bs = b.shape();
  require(as[0] == bs[0], "concat_channels: batch mismatch " + to_string(as) + " vs " + to_string(bs));
  require(as[2] == bs[2] && as[3] == bs[3],
          "concat_channels: spatial mismatch " + to_string(as) + " vs " + to_string(bs));
  const int B = as[0], Ca = as[1], Cb = bs[1];
  const std::int64_t hw = std::int64_t(as[2]) * as[3];
  const std::int64_t na = Ca * hw, nb = Cb * hw;
  Array out(B * (na + nb));
  for (int i = 0; i < B; ++i) {
    out.segment(i * (na + nb), na) = a.values().segment(i * na, na);
    out.segment(i * (na + nb) + na, nb) = b.values().segment(i * nb, nb);
  }
  return make_result({B, Ca + Cb, as[2], as[3]}, std::move(out), {a, b}, [B, na, nb](Node& self) {
    for (int i = 0; i < B; ++i) {
      if (self.input_needs_grad(0)) {
        self.inputs[0]->grad_buffer().segment(i * na, na) += self.grad.segment(i * (na + nb), na);
      }
      if (self.input_needs_grad(1)) {
        self.inputs[1]->grad_buffer().segment(i * nb, nb) +=
            self.grad.segment(i * (na + nb) + na, nb);
      }
    }
  });
}

Tensor slice_channels(const Tensor& input, int begin, int count) {
  require_rank(input, 4, "slice_channels", "input");
  const auto& s = input.shape();
  require(begin >= 0 && count >= 0 && begin + count <= s[1],
          "slice_channels: range [" + std::to_string(begin) + "," + std::to_string(begin + count) +
              ") outside channels " + std::to_string(s[1]));
  const std::int64_t hw = std::int64_t(s[2]) * s[3];
  const std::int64_t n = count * hw, full = s[1] * hw, off = begin * hw;
  Array out(s[0] * n);
  for (int i = 0; i < s[0]; ++i) out.segment(i * n, n) = input.values().segment(i * full + off, n);
  return make_result({s[0], count, s[2], s[3]}, std::move(out), {input},
                     [B = s[0], n, full, off](Node& self) {
                       auto& dx = self.inputs[0]->grad_buffer();
                       for (int i = 0; i < B; ++i) dx.segment(i * full + off, n) += self.grad.segment(i * n, n);
                     });
}

Tensor concat_batch(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_batch: no inputs");
  Shape shape = parts[0].shape();
  std::int64_t total = 0;
  int batch = 0;
  for (const auto& p : parts) {
    require(p.rank() == static_cast<int>(shape.size()) &&
                std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1),
            "concat_batch: trailing dims mismatch " + to_string(p.shape()));
    total += p.numel();
    batch += p.dim(0);
  }
  shape[0] = batch;
  Array out(total);
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    out.segment(off, p.numel()) = p.values();
    off += p.numel();
  }
  return make_result(std::move(shape), std::move(out), {parts.begin(), parts.end()},
                     [offsets = std::move(offsets)](Node& self) {
                       for (std::size_t i = 0; i < self.inputs.size(); ++i) {
                         if (!self.input_needs_grad(i)) continue;
                         auto& g = self.inputs[i]->grad_buffer();
                         g += self.grad.segment(offsets[i], g.size());
                       }
                     });
}

Tensor maxpool2(const Tensor& input) {
  require_rank(input, 4, "maxpool2", "input");
  const auto& s = input.shape();
  require(s[2] % 2 == 0 && s[3] % 2 == 0,
          "maxpool2: spatial dims must be even, got " + to_string(s));
  const int H = s[2], W = s[3], Ho = H / 2, Wo = W / 2;
  const std::int64_t planes = std::int64_t(s[0]) * s[1];
  Array out(planes * Ho * Wo);
  std::vector<std::int64_t> argmax(out.size());
  const Scalar* x = input.data();
  for (std::int64_t p = 0; p < planes; ++p) {
    for (int oy = 0; oy < Ho; ++oy) {
      for (int ox = 0; ox < Wo; ++ox) {
        std::int64_t best = p * H * W + std::int64_t(2 * oy) * W + 2 * ox;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const std::int64_t idx = p * H * W + std::int64_t(2 * oy + dy) * W + 2 * ox + dx;
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::int64_t o = (p * Ho + oy) * Wo + ox;
        out[o] = x[best];
        argmax[o] = best;
      }
    }
  }
  return make_result({s[0], s[1], Ho, Wo}, std::move(out), {input},
                     [argmax = std::move(argmax)](Node& self) {
                       auto& dx = self.inputs[0]->grad_buffer();
                       for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += self.grad[o];
                     });
}

Tensor upsample_nearest2(const Tensor& input) {
  require_rank(input, 4, "upsample_nearest2", "input");
  const auto& s = input.shape();
  const int H = s[2], W = s[3], Ho = 2 * H, Wo = 2 * W;
  const std::int64_t planes = std::int64_t(s[0]) * s[1];
  Array out(planes * Ho * Wo);
  const Scalar* x = input.data();
  for (std::int64_t p = 0; p < planes; ++p) {
    for (int oy = 0; oy < Ho; ++oy) {
      for (int ox = 0; ox < Wo; ++ox) {
        out[(p * Ho + oy) * Wo + ox] = x[(p * H + oy / 2) * W + ox / 2];
      }
    }
  }
  return make_result({s[0], s[1], Ho, Wo}, std::move(out), {input},
                     [planes, H, W](Node& self) {
                       auto& dx = self.inputs[0]->grad_buffer();
                       const int Ho = 2 * H, Wo = 2 * W;
                       for (std::int64_t p = 0; p < planes; ++p) {
                         for (int oy = 0; oy < Ho; ++oy) {
                           for (int ox = 0; ox < Wo; ++ox) {
                             dx[(p * H + oy / 2) * W + ox / 2] += self.grad[(p * Ho + oy) * Wo + ox];
                           }
                         }
                       }
                     });
}

Tensor reshape(const Tensor& input, Shape shape) {
  require(numel(shape) == input.numel(), "reshape: cannot view " + to_string(input.shape()) +
                                             " as " + to_string(shape));
  return make_result(std::move(shape), input.values(), {input},
                     [](Node& self) { self.inputs[0]->grad_buffer() += self.grad; });
}

Tensor sum(const Tensor& input) {
  return make_result({1}, Array::Constant(1, input.values().sum()), {input},
                     [](Node& self) { self.inputs[0]->grad_buffer() += self.grad[0]; });
}

Tensor mean(const Tensor& input) {
  const Scalar n = static_cast<Scalar>(input.numel());
  require(n > 0, "mean: empty tensor");
  return make_result({1}, Array::Constant(1, input.values().sum() / n), {input},
                     [n](Node& self) { self.inputs[0]->grad_buffer() += self.grad[0] / n; });
}

Tensor conv1d_channels(const Tensor& input, const Tensor& kernel) {
  require_rank(input, 2, "conv1d_channels", "input");
  require_rank(kernel, 1, "conv1d_channels", "kernel");
  const int B = input.dim(0), C = input.dim(1), k = kernel.dim(0);
  require(k % 2 == 1, "conv1d_channels: kernel width must be odd, got " + std::to_string(k));
  const int half = k / 2;
  const Scalar* x = input.data();
  const Scalar* w = kernel.data();
  Array out = Array::Zero(std::int64_t(B) * C);
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      Scalar acc = 0;
      for (int j = 0; j < k; ++j) {
        const int src = c + j - half;
        if (src >= 0 && src < C) acc += w[j] * x[b * C + src];
      }
      out[b * C + c] = acc;
    }
  }
  return make_result({B, C}, std::move(out), {input, kernel}, [B, C, k, half](Node& self) {
    const Scalar* x = self.inputs[0]->value.data();
    const Scalar* w = self.inputs[1]->value.data();
    Scalar* dx = self.input_needs_grad(0) ? self.inputs[0]->grad_buffer().data() : nullptr;
    Scalar* dw = self.input_needs_grad(1) ? self.inputs[1]->grad_buffer().data() : nullptr;
    for (int b = 0; b < B; ++b) {
      for (int c = 0; c < C; ++c) {
        const Scalar g = self.grad[b * C + c];
        for (int j = 0; j < k; ++j) {
          const int src = c + j - half;
          if (src < 0 || src >= C) continue;
          if (dx) dx[b * C + src] += g * w[j];
          if (dw) dw[j] += g * x[b * C + src];
        }
      }
    }
  });
}

Tensor flatten_anchors(const Tensor& input, int anchors_per_cell) {
  require_rank(input, 4, "flatten_anchors", "input");
  const auto& s = input.shape();
  const int A = anchors_per_cell;
  require(A >= 1 && s[1] % A == 0, "flatten_anchors: channels " + std::to_string(s[1]) +
                                       " not divisible by anchors " + std::to_string(A));
  const int B = s[0], G = s[1] / A;
  const std::int64_t hw = std::int64_t(s[2]) * s[3];
  const std::int64_t rows = hw * A;
  // out[b, p*A + a, g] = in[b, a*G + g, p]
  std::vector<std::int64_t> src(std::size_t(B) * rows * G);
  for (int b = 0; b < B; ++b)
    for (std::int64_t p = 0; p < hw; ++p)
      for (int a = 0; a < A; ++a)
        for (int g = 0; g < G; ++g)
          src[((b * rows) + p * A + a) * G + g] = (std::int64_t(b) * s[1] + a * G + g) * hw + p;
  Array out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = input.values()[src[i]];
  return make_result({B, static_cast<int>(rows), G}, std::move(out), {input},
                     [src = std::move(src)](Node& self) {
                       auto& dx = self.inputs[0]->grad_buffer();
                       for (std::size_t i = 0; i < src.size(); ++i) dx[src[i]] += self.grad[i];
                     });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const int B = parts[0].dim(0), G = parts[0].dim(2);
  int rows = 0;
  for (const auto& p : parts) {
    require(p.rank() == 3 && p.dim(0) == B && p.dim(2) == G,
            "concat_rows: incompatible part shape " + to_string(p.shape()));
    rows += p.dim(1);
  }
  Array out(std::int64_t(B) * rows * G);
  std::vector<int> row_offset;
  int off = 0;
  for (const auto& p : parts) {
    row_offset.push_back(off);
    const std::int64_t n = std::int64_t(p.dim(1)) * G;
    for (int b = 0; b < B; ++b) {
      out.segment((std::int64_t(b) * rows + off) * G, n) = p.values().segment(b * n, n);
    }
    off += p.dim(1);
  }
  return make_result({B, rows, G}, std::move(out), {parts.begin(), parts.end()},
                     [B, rows, G, row_offset = std::move(row_offset)](Node& self) {
                       for (std::size_t i = 0; i < self.inputs.size(); ++i) {
                         if (!self.input_needs_grad(i)) continue;
                         auto& g = self.inputs[i]->grad_buffer();
                         const std::int64_t n = g.size() / B;
                         for (int b = 0; b < B; ++b) {
                           g.segment(b * n, n) +=
                               self.grad.segment((std::int64_t(b) * rows + row_offset[i]) * G, n);
                         }
                       }
                     });
}

Tensor softmax(const Tensor& logits) {
  require_rank(logits, 2, "softmax", "logits");
  const int B = logits.dim(0), S = logits.dim(1);
  Array out(logits.numel());
  for (int b = 0; b < B; ++b) {
    const auto row = logits.values().segment(std::int64_t(b) * S, S);
    const Array e = (row - row.maxCoeff()).exp();
    out.segment(std::int64_t(b) * S, S) = e / e.sum();
  }
  return Tensor({B, S}, std::move(out));
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy", "logits");
  const int B = logits.dim(0), S = logits.dim(1);
  require(static_cast<int>(labels.size()) == B, "cross_entropy: label count != batch");
  Array prob(logits.numel());
  Scalar loss = 0;
  for (int b = 0; b < B; ++b) {
    require(labels[b] >= 0 && labels[b] < S, "cross_entropy: label out of range");
    const auto row = logits.values().segment(std::int64_t(b) * S, S);
    const Scalar m = row.maxCoeff();
    const Array e = (row - m).exp();
    const Scalar z = e.sum();
    prob.segment(std::int64_t(b) * S, S) = e / z;
    loss += -(row[labels[b]] - m - std::log(z));
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return make_result({1}, Array::Constant(1, loss / B), {logits},
                     [B, S, prob = std::move(prob), lab = std::move(lab)](Node& self) {
                       Array d = prob;
                       for (int b = 0; b < B; ++b) d[std::int64_t(b) * S + lab[b]] -= 1.0;
                       self.inputs[0]->grad_buffer() += d * (self.grad[0] / B);
                     });
}

namespace {

// log(sigmoid(x)) without overflow.
Scalar log_sigmoid(Scalar x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

Scalar stable_sigmoid(Scalar x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor sigmoid_focal_loss(const Tensor& logits, const Array& targets, const Array& weights,
                          Scalar alpha, Scalar gamma) {
  require_rank(logits, 3, "sigmoid_focal_loss", "logits");
  const std::int64_t K = logits.dim(2);
  const std::int64_t rows = std::int64_t(logits.dim(0)) * logits.dim(1);
  require(targets.size() == logits.numel(), "sigmoid_focal_loss: targets size mismatch");
  require(weights.size() == rows, "sigmoid_focal_loss: weights size mismatch");
  const Array& x = logits.values();
  Array dloss = Array::Zero(x.size());
  Scalar loss = 0;
  for (std::int64_t r = 0; r < rows; ++r) {
    const Scalar wgt = weights[r];
    if (wgt == 0) continue;
    for (std::int64_t k = 0; k < K; ++k) {
      const std::int64_t i = r * K + k;
      const Scalar z = x[i];
      const Scalar p = stable_sigmoid(z);
      if (targets[i] > 0.5) {
        // -alpha (1-p)^g log p ; d/dz with dp/dz = p(1-p)
        const Scalar q = 1.0 - p;
        const Scalar lp = log_sigmoid(z);
        const Scalar qg = std::pow(q, gamma);
        loss += -wgt * alpha * qg * lp;
        // d/dz[(1-p)^g] = -g (1-p)^(g-1) p(1-p) = -g p (1-p)^g ; d/dz log p = 1-p
        dloss[i] = -wgt * alpha * (-gamma * p * qg * lp + qg * q);
      } else {
        // -(1-alpha) p^g log(1-p)
        const Scalar lq = log_sigmoid(-z);
        const Scalar pg = std::pow(p, gamma);
        loss += -wgt * (1.0 - alpha) * pg * lq;
        // d/dz p^g = g p^g (1-p) ; d/dz log(1-p) = -p
        dloss[i] = -wgt * (1.0 - alpha) * (gamma * pg * (1.0 - p) * lq - pg * p);
      }
    }
  }
  return make_result({1}, Array::Constant(1, loss), {logits},
                     [dloss = std::move(dloss)](Node& self) {
                       self.inputs[0]->grad_buffer() += dloss * self.grad[0];
                     });
}

Tensor smooth_l1_loss(const Tensor& pred, const Array& target, const Array& mask, Scalar beta) {
  require_rank(pred, 3, "smooth_l1_loss", "pred");
  const std::int64_t G = pred.dim(2);
  const std::int64_t rows = std::int64_t(pred.dim(0)) * pred.dim(1);
  require(target.size() == pred.numel(), "smooth_l1_loss: target size mismatch");
  require(mask.size() == rows, "smooth_l1_loss: mask size mismatch");
  const Array& x = pred.values();
  Array dloss = Array::Zero(x.size());
  Scalar loss = 0;
  for (std::int64_t r = 0; r < rows; ++r) {
    if (mask[r] == 0) continue;
    for (std::int64_t g = 0; g < G; ++g) {
      const std::int64_t i = r * G + g;
      const Scalar d = x[i] - target[i];
      const Scalar ad = std::abs(d);
      if (ad < beta) {
        loss += mask[r] * 0.5 * d * d / beta;
        dloss[i] = mask[r] * d / beta;
      } else {
        loss += mask[r] * (ad - 0.5 * beta);
        dloss[i] = mask[r] * (d > 0 ? 1.0 : -1.0);
      }
    }
  }
  return make_result({1}, Array::Constant(1, loss), {pred}, [dloss = std::move(dloss)](Node& self) {
    self.inputs[0]->grad_buffer() += dloss * self.grad[0];
  });
}

}  // namespace rxf
