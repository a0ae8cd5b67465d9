#pragma once

#include "rxf/tensor.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace rxf {

struct GradCheckOptions {
  double step = 1e-5;
  /// Tensors larger than this are checked on a seeded sample of this many elements.
  std::int64_t max_elements_per_tensor = 64;
  std::uint64_t seed = 0;
  /// Denominator floor. Central differences of an O(1) loss carry round-off
  /// near 1e-11, so exactly-zero gradients need an absolute comparison.
  double floor = 1e-6;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::int64_t elements_checked = 0;
  std::string worst;  // "<tensor index>[<element>]: analytic=..., numeric=..."
};

/// Compares reverse-mode gradients of the scalar `loss_fn` against central
/// finite differences for every element (or a sample) of `params`.
/// Relative error uses max(|a|, |n|, floor) as denominator. Throws on
/// non-finite values.
GradCheckReport grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                           const GradCheckOptions& options = {});

}  // namespace rxf
