#pragma once

#include "rxf/nn.hpp"

#include <vector>

namespace rxf {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-3;  // decoupled, scaled by lr
  double lr_decay = 0.97;      // per epoch
};

/// Adam over the non-frozen entries of a ParameterList, captured at
/// construction. Frozen parameters are never touched.
class Adam {
 public:
  Adam(const ParameterList& params, AdamOptions options);

  void step();
  void zero_grad();
  /// Multiplies the learning rate by lr_decay.
  void end_epoch() { lr_ *= options_.lr_decay; }
  double lr() const { return lr_; }
  std::int64_t steps() const { return t_; }

 private:
  struct Slot {
    Tensor param;
    Array m, v;
  };
  AdamOptions options_;
  double lr_;
  std::int64_t t_ = 0;
  std::vector<Slot> slots_;
};

}  // namespace rxf
