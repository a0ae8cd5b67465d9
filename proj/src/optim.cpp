#include "rxf/optim.hpp"

#include <cmath>

namespace rxf {

Adam::Adam(const ParameterList& params, AdamOptions options) : options_(options), lr_(options.lr) {
  for (const auto& p : params.items()) {
    if (p.frozen) continue;
    slots_.push_back({p.tensor, Array::Zero(p.tensor.numel()), Array::Zero(p.tensor.numel())});
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  for (auto& s : slots_) {
    if (!s.param.has_grad()) continue;
    const Array& g = s.param.grad();
    s.m = options_.beta1 * s.m + (1.0 - options_.beta1) * g;
    s.v = options_.beta2 * s.v + (1.0 - options_.beta2) * g.square();
    Array& w = s.param.values();
    w -= lr_ * ((s.m / c1) / ((s.v / c2).sqrt() + options_.eps) + options_.weight_decay * w);
  }
}

void Adam::zero_grad() {
  for (auto& s : slots_) s.param.zero_grad();
}

}  // namespace rxf
