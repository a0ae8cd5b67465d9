#include "rxf/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace rxf {

void ParameterList::add(std::string name, Tensor tensor, bool frozen) {
  if (find(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  tensor.set_requires_grad(!frozen);
  items_.push_back({std::move(name), std::move(tensor), frozen});
}

void ParameterList::append(const ParameterList& other) {
  for (const auto& p : other.items_) add(p.name, p.tensor, p.frozen);
}

const Parameter* ParameterList::find(const std::string& name) const {
  for (const auto& p : items_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

std::int64_t ParameterList::total_count() const {
  std::int64_t n = 0;
  for (const auto& p : items_) n += p.tensor.numel();
  return n;
}

std::int64_t ParameterList::trainable_count() const {
  std::int64_t n = 0;
  for (const auto& p : items_) n += p.frozen ? 0 : p.tensor.numel();
  return n;
}

std::vector<Tensor> ParameterList::trainable() const {
  std::vector<Tensor> out;
  for (const auto& p : items_) {
    if (!p.frozen) out.push_back(p.tensor);
  }
  return out;
}

void ParameterList::set_frozen(bool frozen) {
  for (auto& p : items_) {
    p.frozen = frozen;
    p.tensor.set_requires_grad(!frozen);
  }
}

void ParameterList::zero_grad() {
  for (auto& p : items_) p.tensor.zero_grad();
}

void copy_values(const ParameterList& src, ParameterList& dst) {
  if (src.size() != dst.size()) {
    throw std::invalid_argument("parameter count mismatch: " + std::to_string(src.size()) +
                                " vs " + std::to_string(dst.size()));
  }
  for (auto& d : dst.items()) {
    const auto* s = src.find(d.name);
    if (!s) throw std::invalid_argument("missing parameter: " + d.name);
    if (s->tensor.shape() != d.tensor.shape()) {
      throw std::invalid_argument("shape mismatch for " + d.name + ": " +
                                  to_string(s->tensor.shape()) + " vs " +
                                  to_string(d.tensor.shape()));
    }
    d.tensor.values() = s->tensor.values();
  }
}

void init_uniform_fan_in(Tensor& t, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.values()) v = rng.uniform(-bound, bound);
}

Conv2d::Conv2d(int cin, int cout, int k, int stride_, bool with_bias, Rng& rng)
    : weight(Shape{cout, cin, k, k}), stride(stride_), padding(k / 2) {
  init_uniform_fan_in(weight, cin * k * k, rng);
  if (with_bias) {
    bias = Tensor(Shape{cout});
    init_uniform_fan_in(bias, cin * k * k, rng);
  }
  weight.set_requires_grad(true);
  if (bias.defined()) bias.set_requires_grad(true);
}

void Conv2d::collect(ParameterList& out, const std::string& prefix) const {
  out.add(prefix + ".weight", weight);
  if (bias.defined()) out.add(prefix + ".bias", bias);
}

Linear::Linear(int din, int dout, bool with_bias, Rng& rng) : weight(Shape{dout, din}) {
  init_uniform_fan_in(weight, din, rng);
  if (with_bias) {
    bias = Tensor(Shape{dout});
    init_uniform_fan_in(bias, din, rng);
  }
  weight.set_requires_grad(true);
  if (bias.defined()) bias.set_requires_grad(true);
}

void Linear::collect(ParameterList& out, const std::string& prefix) const {
  out.add(prefix + ".weight", weight);
  if (bias.defined()) out.add(prefix + ".bias", bias);
}

}  // namespace rxf
