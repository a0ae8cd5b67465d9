#pragma once

#include "rxf/ops.hpp"
#include "rxf/random.hpp"
#include "rxf/tensor.hpp"

#include <string>
#include <vector>

namespace rxf {

struct Parameter {
  std::string name;
  Tensor tensor;
  bool frozen = false;
};

/// Ordered, name-unique view over a model's parameters. Entries alias the
/// model's tensors.
class ParameterList {
 public:
  void add(std::string name, Tensor tensor, bool frozen = false);
  void append(const ParameterList& other);

  const std::vector<Parameter>& items() const { return items_; }
  std::vector<Parameter>& items() { return items_; }
  std::size_t size() const { return items_.size(); }
  const Parameter* find(const std::string& name) const;

  std::int64_t total_count() const;
  std::int64_t trainable_count() const;
  std::vector<Tensor> trainable() const;

  /// Frozen entries stop tracking gradients.
  void set_frozen(bool frozen);
  void zero_grad();

 private:
  std::vector<Parameter> items_;
};

/// Copies values name-by-name from `src` into `dst`. Throws on any name or
/// shape mismatch.
void copy_values(const ParameterList& src, ParameterList& dst);

/// Fills with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
void init_uniform_fan_in(Tensor& t, int fan_in, Rng& rng);

struct Conv2d {
  Tensor weight;  // [Cout,Cin,k,k]
  Tensor bias;    // [Cout] or undefined
  int stride = 1;
  int padding = 0;

  Conv2d() = default;
  Conv2d(int cin, int cout, int k, int stride, bool with_bias, Rng& rng);

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }
  void collect(ParameterList& out, const std::string& prefix) const;
  std::int64_t param_count() const { return weight.numel() + (bias.defined() ? bias.numel() : 0); }
};

struct Linear {
  Tensor weight;  // [Dout,Din]
  Tensor bias;    // [Dout] or undefined

  Linear() = default;
  Linear(int din, int dout, bool with_bias, Rng& rng);

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  void collect(ParameterList& out, const std::string& prefix) const;
};

}  // namespace rxf
