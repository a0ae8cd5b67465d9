#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace rxf {

using Scalar = double;
using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using Shape = std::vector<int>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(Node&)>;

struct Node {
  Shape shape;
  Array value;
  Array grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<NodePtr> inputs;
  BackwardFn backward;

  Array& grad_buffer();
  bool input_needs_grad(std::size_t i) const { return inputs[i] && inputs[i]->requires_grad; }
};

}  // namespace detail

/// Handle to a dense row-major array of doubles with optional gradient
/// tracking. Copies share storage; use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = 0.0);
  Tensor(Shape shape, Array values);
  Tensor(Shape shape, std::initializer_list<Scalar> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int dim(int i) const;
  std::int64_t numel() const { return node_ ? node_->value.size() : 0; }

  Array& values();
  const Array& values() const;
  Scalar* data() { return values().data(); }
  const Scalar* data() const { return values().data(); }
  Scalar item() const;
  Scalar at(std::initializer_list<int> index) const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }
  const Array& grad() const;
  void zero_grad();

  /// Same values, no history.
  Tensor detach() const;
  Tensor clone() const;

  /// Populates grads of every reachable tracked tensor. Requires a scalar.
  void backward() const;

  detail::Node* node() const { return node_.get(); }
  const detail::NodePtr& node_ptr() const { return node_; }
  static Tensor from_node(detail::NodePtr node);

 private:
  detail::NodePtr node_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

namespace detail {

/// Builds an op result. History is recorded only if grad mode is on and some
/// input requires grad; otherwise `fn` is dropped.
Tensor make_result(Shape shape, Array value, std::vector<Tensor> inputs, BackwardFn fn);

}  // namespace detail

}  // namespace rxf
