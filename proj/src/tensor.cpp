#include "rxf/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace rxf {

namespace {

std::atomic<std::uint64_t> g_sequence{0};
thread_local bool t_grad_enabled = true;

}  // namespace

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape " + to_string(shape));
    n *= d;
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Array& detail::Node::grad_buffer() {
  if (grad.size() != value.size()) grad = Array::Zero(value.size());
  return grad;
}

namespace {

detail::NodePtr new_node(Shape shape, Array value) {
  if (numel(shape) != value.size()) {
    throw std::invalid_argument("tensor data length " + std::to_string(value.size()) +
                                " does not match shape " + to_string(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->seq = g_sequence.fetch_add(1, std::memory_order_relaxed);
  return node;
}

}  // namespace

Tensor::Tensor(Shape shape, Scalar fill) {
  const auto n = rxf::numel(shape);
  node_ = new_node(std::move(shape), Array::Constant(n, fill));
}

Tensor::Tensor(Shape shape, Array values) : node_(new_node(std::move(shape), std::move(values))) {}

Tensor::Tensor(Shape shape, std::initializer_list<Scalar> values) {
  Array a(static_cast<Eigen::Index>(values.size()));
  std::copy(values.begin(), values.end(), a.data());
  node_ = new_node(std::move(shape), std::move(a));
}

Tensor Tensor::from_node(detail::NodePtr node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

const Shape& Tensor::shape() const {
  if (!node_) throw std::logic_error("undefined tensor");
  return node_->shape;
}

int Tensor::dim(int i) const {
  const auto& s = shape();
  if (i < 0) i += static_cast<int>(s.size());
  if (i < 0 || i >= static_cast<int>(s.size())) {
    throw std::out_of_range("dimension index out of range for shape " + to_string(s));
  }
  return s[i];
}

Array& Tensor::values() {
  if (!node_) throw std::logic_error("undefined tensor");
  return node_->value;
}

const Array& Tensor::values() const {
  if (!node_) throw std::logic_error("undefined tensor");
  return node_->value;
}

Scalar Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

Scalar Tensor::at(std::initializer_list<int> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw std::invalid_argument("index rank mismatch");
  std::int64_t flat = 0;
  std::size_t k = 0;
  for (int i : index) {
    if (i < 0 || i >= s[k]) throw std::out_of_range("index out of range for " + to_string(s));
    flat = flat * s[k] + i;
    ++k;
  }
  return node_->value[flat];
}

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!node_) throw std::logic_error("undefined tensor");
  node_->requires_grad = flag;
  return *this;
}

const Array& Tensor::grad() const {
  if (!has_grad()) throw std::logic_error("tensor has no gradient");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.resize(0);
}

Tensor Tensor::detach() const { return Tensor(shape(), values()); }

Tensor Tensor::clone() const {
  Tensor t(shape(), values());
  t.node_->requires_grad = requires_grad();
  return t;
}

void Tensor::backward() const {
  if (!node_) throw std::logic_error("backward on undefined tensor");
  if (numel() != 1) {
    throw std::invalid_argument("backward requires a scalar loss, got shape " + to_string(shape()));
  }
  if (!node_->requires_grad) return;

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{node_.get()};
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (const auto& in : n->inputs) {
      if (in && in->requires_grad && !seen.count(in.get())) stack.push_back(in.get());
    }
  }
  // Sequence numbers follow execution order, so descending seq is reverse execution.
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });

  node_->grad_buffer() += 1.0;
  for (auto* n : order) {
    if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
  }
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

Tensor detail::make_result(Shape shape, Array value, std::vector<Tensor> inputs, BackwardFn fn) {
  auto node = new_node(std::move(shape), std::move(value));
  if (t_grad_enabled) {
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (auto& t : inputs) node->inputs.push_back(t.node_ptr());
      node->backward = std::move(fn);
    }
  }
  return Tensor::from_node(std::move(node));
}

}  // namespace rxf
