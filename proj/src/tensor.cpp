// SPDX-License-Identifier: Apache-2.0
#include "amn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace amn {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool released = false;
  const char *op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
};

struct Access {
  static Tensor wrap(std::shared_ptr<Node> node) { return Tensor(std::move(node)); }
  static const std::shared_ptr<Node> &node(const Tensor &t) { return t.node_; }
};

std::span<double> GradSink::operator[](std::size_t i) const {
  Node &n = *inputs_[i];
  if (!n.requires_grad)
    return {};
  if (n.grad.size() != n.value.size())
    n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

namespace {

thread_local bool t_grad_enabled = true;

Tensor record_impl(const char *op, Shape shape, std::vector<double> values,
                   std::span<const Tensor> inputs, BackwardFn backward_fn) {
  if (shape_numel(shape) != values.size())
    throw std::logic_error(std::string(op) + ": value count does not match shape " +
                           shape_str(shape));
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->op = op;
  bool needs_grad = false;
  if (t_grad_enabled) {
    for (const Tensor &in : inputs)
      if (in.defined() && in.requires_grad())
        needs_grad = true;
  }
  if (needs_grad) {
    node->requires_grad = true;
    node->leaf = false;
    node->inputs.reserve(inputs.size());
    for (const Tensor &in : inputs)
      node->inputs.push_back(Access::node(in));
    node->backward = std::move(backward_fn);
  }
  return Access::wrap(std::move(node));
}

} // namespace

Tensor record(const char *op, Shape shape, std::vector<double> values,
              std::initializer_list<Tensor> inputs, BackwardFn backward_fn) {
  return record_impl(op, std::move(shape), std::move(values),
                     std::span<const Tensor>(inputs.begin(), inputs.size()),
                     std::move(backward_fn));
}

Tensor record(const char *op, Shape shape, std::vector<double> values,
              const std::vector<Tensor> &inputs, BackwardFn backward_fn) {
  return record_impl(op, std::move(shape), std::move(values), inputs,
                     std::move(backward_fn));
}

} // namespace detail

using detail::Access;
using detail::Node;

std::size_t shape_numel(const Shape &shape) {
  std::size_t n = 1;
  for (std::size_t e : shape)
    n *= e;
  return n;
}

std::string shape_str(const Shape &shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i)
    os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  for (std::size_t e : shape)
    if (e == 0)
      throw std::invalid_argument("tensor extents must be positive, got " +
                                  shape_str(shape));
  if (shape_numel(shape) != values.size())
    throw std::invalid_argument("tensor of shape " + shape_str(shape) + " needs " +
                                std::to_string(shape_numel(shape)) + " values, got " +
                                std::to_string(values.size()));
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
  if (requires_grad)
    node_->grad.assign(node_->value.size(), 0.0);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

const Shape &Tensor::shape() const {
  if (!node_)
    throw std::logic_error("use of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape &s = shape();
  if (axis >= s.size())
    throw std::out_of_range("axis " + std::to_string(axis) + " out of range for " +
                            shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::values() const {
  shape();
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1)
    throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const Shape &s = shape();
  if (index.size() != s.size())
    throw std::invalid_argument("index rank does not match " + shape_str(s));
  std::size_t flat = 0, axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis])
      throw std::out_of_range("index out of range for " + shape_str(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node_->value[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return node_ && node_->leaf; }

std::span<const double> Tensor::grad() const {
  if (!node_ || !node_->requires_grad)
    return {};
  if (node_->leaf && node_->grad.size() != node_->value.size())
    node_->grad.assign(node_->value.size(), 0.0);
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (!node_ || !node_->requires_grad)
    return {};
  if (node_->grad.size() != node_->value.size())
    node_->grad.assign(node_->value.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_ && node_->requires_grad)
    node_->grad.assign(node_->value.size(), 0.0);
}

std::span<double> Tensor::mutable_values() {
  if (!node_ || !node_->leaf)
    throw std::logic_error("in-place write to a non-leaf tensor");
  return node_->value;
}

Tensor Tensor::clone() const {
  return Tensor(shape(), node_->value, node_->requires_grad);
}

void backward(const Tensor &loss, bool retain_graph) {
  const auto &root = Access::node(loss);
  if (!root)
    throw std::invalid_argument("backward on undefined tensor");
  if (root->value.size() != 1)
    throw std::invalid_argument("backward needs a scalar loss, got shape " +
                                shape_str(root->shape));
  if (root->released)
    throw std::logic_error("backward through a graph that was already released; "
                           "pass retain_graph=true to the first call");
  if (!root->requires_grad)
    throw std::invalid_argument("loss does not depend on any tensor requiring a gradient");

  // Iterative post-order DFS over interior nodes.
  std::vector<Node *> order;
  std::unordered_set<Node *> seen;
  std::vector<std::pair<Node *, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto &[node, next] = stack.back();
    if (node->released)
      throw std::logic_error(std::string("backward reached released node '") + node->op +
                             "'; the graph was freed by an earlier backward");
    if (next < node->inputs.size()) {
      Node *child = node->inputs[next++].get();
      if (!child->leaf && child->requires_grad && seen.insert(child).second)
        stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node *n : order)
    n->grad.assign(n->value.size(), 0.0);
  root->grad[0] = 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node *n = *it;
    if (n->backward) {
      detail::GradSink sink(n->inputs);
      n->backward(n->grad, n->value, sink);
    }
  }

  if (!retain_graph) {
    for (Node *n : order) {
      n->inputs.clear();
      n->inputs.shrink_to_fit();
      n->backward = nullptr;
      n->grad.clear();
      n->grad.shrink_to_fit();
      n->released = true;
    }
  }
}

Tensor detach(const Tensor &x) { return Tensor(x.shape(), Access::node(x)->value, false); }

NoGradGuard::NoGradGuard() : previous_(detail::t_grad_enabled) {
  detail::t_grad_enabled = false;
}
NoGradGuard::~NoGradGuard() { detail::t_grad_enabled = previous_; }

bool grad_enabled() { return detail::t_grad_enabled; }

namespace {

void require_same_shape(const char *op, const Tensor &a, const Tensor &b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void accumulate(std::span<double> dst, std::span<const double> src) {
  for (std::size_t i = 0; i < dst.size(); ++i)
    dst[i] += src[i];
}

} // namespace

Tensor add(const Tensor &a, const Tensor &b) {
  require_same_shape("add", a, b);
  auto av = a.values(), bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = av[i] + bv[i];
  return detail::record("add", a.shape(), std::move(out), {a, b},
                        [](std::span<const double> g, std::span<const double>,
                           const detail::GradSink &in) {
                          if (auto ga = in[0]; !ga.empty())
                            accumulate(ga, g);
                          if (auto gb = in[1]; !gb.empty())
                            accumulate(gb, g);
                        });
}

Tensor sub(const Tensor &a, const Tensor &b) {
  require_same_shape("sub", a, b);
  auto av = a.values(), bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = av[i] - bv[i];
  return detail::record("sub", a.shape(), std::move(out), {a, b},
                        [](std::span<const double> g, std::span<const double>,
                           const detail::GradSink &in) {
                          if (auto ga = in[0]; !ga.empty())
                            accumulate(ga, g);
                          if (auto gb = in[1]; !gb.empty())
                            for (std::size_t i = 0; i < gb.size(); ++i)
                              gb[i] -= g[i];
                        });
}

Tensor mul(const Tensor &a, const Tensor &b) {
  require_same_shape("mul", a, b);
  auto av = a.values(), bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = av[i] * bv[i];
  return detail::record("mul", a.shape(), std::move(out), {a, b},
                        [a, b](std::span<const double> g, std::span<const double>,
                               const detail::GradSink &in) {
                          auto av = a.values(), bv = b.values();
                          if (auto ga = in[0]; !ga.empty())
                            for (std::size_t i = 0; i < ga.size(); ++i)
                              ga[i] += g[i] * bv[i];
                          if (auto gb = in[1]; !gb.empty())
                            for (std::size_t i = 0; i < gb.size(); ++i)
                              gb[i] += g[i] * av[i];
                        });
}

Tensor scale(const Tensor &x, double factor) {
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = xv[i] * factor;
  return detail::record("scale", x.shape(), std::move(out), {x},
                        [factor](std::span<const double> g, std::span<const double>,
                                 const detail::GradSink &in) {
                          auto gx = in[0];
                          for (std::size_t i = 0; i < gx.size(); ++i)
                            gx[i] += g[i] * factor;
                        });
}

Tensor exp(const Tensor &x) {
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::exp(xv[i]);
  return detail::record("exp", x.shape(), std::move(out), {x},
                        [](std::span<const double> g, std::span<const double> y,
                           const detail::GradSink &in) {
                          auto gx = in[0];
                          for (std::size_t i = 0; i < gx.size(); ++i)
                            gx[i] += g[i] * y[i];
                        });
}

Tensor sigmoid(const Tensor &x) {
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = 1.0 / (1.0 + std::exp(-xv[i]));
  return detail::record("sigmoid", x.shape(), std::move(out), {x},
                        [](std::span<const double> g, std::span<const double> y,
                           const detail::GradSink &in) {
                          auto gx = in[0];
                          for (std::size_t i = 0; i < gx.size(); ++i)
                            gx[i] += g[i] * y[i] * (1.0 - y[i]);
                        });
}

Tensor sum(const Tensor &x) {
  double s = 0.0;
  for (double v : x.values())
    s += v;
  return detail::record("sum", {1}, {s}, {x},
                        [](std::span<const double> g, std::span<const double>,
                           const detail::GradSink &in) {
                          auto gx = in[0];
                          for (double &v : gx)
                            v += g[0];
                        });
}

Tensor mean(const Tensor &x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor reshape(const Tensor &x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw std::invalid_argument("reshape " + shape_str(x.shape()) + " -> " +
                                shape_str(shape) + " changes element count");
  std::vector<double> out(x.values().begin(), x.values().end());
  return detail::record("reshape", std::move(shape), std::move(out), {x},
                        [](std::span<const double> g, std::span<const double>,
                           const detail::GradSink &in) { accumulate(in[0], g); });
}

} // namespace amn
