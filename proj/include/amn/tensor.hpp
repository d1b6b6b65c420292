// SPDX-License-Identifier: Apache-2.0
/**
 * @file   tensor.hpp
 * @brief  Dense double-precision tensors with a reverse-mode gradient tape.
 *
 * A Tensor is a shared handle to a node. Leaves are created directly;
 * every differentiable operation records its inputs and a backward
 * closure when at least one input requires a gradient. backward() walks
 * the recorded graph once in reverse topological order and, unless told
 * to retain it, releases the graph afterwards.
 */
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace amn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape &shape);
std::string shape_str(const Shape &shape);

namespace detail {
struct Node;
struct Access;
} // namespace detail

class Tensor {
public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape &shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  bool is_leaf() const;

  /// Accumulated gradient. Leaves that require a gradient always hold one
  /// (zeros until a backward pass reaches them); other tensors return an
  /// empty span.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// In-place access for leaves only (optimizer updates, test fixtures).
  std::span<double> mutable_values();

  /// Deep copy as a fresh leaf with the same requires_grad flag.
  Tensor clone() const;

  const detail::Node *node() const { return node_.get(); }

private:
  friend struct detail::Access;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

/// Propagates d(loss)/d(leaf) into every leaf reachable from `loss`.
/// Throws if loss is not a scalar, does not require a gradient, or its
/// graph was already released by an earlier call.
void backward(const Tensor &loss, bool retain_graph = false);

/// Same values, no gradient path back to `x`.
Tensor detach(const Tensor &x);

/// While alive, operations on the current thread do not record a graph.
class NoGradGuard {
public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard &) = delete;
  NoGradGuard &operator=(const NoGradGuard &) = delete;

private:
  bool previous_;
};

bool grad_enabled();

// Elementwise and reduction primitives.
Tensor add(const Tensor &a, const Tensor &b);
Tensor sub(const Tensor &a, const Tensor &b);
Tensor mul(const Tensor &a, const Tensor &b);
Tensor scale(const Tensor &x, double factor);
Tensor exp(const Tensor &x);
Tensor sigmoid(const Tensor &x);
Tensor sum(const Tensor &x);
Tensor mean(const Tensor &x);
Tensor reshape(const Tensor &x, Shape shape);

namespace detail {

/// Gradient buffers of an operation's inputs. An input that does not
/// require a gradient yields an empty span.
class GradSink {
public:
  explicit GradSink(std::span<const std::shared_ptr<Node>> inputs)
      : inputs_(inputs) {}
  std::span<double> operator[](std::size_t i) const;

private:
  std::span<const std::shared_ptr<Node>> inputs_;
};

using BackwardFn = std::function<void(std::span<const double> out_grad,
                                      std::span<const double> out_value,
                                      const GradSink &in_grad)>;

/// Creates the result of an operation and, when any input requires a
/// gradient and recording is enabled, links it into the graph.
Tensor record(const char *op, Shape shape, std::vector<double> values,
              std::initializer_list<Tensor> inputs, BackwardFn backward_fn);
Tensor record(const char *op, Shape shape, std::vector<double> values,
              const std::vector<Tensor> &inputs, BackwardFn backward_fn);

} // namespace detail
} // namespace amn
