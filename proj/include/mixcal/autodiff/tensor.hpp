// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors with define-by-run reverse-mode differentiation.
//
// Every op returns a new Tensor whose node remembers its parents and a
// backward rule. A graph lives exactly as long as some Tensor refers to its
// tail; it is rebuilt on every forward pass. Nodes that do not depend on any
// requires_grad leaf carry no parents and no backward rule.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mixcal::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// While alive, ops on this thread record no parents: results are constants.
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

class Tensor;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents' grads.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
  std::vector<double>& grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t dim() const { return shape().size(); }
  // Row view: all leading dims collapsed, last dim is the row length.
  std::size_t rows() const { return numel() / cols(); }
  std::size_t cols() const { return node_->shape.back(); }

  std::span<const double> data() const { return node_->value; }
  // Mutable access is for leaves only (parameter updates, test setup).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t i) const { return data()[i]; }
  double at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  // Gradient of the last backward() root with respect to this tensor.
  // Zero-filled when no gradient has reached the tensor.
  std::vector<double> grad() const;
  void zero_grad();

  // Fresh leaf holding a copy of the values; no graph connection.
  Tensor detach() const;

  // Reverse sweep from a scalar root. Leaf gradients accumulate across
  // calls; intermediate gradients are reset at the start of each call.
  void backward() const;

  // Graph construction, used by op implementations.
  static Tensor make_result(Shape shape, std::vector<double> value,
                            std::vector<Tensor> inputs,
                            std::function<void(detail::Node&)> backward);
  detail::Node& node() const { return *node_; }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// Number of distinct nodes reachable from `root`, including itself.
std::size_t graph_size(const Tensor& root);

}  // namespace mixcal::ad
