// SPDX-License-Identifier: Apache-2.0
/**
 * @file   autodiff.hpp
 * @brief  Reverse-mode differentiation over a linear tape.
 *
 * A Var is a handle to a recorded value. Ops whose inputs all live off-tape
 * (constants, or inference runs) produce constants and keep no graph, so an
 * inference pass frees each activation as soon as its last handle dies.
 * Ops with at least one grad-requiring input append a node to that input's
 * tape; Tape::backward walks the nodes in reverse recording order.
 *
 * A tape is confined to one thread at a time.
 */
#pragma once

#include <lasd/tensor.hpp>

#include <functional>
#include <initializer_list>
#include <memory>
#include <vector>

namespace lasd {

template <typename T> class Tape;
template <typename T> class Var;

template <typename T> struct OpNode {
  Tensor<T> value;
  Tensor<T> grad; // empty until a gradient flows in
  std::vector<std::shared_ptr<OpNode>> inputs;
  std::function<void(OpNode &)> backward;
  Tape<T> *tape = nullptr;
  bool requires_grad = false;
  bool leaf = true;

  Tensor<T> &grad_buffer() {
    if (grad.empty())
      grad = Tensor<T>(value.shape());
    return grad;
  }
  /// Gradient sink of input i, or nullptr if that input needs no gradient.
  Tensor<T> *input_grad(std::size_t i) {
    return inputs[i]->requires_grad ? &inputs[i]->grad_buffer() : nullptr;
  }
  const Tensor<T> &input_value(std::size_t i) const {
    return inputs[i]->value;
  }
};

template <typename T> class Var {
 public:
  Var() = default;

  bool defined() const { return node_ != nullptr; }
  const Tensor<T> &value() const { return node_->value; }
  const Shape &shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tape<T> *tape() const { return node_ ? node_->tape : nullptr; }

  /// Accumulated gradient; zeros when nothing reached this value.
  const Tensor<T> &grad() const { return node_->grad_buffer(); }

  /// Moves the value out when this handle is its sole owner and no graph
  /// references it; copies otherwise.
  Tensor<T> take() && {
    if (!node_->requires_grad && node_.use_count() == 1)
      return std::move(node_->value);
    return node_->value;
  }

  const std::shared_ptr<OpNode<T>> &node() const { return node_; }

 private:
  explicit Var(std::shared_ptr<OpNode<T>> n) : node_(std::move(n)) {}
  std::shared_ptr<OpNode<T>> node_;

  friend class Tape<T>;
  template <typename U> friend Var<U> constant(Tensor<U> value);
  template <typename U>
  friend Var<U> record_op(Tensor<U> value,
                          std::initializer_list<const Var<U> *> inputs,
                          std::function<void(OpNode<U> &)> backward);
};

/// Off-tape value; gradients never flow into it.
template <typename T> Var<T> constant(Tensor<T> value) {
  auto n = std::make_shared<OpNode<T>>();
  n->value = std::move(value);
  return Var<T>(std::move(n));
}

template <typename T> class Tape {
 public:
  Tape() = default;
  Tape(const Tape &) = delete;
  Tape &operator=(const Tape &) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
    auto n = std::make_shared<OpNode<T>>();
    n->value = std::move(value);
    n->tape = this;
    n->requires_grad = requires_grad;
    nodes_.push_back(n);
    return Var<T>(std::move(n));
  }

  std::size_t size() const { return nodes_.size(); }

  /// Propagates d(loss)/d(node) to every recorded node and returns how many
  /// op nodes ran their backward step. With `retain_intermediates` false,
  /// non-leaf values and gradients are released as soon as they are consumed.
  std::size_t backward(const Var<T> &loss, bool retain_intermediates = true) {
    if (!loss.defined() || loss.tape() != this)
      throw Error("backward: loss was not recorded on this tape");
    if (loss.value().size() != 1)
      throw Error("backward: loss must be a scalar, got shape " +
                  to_string(loss.shape()));
    auto &seed = loss.node()->grad_buffer();
    seed[0] += T(1);
    std::size_t visited = 0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      OpNode<T> &n = **it;
      if (n.leaf || n.grad.empty())
        continue;
      if (n.backward)
        n.backward(n);
      ++visited;
      if (!retain_intermediates) {
        n.grad = Tensor<T>();
        n.value = Tensor<T>();
        n.backward = nullptr;
      }
    }
    return visited;
  }

 private:
  template <typename U>
  friend Var<U> record_op(Tensor<U> value,
                          std::initializer_list<const Var<U> *> inputs,
                          std::function<void(OpNode<U> &)> backward);
  std::vector<std::shared_ptr<OpNode<T>>> nodes_;
};

/// Records an op result. Inputs may be null (absent optional operands).
/// Returns a constant when no input requires a gradient.
template <typename T>
Var<T> record_op(Tensor<T> value, std::initializer_list<const Var<T> *> inputs,
                 std::function<void(OpNode<T> &)> backward) {
  Tape<T> *tape = nullptr;
  for (const Var<T> *v : inputs) {
    if (!v || !v->requires_grad())
      continue;
    if (tape && v->tape() != tape)
      throw Error("op inputs were recorded on different tapes");
    tape = v->tape();
  }
  if (!tape)
    return constant(std::move(value));
  auto n = std::make_shared<OpNode<T>>();
  n->value = std::move(value);
  n->tape = tape;
  n->requires_grad = true;
  n->leaf = false;
  n->backward = std::move(backward);
  static const auto dummy = std::make_shared<OpNode<T>>();
  for (const Var<T> *v : inputs)
    n->inputs.push_back(v && v->defined() ? v->node() : dummy);
  tape->nodes_.push_back(n);
  return Var<T>(std::move(n));
}

} // namespace lasd
