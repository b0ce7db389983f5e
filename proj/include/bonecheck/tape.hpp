#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bonecheck/error.hpp"
#include "bonecheck/tensor.hpp"

namespace bonecheck {

template <typename T>
class Tape;

/// Handle to a tensor recorded on a tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// What a backward function sees. `grad_inputs[i]` is null when input i
/// does not participate in differentiation.
template <typename T>
struct BackwardContext {
  std::span<const Tensor<T>* const> inputs;
  const Tensor<T>& output;
  const Tensor<T>& grad_output;
  std::span<Tensor<T>* const> grad_inputs;
};

/// Gradients produced by one backward pass, indexed by tape node.
template <typename T>
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<std::optional<Tensor<T>>> grads) : grads_(std::move(grads)) {}

  bool has(const Var<T>& v) const { return v.id() < grads_.size() && grads_[v.id()].has_value(); }

  const Tensor<T>& operator[](const Var<T>& v) const {
    if (!has(v)) throw InvalidArgument("no gradient recorded for tape node " + std::to_string(v.id()));
    return *grads_[v.id()];
  }

 private:
  std::vector<std::optional<Tensor<T>>> grads_;
};

/// Records forward operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order. A tape is single-owner: do not share it across threads.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(const BackwardContext<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), {}, nullptr, false); }
  Var<T> parameter(Tensor<T> value) { return push(std::move(value), {}, nullptr, true); }

  /// Records an operation output. The node participates in differentiation
  /// when any input does.
  Var<T> record(Tensor<T> value, std::vector<Var<T>> inputs, BackwardFn backward) {
    bool needs = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const auto& in : inputs) {
      check_owned(in);
      needs = needs || nodes_[in.id()].requires_grad;
      ids.push_back(in.id());
    }
    return push(std::move(value), std::move(ids), needs ? std::move(backward) : nullptr, needs);
  }

  const Tensor<T>& value(const Var<T>& v) const {
    check_owned(v);
    return nodes_[v.id()].value;
  }

  bool requires_grad(const Var<T>& v) const {
    check_owned(v);
    return nodes_[v.id()].requires_grad;
  }

  std::size_t size() const { return nodes_.size(); }

  /// Reverse pass from a scalar loss. Does not modify the tape, so repeated
  /// calls give identical results. Grad-enabled leaves that the loss does not
  /// reach receive zero gradients.
  Gradients<T> backward(const Var<T>& loss) const {
    if (loss.tape() != this || loss.id() >= nodes_.size()) {
      throw InvalidArgument("loss tensor is not recorded on this tape");
    }
    const auto& root = nodes_[loss.id()];
    if (root.value.size() != 1) {
      throw ShapeError("backward needs a scalar loss, got shape " + shape_string(root.value.shape()));
    }

    std::vector<std::optional<Tensor<T>>> grads(nodes_.size());
    grads[loss.id()] = Tensor<T>(root.value.shape(), T{1});

    std::vector<const Tensor<T>*> in_values;
    std::vector<Tensor<T>*> in_grads;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      const Node& node = nodes_[i];
      if (!grads[i] || !node.backward) continue;
      in_values.clear();
      in_grads.clear();
      for (std::size_t in : node.inputs) {
        in_values.push_back(&nodes_[in].value);
        if (nodes_[in].requires_grad) {
          if (!grads[in]) grads[in] = Tensor<T>(nodes_[in].value.shape());
          in_grads.push_back(&*grads[in]);
        } else {
          in_grads.push_back(nullptr);
        }
      }
      node.backward(BackwardContext<T>{in_values, node.value, *grads[i], in_grads});
    }

    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].requires_grad && nodes_[i].inputs.empty() && !grads[i]) {
        grads[i] = Tensor<T>(nodes_[i].value.shape());
      }
    }
    return Gradients<T>(std::move(grads));
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  void check_owned(const Var<T>& v) const {
    if (v.tape() != this || v.id() >= nodes_.size()) {
      throw InvalidArgument("tensor handle does not belong to this tape");
    }
  }

  Var<T> push(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(fn), requires_grad});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  if (!tape_) throw InvalidArgument("empty tensor handle");
  return tape_->value(*this);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_ && tape_->requires_grad(*this);
}

}  // namespace bonecheck
