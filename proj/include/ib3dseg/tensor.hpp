// Copyright 2026 The ib3dseg Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ib3dseg {

using Index = std::int64_t;
using Shape = std::vector<Index>;

Index numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array. Activations use the (N, C, D, H, W) layout.
///
/// Copies share the underlying node, so a Tensor behaves like a handle. Values
/// produced by an op are treated as immutable; only leaf parameters are
/// updated in place, and only between tape executions.
template <typename T>
class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;
  };

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  Index dim(std::size_t i) const { return node_->shape.at(i); }
  Index numel() const { return static_cast<Index>(node_->data.size()); }

  const T* data() const { return node_->data.data(); }
  T* mutable_data() { return node_->data.data(); }
  std::span<const T> values() const { return node_->data; }
  std::span<T> mutable_values() { return node_->data; }

  /// The single value of a one-element tensor.
  T item() const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on);

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  /// Gradient buffer, allocated as zeros on first use.
  std::span<T> mutable_grad();
  /// Drop the gradient buffer.
  void zero_grad();

  /// Deep copy that does not require grad.
  Tensor clone() const;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return Tensor<U>(node_->shape, std::move(out));
  }

  const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Ordered record of executed differentiable ops. backward() replays the
/// recorded adjoints in exact reverse order; gradients accumulate additively.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(BackwardFn fn) { entries_.push_back(std::move(fn)); }
  std::size_t size() const noexcept { return entries_.size(); }
  void clear() { entries_.clear(); }

  /// Seed d(loss)/d(loss) = 1, run every adjoint in reverse, then clear.
  void backward(const Tensor<T>& loss);

 private:
  std::vector<BackwardFn> entries_;
};

/// Tape that ops on this thread record onto, or nullptr (inference mode).
template <typename T>
Tape<T>* active_tape();

/// Makes `tape` the active tape for the current thread for the scope's
/// lifetime; passing nullptr disables recording.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>* tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

namespace detail {

template <typename T>
std::vector<T>& grad_of(typename Tensor<T>::Node& node) {
  if (node.grad.empty()) node.grad.assign(node.data.size(), T(0));
  return node.grad;
}

/// Tape to record onto when recording is enabled and some input needs grad.
template <typename T>
Tape<T>* recording_tape(std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = active_tape<T>();
  if (!tape) return nullptr;
  for (const Tensor<T>* t : inputs)
    if (t && t->defined() && t->requires_grad()) return tape;
  return nullptr;
}

}  // namespace detail

}  // namespace ib3dseg
