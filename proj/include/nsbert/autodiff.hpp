#pragma once

// Reverse-mode differentiation over dense arrays.
//
// A Tape records primitive operations in evaluation order; that record is the
// computation graph. Every node's inputs precede it, so backward() is a single
// reverse sweep. Leaves are constants (data), unnamed variables, or named
// parameters. Gradients flow only into nodes that depend on a variable or
// parameter.
//
// Binary elementwise ops broadcast their right operand only: each of its
// dimensions must equal the left operand's or be 1 (missing leading dimensions
// count as 1). The left operand fixes the output shape.

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nsbert/array.hpp"

namespace nsbert {

template <class T>
class Tape;

template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Array<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Array<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Array<T> value);
  Var<T> variable(Array<T> value);
  Var<T> parameter(const std::string& name, Array<T> value);

  /// Appends a node. Rejects non-finite values, naming the op.
  Var<T> record(const char* op, Array<T> value, bool requires_grad, BackwardFn backward);

  const Array<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const char* op(std::size_t id) const { return nodes_.at(id).op; }
  std::size_t size() const { return nodes_.size(); }

  void accumulate(std::size_t id, const Array<T>& grad);
  void accumulate(std::size_t id, Array<T>&& grad);

  /// Seeds d(output)/d(output) = 1 and sweeps in reverse. Output must hold
  /// exactly one element.
  void backward(Var<T> output);

  /// Gradient of a node after backward(); zeros when the node was not reached.
  Array<T> grad(Var<T> v) const;

  /// Gradient per named parameter recorded on this tape.
  std::map<std::string, Array<T>> parameter_gradients() const;

  const std::vector<std::pair<std::string, std::size_t>>& parameters() const { return params_; }

 private:
  struct Node {
    const char* op = "";
    Array<T> value;
    Array<T> grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, std::size_t>> params_;
};

// Elementwise, right operand broadcast.
template <class T> Var<T> add(Var<T> a, Var<T> b);
template <class T> Var<T> sub(Var<T> a, Var<T> b);
template <class T> Var<T> mul(Var<T> a, Var<T> b);
template <class T> Var<T> div(Var<T> a, Var<T> b);

template <class T> Var<T> scale(Var<T> a, T factor);
template <class T> Var<T> add_scalar(Var<T> a, T offset);
template <class T> Var<T> neg(Var<T> a);
template <class T> Var<T> exp(Var<T> a);
template <class T> Var<T> log(Var<T> a);
template <class T> Var<T> tanh(Var<T> a);
template <class T> Var<T> sigmoid(Var<T> a);
template <class T> Var<T> sqrt(Var<T> a);
template <class T> Var<T> square(Var<T> a);
/// tanh approximation of GELU.
template <class T> Var<T> gelu(Var<T> a);

/// a: [..., m, k], b: [k, n] (shared) or [batch, k, n] with a [batch, m, k].
/// With transpose_b, b is given as [..., n, k].
template <class T> Var<T> matmul(Var<T> a, Var<T> b, bool transpose_b = false);
/// Swaps the last two axes.
template <class T> Var<T> transpose_last(Var<T> a);

/// Softmax over the last axis, computed with row-max subtraction.
template <class T> Var<T> softmax(Var<T> a);
template <class T> Var<T> log_softmax(Var<T> a);
/// softmax(factor * (gain * scores + shift)) over the last axis of
/// scores [B, m, n], fused into one node. gain is [B, 1, 1] and shift is
/// [B, 1, n]; either may be omitted (gain 1, shift 0).
template <class T>
Var<T> attention_softmax(Var<T> scores, T factor, std::optional<Var<T>> gain = std::nullopt,
                         std::optional<Var<T>> shift = std::nullopt);

/// Mean / population variance along `axis`, kept as a size-1 dimension.
template <class T> Var<T> mean(Var<T> a, std::size_t axis);
template <class T> Var<T> variance(Var<T> a, std::size_t axis);
/// Sum of every element, rank-0 result.
template <class T> Var<T> sum(Var<T> a);

template <class T> Var<T> slice(Var<T> a, std::size_t axis, std::size_t start, std::size_t length);
template <class T> Var<T> concat(std::span<const Var<T>> parts, std::size_t axis);
template <class T> Var<T> reshape(Var<T> a, Shape shape);
/// a: [n, c]; picks a[i, index[i]] into shape [n].
template <class T> Var<T> gather(Var<T> a, std::span<const std::size_t> index);

template <class T> Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <class T> Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <class T> Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }
template <class T> Var<T> operator/(Var<T> a, Var<T> b) { return div(a, b); }

/// Ordered, named parameter arrays.
template <class T>
using ParamSet = std::map<std::string, Array<T>>;

template <class U, class T>
ParamSet<U> cast_params(const ParamSet<T>& params) {
  ParamSet<U> out;
  for (const auto& [name, arr] : params) out.emplace(name, arr.template cast<U>());
  return out;
}

/// Binds named parameters to leaves of one tape, creating each leaf once.
template <class T>
class ParamBinder {
 public:
  ParamBinder(Tape<T>& tape, const ParamSet<T>& params) : tape_(tape), params_(params) {}

  Var<T> operator()(const std::string& name);
  Tape<T>& tape() { return tape_; }
  const ParamSet<T>& params() const { return params_; }

 private:
  Tape<T>& tape_;
  const ParamSet<T>& params_;
  std::map<std::string, Var<T>> bound_;
};

}  // namespace nsbert
