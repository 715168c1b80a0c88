#pragma once

// Define-by-run reverse-mode differentiation over Tensor values.
//
// A Tape records every op executed against it. Ops are free functions taking
// and returning Var handles; each op computes its value eagerly and, when any
// input requires a gradient, stores a backward closure. Tape::backward walks
// the record in exact reverse order. Parameters live outside the tape and
// receive accumulated gradients when the tape is replayed.

#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dart/tensor.hpp"

namespace dart {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;  // same shape as value once zero_grad() or backward() has run

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}
  void zero_grad() { grad = Tensor(value.shape(), 0.0); }
};

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  std::size_t rank() const { return value().rank(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Backward rule: receives the output gradient, the op's output value, and
/// one slot per input; a slot is null when that input does not need a
/// gradient. Rules accumulate (+=) into the slots.
using BackwardFn =
    std::function<void(const Tensor& out_grad, const Tensor& out, std::span<Tensor* const> in_grads)>;

class Tape {
 public:
  /// A tape built with track_gradients=false records values only; param()
  /// and input() leaves then behave like constants.
  explicit Tape(bool track_gradients = true) : tracking_(track_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf whose gradient is kept on the tape (see grad()).
  Var input(Tensor value);
  /// Leaf bound to a parameter; backward() adds into p.grad.
  Var param(Parameter& p);

  /// Records a custom op. The output must be finite.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  /// Seeds d(root)/d(root) = 1; root must hold exactly one element.
  void backward(Var root);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  /// Gradient accumulated at a node during the last backward (empty if none).
  const Tensor& grad(Var v) const { return nodes_.at(v.id()).grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  Var push(Node node);

  std::deque<Node> nodes_;  // deque: values stay addressable while ops append
  bool tracking_ = true;
};

// ---------------------------------------------------------------------------
// Differentiable ops. Each has an analytic backward rule.

Var add(Var a, Var b);  // b's shape must equal a's or be a suffix of it
Var sub(Var a, Var b);  // same shapes
Var mul(Var a, Var b);  // b's shape must equal a's or be a suffix of it
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var relu(Var a);
Var sigmoid(Var a);
Var gelu(Var a);
Var sum(Var a);
Var mean(Var a);

/// Batched matrix product over the last two axes. Leading axes must match,
/// or b may be rank 2 (shared across a's batch).
Var matmul(Var a, Var b);
/// x[.., in] * weight[out, in]^T + bias[out]. bias may be omitted.
Var linear(Var x, Var weight, std::optional<Var> bias = std::nullopt);

/// Softmax over the last axis. mask (if given) has x's shape or a suffix of
/// it; masked entries produce exactly 0.
Var masked_softmax_lastdim(Var x, const BoolTensor* mask = nullptr);

/// Same-size cross-correlation of input[C_in,H,W] with kernel[C_out,C_in,k,k]
/// under reflect padding.
Var conv2d(Var input, Var kernel, std::optional<Var> bias = std::nullopt);

Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

/// [C,H,W] -> [C]
Var global_avg_pool(Var x);
Var global_max_pool(Var x);
/// [C,H,W] -> [1,H,W]
Var channel_mean(Var x);
Var channel_max(Var x);
/// x[C, ...] scaled per leading-axis entry by gate[C].
Var mul_channels(Var x, Var gate);

Var reshape(Var x, Shape shape);
Var permute(Var x, const std::vector<std::size_t>& axes);
Var concat(const std::vector<Var>& parts, std::size_t axis);
/// Treats x as rows along axis 0 and gathers them: out[k, ...] = x[indices[k], ...].
/// Repeated indices are allowed; their gradients accumulate.
Var gather_rows(Var x, std::vector<std::size_t> indices);

// ---------------------------------------------------------------------------
// Finite-difference gradient check.

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  bool passed(double tolerance = 1e-4) const { return max_rel_error <= tolerance; }
};

/// Relative error |a - n| / max(|a|, |n|, 1e-8).
double relative_error(double analytic, double numeric);

/// Compares tape gradients of the scalar built by `loss` against central
/// differences (f(p+h) - f(p-h)) / 2h for every element of every parameter.
/// `loss` must bind the parameters through Tape::param.
GradCheckReport grad_check(const std::function<Var(Tape&)>& loss, std::span<Parameter* const> params,
                           double h = 1e-5);

}  // namespace dart
