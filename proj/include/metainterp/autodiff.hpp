// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over dense matrices.
//
// A Tape records every primitive in execution order. Gradients are themselves
// expressed with tape primitives, so with create_graph set a backward pass is
// recorded and can be differentiated again (Hessian-vector products).
//
// A Tape and every Var bound to it belong to one thread.
#pragma once

#include <cstdint>
#include <deque>
#include <memory>
#include <span>
#include <vector>

#include "metainterp/tensor.hpp"

namespace mi::ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape* tape() const noexcept { return tape_; }
  std::uint32_t id() const noexcept { return id_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return shape().rows; }
  std::size_t cols() const { return shape().cols; }
  double item() const { return value().item(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

enum class Op : std::uint8_t {
  kLeaf,
  kMatMul,
  kTranspose,
  kAdd,
  kSub,
  kMul,
  kMulConst,
  kAddConst,
  kScale,
  kAddScalar,
  kExp,
  kLog,
  kPow,
  kRelu,
  kLeakyRelu,
  kSum,
  kExpand,
  kSumRows,
  kSumCols,
  kRepeatRows,
  kRepeatCols,
  kAddRow,
  kConcatCols,
  kConcatRows,
  kSliceCols,
  kSliceRows,
  kEmbedCols,
  kEmbedRows,
  kSoftmaxRows,
  kLogSoftmaxRows,
};

/// Per-node parameters of a primitive (scale factor, slice bounds, constant operand).
struct OpAttrs {
  double scalar = 0.0;
  std::size_t a = 0;
  std::size_t b = 0;
  std::shared_ptr<const Tensor> constant;
};

class Tape {
 public:
  using Attrs = OpAttrs;

  /// With record=false nothing is differentiable: every node is a constant.
  explicit Tape(bool record = true) : recording_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable leaf.
  Var variable(Tensor value);
  /// Non-differentiable leaf.
  Var constant(Tensor value);

  std::size_t size() const noexcept { return nodes_.size(); }
  bool recording() const noexcept { return recording_; }
  void set_recording(bool on) noexcept { recording_ = on; }

  const Tensor& value(std::uint32_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::uint32_t id) const { return nodes_.at(id).requires_grad; }

  /// Recomputes every node from the leaves in recorded order.
  std::vector<Tensor> replay() const;

  /// Records a primitive. Used by the op functions below.
  Var apply(Op op, std::span<const Var> inputs, Attrs attrs = {});

 private:
  friend std::vector<Var> grad(std::span<const Var>, std::span<const Var>, std::span<const Var>,
                               bool);

  struct Node {
    Op op = Op::kLeaf;
    Tensor value;
    std::vector<std::uint32_t> inputs;
    Attrs attrs;
    bool requires_grad = false;
  };

  void backward(std::uint32_t id, const Var& grad_out, std::vector<Var>& grads);

  // deque: push_back keeps references to existing nodes valid.
  std::deque<Node> nodes_;
  bool recording_ = true;
};

/// Temporarily switches recording on or off, restoring the previous setting.
class RecordingScope {
 public:
  RecordingScope(Tape& tape, bool on) : tape_(tape), previous_(tape.recording()) {
    tape_.set_recording(on);
  }
  ~RecordingScope() { tape_.set_recording(previous_); }
  RecordingScope(const RecordingScope&) = delete;
  RecordingScope& operator=(const RecordingScope&) = delete;

 private:
  Tape& tape_;
  bool previous_;
};

/// Vector-Jacobian products of `outputs` with respect to `inputs`.
///
/// grad_outputs supplies one cotangent per output; when empty every output
/// must be 1×1 and is seeded with 1. Inputs that the outputs do not depend on
/// receive zeros. With create_graph the returned gradients are differentiable.
/// Throws GraphError for inputs on another tape or inputs that are constants.
std::vector<Var> grad(std::span<const Var> outputs, std::span<const Var> inputs,
                      std::span<const Var> grad_outputs, bool create_graph);

std::vector<Var> grad(const Var& output, std::span<const Var> inputs, bool create_graph = false);

// Primitives. Shapes are explicit; the only broadcast is add_row (m×n + 1×n).
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var mul_const(const Var& a, Tensor c);
Var add_const(const Var& a, Tensor c);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var neg(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var pow(const Var& a, double p);
Var relu(const Var& a);
Var leaky_relu(const Var& a, double slope);
Var sum(const Var& a);
Var mean(const Var& a);
Var expand(const Var& scalar, Shape shape);
Var sum_rows(const Var& a);                 // m×n -> 1×n
Var sum_cols(const Var& a);                 // m×n -> m×1
Var repeat_rows(const Var& row, std::size_t m);   // 1×n -> m×n
Var repeat_cols(const Var& col, std::size_t n);   // m×1 -> m×n
Var add_row(const Var& a, const Var& row);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(const Var& a, std::size_t begin, std::size_t width);
Var slice_rows(const Var& a, std::size_t begin, std::size_t count);
Var embed_cols(const Var& a, std::size_t total, std::size_t begin);
Var embed_rows(const Var& a, std::size_t total, std::size_t begin);
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
/// Row-wise normalization to zero mean and unit variance, then gain ⊙ x + bias.
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
/// Inverted dropout with a caller-supplied binary mask.
Var dropout(const Var& x, const Tensor& mask, double rate);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

}  // namespace mi::ad
