// SPDX-License-Identifier: Apache-2.0
#include "metainterp/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "metainterp/errors.hpp"

namespace mi::ad {

const Tensor& Var::value() const {
  if (tape_ == nullptr) throw GraphError("use of an unbound Var");
  return tape_->value(id_);
}

bool Var::requires_grad() const {
  if (tape_ == nullptr) throw GraphError("use of an unbound Var");
  return tape_->requires_grad(id_);
}

namespace {

void require(bool ok, const char* op, const Shape& a, const Shape& b) {
  if (!ok) throw DimensionError(std::string(op) + ": " + a.str() + " vs " + b.str());
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), op, a.shape(), b.shape());
}

template <class F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <class F>
Tensor zip(const Tensor& a, const Tensor& b, const char* op, F f) {
  require_same_shape(a, b, op);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

Tensor softmax_rows_value(const Tensor& a, bool log_space) {
  Tensor out(a.shape());
  const std::size_t n = a.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c) mx = std::max(mx, a(r, c));
    double total = 0.0;
    for (std::size_t c = 0; c < n; ++c) total += std::exp(a(r, c) - mx);
    if (log_space) {
      const double lse = std::log(total);
      for (std::size_t c = 0; c < n; ++c) out(r, c) = a(r, c) - mx - lse;
    } else {
      for (std::size_t c = 0; c < n; ++c) out(r, c) = std::exp(a(r, c) - mx) / total;
    }
  }
  return out;
}

Tensor compute(Op op, std::span<const Tensor* const> in, const Tape::Attrs& at) {
  switch (op) {
    case Op::kLeaf:
      throw GraphError("compute() on a leaf");
    case Op::kMatMul:
      return mi::matmul(*in[0], *in[1]);
    case Op::kTranspose:
      return mi::transpose(*in[0]);
    case Op::kAdd:
      return zip(*in[0], *in[1], "add", [](double x, double y) { return x + y; });
    case Op::kSub:
      return zip(*in[0], *in[1], "sub", [](double x, double y) { return x - y; });
    case Op::kMul:
      return zip(*in[0], *in[1], "mul", [](double x, double y) { return x * y; });
    case Op::kMulConst:
      return zip(*in[0], *at.constant, "mul_const", [](double x, double y) { return x * y; });
    case Op::kAddConst:
      return zip(*in[0], *at.constant, "add_const", [](double x, double y) { return x + y; });
    case Op::kScale: {
      const double s = at.scalar;
      return map(*in[0], [s](double x) { return s * x; });
    }
    case Op::kAddScalar: {
      const double s = at.scalar;
      return map(*in[0], [s](double x) { return x + s; });
    }
    case Op::kExp:
      return map(*in[0], [](double x) { return std::exp(x); });
    case Op::kLog:
      for (double v : in[0]->data()) {
        if (!(v > 0.0)) throw DomainError("log of nonpositive entry " + std::to_string(v));
      }
      return map(*in[0], [](double x) { return std::log(x); });
    case Op::kPow: {
      const double p = at.scalar;
      const bool integral = p == std::floor(p);
      for (double v : in[0]->data()) {
        if ((!integral && v < 0.0) || (p < 0.0 && v == 0.0)) {
          throw DomainError("pow(" + std::to_string(v) + ", " + std::to_string(p) + ")");
        }
      }
      return map(*in[0], [p](double x) { return std::pow(x, p); });
    }
    case Op::kRelu:
      return map(*in[0], [](double x) { return x > 0.0 ? x : 0.0; });
    case Op::kLeakyRelu: {
      const double s = at.scalar;
      return map(*in[0], [s](double x) { return x > 0.0 ? x : s * x; });
    }
    case Op::kSum: {
      double s = 0.0;
      for (double v : in[0]->data()) s += v;
      return Tensor::scalar(s);
    }
    case Op::kExpand:
      if (in[0]->size() != 1) throw DimensionError("expand of non-scalar " + in[0]->shape().str());
      return Tensor(Shape{at.a, at.b}, (*in[0])[0]);
    case Op::kSumRows: {
      const Tensor& a = *in[0];
      Tensor out(1, a.cols());
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) out[c] += a(r, c);
      return out;
    }
    case Op::kSumCols: {
      const Tensor& a = *in[0];
      Tensor out(a.rows(), 1);
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) out[r] += a(r, c);
      return out;
    }
    case Op::kRepeatRows: {
      const Tensor& a = *in[0];
      if (a.rows() != 1) throw DimensionError("repeat_rows expects a row, got " + a.shape().str());
      Tensor out(at.a, a.cols());
      for (std::size_t r = 0; r < at.a; ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) out(r, c) = a[c];
      return out;
    }
    case Op::kRepeatCols: {
      const Tensor& a = *in[0];
      if (a.cols() != 1) throw DimensionError("repeat_cols expects a column, got " + a.shape().str());
      Tensor out(a.rows(), at.a);
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < at.a; ++c) out(r, c) = a[r];
      return out;
    }
    case Op::kAddRow: {
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      require(b.rows() == 1 && b.cols() == a.cols(), "add_row", a.shape(), b.shape());
      Tensor out = a;
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) out(r, c) += b[c];
      return out;
    }
    case Op::kConcatCols: {
      const std::size_t m = in[0]->rows();
      std::size_t n = 0;
      for (const Tensor* t : in) {
        require(t->rows() == m, "concat_cols", in[0]->shape(), t->shape());
        n += t->cols();
      }
      Tensor out(m, n);
      std::size_t off = 0;
      for (const Tensor* t : in) {
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < t->cols(); ++c) out(r, off + c) = (*t)(r, c);
        off += t->cols();
      }
      return out;
    }
    case Op::kConcatRows: {
      const std::size_t n = in[0]->cols();
      std::size_t m = 0;
      for (const Tensor* t : in) {
        require(t->cols() == n, "concat_rows", in[0]->shape(), t->shape());
        m += t->rows();
      }
      std::vector<double> data;
      data.reserve(m * n);
      for (const Tensor* t : in) data.insert(data.end(), t->data().begin(), t->data().end());
      return Tensor(Shape{m, n}, std::move(data));
    }
    case Op::kSliceCols: {
      const Tensor& a = *in[0];
      if (at.a + at.b > a.cols()) throw DimensionError("slice_cols out of range on " + a.shape().str());
      Tensor out(a.rows(), at.b);
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < at.b; ++c) out(r, c) = a(r, at.a + c);
      return out;
    }
    case Op::kSliceRows: {
      const Tensor& a = *in[0];
      if (at.a + at.b > a.rows()) throw DimensionError("slice_rows out of range on " + a.shape().str());
      auto first = a.data().begin() + static_cast<std::ptrdiff_t>(at.a * a.cols());
      return Tensor(Shape{at.b, a.cols()},
                    std::vector<double>(first, first + static_cast<std::ptrdiff_t>(at.b * a.cols())));
    }
    case Op::kEmbedCols: {
      const Tensor& a = *in[0];
      if (at.b + a.cols() > at.a) throw DimensionError("embed_cols out of range");
      Tensor out(a.rows(), at.a);
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) out(r, at.b + c) = a(r, c);
      return out;
    }
    case Op::kEmbedRows: {
      const Tensor& a = *in[0];
      if (at.b + a.rows() > at.a) throw DimensionError("embed_rows out of range");
      Tensor out(at.a, a.cols());
      std::copy(a.data().begin(), a.data().end(),
                out.data().begin() + static_cast<std::ptrdiff_t>(at.b * a.cols()));
      return out;
    }
    case Op::kSoftmaxRows:
      return softmax_rows_value(*in[0], false);
    case Op::kLogSoftmaxRows:
      return softmax_rows_value(*in[0], true);
  }
  throw GraphError("unknown op");
}

Tensor relu_mask(const Tensor& a, double slope) {
  return map(a, [slope](double x) { return x > 0.0 ? 1.0 : slope; });
}

}  // namespace

Var Tape::variable(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::apply(Op op, std::span<const Var> inputs, Attrs attrs) {
  std::vector<const Tensor*> values;
  values.reserve(inputs.size());
  bool needs_grad = false;
  Node n;
  n.op = op;
  n.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (v.tape() != this) throw GraphError("operand belongs to a different tape");
    values.push_back(&nodes_[v.id()].value);
    needs_grad = needs_grad || nodes_[v.id()].requires_grad;
    n.inputs.push_back(v.id());
  }
  n.value = compute(op, values, attrs);
  n.attrs = std::move(attrs);
  n.requires_grad = recording_ && needs_grad;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

std::vector<Tensor> Tape::replay() const {
  std::vector<Tensor> out;
  out.reserve(nodes_.size());
  std::vector<const Tensor*> values;
  for (const Node& n : nodes_) {
    if (n.op == Op::kLeaf) {
      out.push_back(n.value);
      continue;
    }
    values.clear();
    for (std::uint32_t i : n.inputs) values.push_back(&out[i]);
    out.push_back(compute(n.op, values, n.attrs));
  }
  return out;
}

void Tape::backward(std::uint32_t id, const Var& g, std::vector<Var>& grads) {
  const Node& node = nodes_[id];
  const Var self(this, id);
  auto input = [&](std::size_t k) { return Var(this, node.inputs[k]); };
  auto wants = [&](std::size_t k) { return nodes_[node.inputs[k]].requires_grad; };
  grads.assign(node.inputs.size(), Var{});
  const std::size_t m = node.value.rows();
  const std::size_t n = node.value.cols();

  switch (node.op) {
    case Op::kLeaf:
      return;
    case Op::kMatMul:
      if (wants(0)) grads[0] = ad::matmul(g, ad::transpose(input(1)));
      if (wants(1)) grads[1] = ad::matmul(ad::transpose(input(0)), g);
      return;
    case Op::kTranspose:
      grads[0] = ad::transpose(g);
      return;
    case Op::kAdd:
      grads[0] = g;
      grads[1] = g;
      return;
    case Op::kSub:
      grads[0] = g;
      if (wants(1)) grads[1] = ad::neg(g);
      return;
    case Op::kMul:
      if (wants(0)) grads[0] = ad::mul(g, input(1));
      if (wants(1)) grads[1] = ad::mul(g, input(0));
      return;
    case Op::kMulConst:
      grads[0] = ad::mul_const(g, *node.attrs.constant);
      return;
    case Op::kAddConst:
    case Op::kAddScalar:
      grads[0] = g;
      return;
    case Op::kScale:
      grads[0] = ad::scale(g, node.attrs.scalar);
      return;
    case Op::kExp:
      grads[0] = ad::mul(g, self);
      return;
    case Op::kLog:
      grads[0] = ad::mul(g, ad::pow(input(0), -1.0));
      return;
    case Op::kPow: {
      const double p = node.attrs.scalar;
      grads[0] = ad::mul(g, ad::scale(ad::pow(input(0), p - 1.0), p));
      return;
    }
    case Op::kRelu:
      grads[0] = ad::mul_const(g, relu_mask(nodes_[node.inputs[0]].value, 0.0));
      return;
    case Op::kLeakyRelu:
      grads[0] = ad::mul_const(g, relu_mask(nodes_[node.inputs[0]].value, node.attrs.scalar));
      return;
    case Op::kSum:
      grads[0] = ad::expand(g, nodes_[node.inputs[0]].value.shape());
      return;
    case Op::kExpand:
      grads[0] = ad::sum(g);
      return;
    case Op::kSumRows:
      grads[0] = ad::repeat_rows(g, nodes_[node.inputs[0]].value.rows());
      return;
    case Op::kSumCols:
      grads[0] = ad::repeat_cols(g, nodes_[node.inputs[0]].value.cols());
      return;
    case Op::kRepeatRows:
      grads[0] = ad::sum_rows(g);
      return;
    case Op::kRepeatCols:
      grads[0] = ad::sum_cols(g);
      return;
    case Op::kAddRow:
      grads[0] = g;
      if (wants(1)) grads[1] = ad::sum_rows(g);
      return;
    case Op::kConcatCols: {
      std::size_t off = 0;
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const std::size_t w = nodes_[node.inputs[k]].value.cols();
        if (wants(k)) grads[k] = ad::slice_cols(g, off, w);
        off += w;
      }
      return;
    }
    case Op::kConcatRows: {
      std::size_t off = 0;
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const std::size_t h = nodes_[node.inputs[k]].value.rows();
        if (wants(k)) grads[k] = ad::slice_rows(g, off, h);
        off += h;
      }
      return;
    }
    case Op::kSliceCols:
      grads[0] = ad::embed_cols(g, nodes_[node.inputs[0]].value.cols(), node.attrs.a);
      return;
    case Op::kSliceRows:
      grads[0] = ad::embed_rows(g, nodes_[node.inputs[0]].value.rows(), node.attrs.a);
      return;
    case Op::kEmbedCols:
      grads[0] = ad::slice_cols(g, node.attrs.b, nodes_[node.inputs[0]].value.cols());
      return;
    case Op::kEmbedRows:
      grads[0] = ad::slice_rows(g, node.attrs.b, nodes_[node.inputs[0]].value.rows());
      return;
    case Op::kSoftmaxRows: {
      // dx = y ⊙ (g - rowsum(g ⊙ y))
      Var inner = ad::repeat_cols(ad::sum_cols(ad::mul(g, self)), n);
      grads[0] = ad::mul(self, ad::sub(g, inner));
      return;
    }
    case Op::kLogSoftmaxRows: {
      // dx = g - softmax(x) ⊙ rowsum(g)
      Var p = ad::softmax_rows(input(0));
      grads[0] = ad::sub(g, ad::mul(p, ad::repeat_cols(ad::sum_cols(g), n)));
      return;
    }
  }
  (void)m;
}

std::vector<Var> grad(std::span<const Var> outputs, std::span<const Var> inputs,
                      std::span<const Var> grad_outputs, bool create_graph) {
  if (outputs.empty()) throw GraphError("grad() needs at least one output");
  Tape* tape = outputs[0].tape();
  if (tape == nullptr) throw GraphError("grad() of an unbound Var");
  for (const Var& o : outputs) {
    if (o.tape() != tape) throw GraphError("grad() outputs span several tapes");
  }
  for (const Var& in : inputs) {
    if (in.tape() != tape) throw GraphError("grad() input is not on the output's tape");
    if (!in.requires_grad()) throw GraphError("grad() input does not require grad");
  }
  if (!grad_outputs.empty() && grad_outputs.size() != outputs.size()) {
    throw GraphError("grad_outputs must match outputs one to one");
  }

  std::uint32_t top = 0;
  for (const Var& o : outputs) top = std::max(top, o.id());
  std::uint32_t bottom = top;
  for (const Var& in : inputs) bottom = std::min(bottom, in.id());

  RecordingScope scope(*tape, create_graph);
  std::vector<Var> adj(static_cast<std::size_t>(top) + 1);
  auto accumulate = [&](std::uint32_t id, const Var& g) {
    adj[id] = adj[id].valid() ? ad::add(adj[id], g) : g;
  };

  for (std::size_t k = 0; k < outputs.size(); ++k) {
    const Var& o = outputs[k];
    Var seed;
    if (grad_outputs.empty()) {
      if (o.shape().numel() != 1) throw DimensionError("grad() of non-scalar output without grad_outputs");
      seed = tape->constant(Tensor(o.shape(), 1.0));
    } else {
      seed = grad_outputs[k];
      if (seed.tape() != tape) throw GraphError("grad_outputs entry is on a different tape");
      if (seed.shape() != o.shape()) {
        throw DimensionError("grad_outputs shape " + seed.shape().str() + " vs output " +
                             o.shape().str());
      }
    }
    if (o.requires_grad()) accumulate(o.id(), seed);
  }

  std::vector<Var> local;
  for (std::int64_t id = top; id >= static_cast<std::int64_t>(bottom); --id) {
    const auto uid = static_cast<std::uint32_t>(id);
    if (!adj[uid].valid()) continue;
    const auto& node = tape->nodes_[uid];
    if (node.op == Op::kLeaf || !node.requires_grad) continue;
    const std::vector<std::uint32_t> node_inputs = node.inputs;
    tape->backward(uid, adj[uid], local);
    for (std::size_t k = 0; k < node_inputs.size(); ++k) {
      if (local[k].valid() && tape->nodes_[node_inputs[k]].requires_grad) {
        accumulate(node_inputs[k], local[k]);
      }
    }
  }

  std::vector<Var> result;
  result.reserve(inputs.size());
  for (const Var& in : inputs) {
    if (in.id() <= top && adj[in.id()].valid()) {
      result.push_back(adj[in.id()]);
    } else {
      result.push_back(tape->constant(Tensor(in.shape(), 0.0)));
    }
  }
  return result;
}

std::vector<Var> grad(const Var& output, std::span<const Var> inputs, bool create_graph) {
  return grad(std::span<const Var>(&output, 1), inputs, {}, create_graph);
}

namespace {
Tape& tape_of(const Var& v) {
  if (!v.valid()) throw GraphError("operation on an unbound Var");
  return *v.tape();
}

Var unary(Op op, const Var& a, Tape::Attrs attrs = {}) {
  const Var in[] = {a};
  return tape_of(a).apply(op, in, std::move(attrs));
}

Var binary(Op op, const Var& a, const Var& b) {
  const Var in[] = {a, b};
  return tape_of(a).apply(op, in);
}

Tape::Attrs scalar_attr(double s) {
  Tape::Attrs at;
  at.scalar = s;
  return at;
}

Tape::Attrs size_attr(std::size_t a, std::size_t b = 0) {
  Tape::Attrs at;
  at.a = a;
  at.b = b;
  return at;
}

Tape::Attrs tensor_attr(Tensor c) {
  Tape::Attrs at;
  at.constant = std::make_shared<const Tensor>(std::move(c));
  return at;
}
}  // namespace

Var matmul(const Var& a, const Var& b) { return binary(Op::kMatMul, a, b); }
Var transpose(const Var& a) { return unary(Op::kTranspose, a); }
Var add(const Var& a, const Var& b) { return binary(Op::kAdd, a, b); }
Var sub(const Var& a, const Var& b) { return binary(Op::kSub, a, b); }
Var mul(const Var& a, const Var& b) { return binary(Op::kMul, a, b); }
Var mul_const(const Var& a, Tensor c) { return unary(Op::kMulConst, a, tensor_attr(std::move(c))); }
Var add_const(const Var& a, Tensor c) { return unary(Op::kAddConst, a, tensor_attr(std::move(c))); }
Var scale(const Var& a, double s) { return unary(Op::kScale, a, scalar_attr(s)); }
Var add_scalar(const Var& a, double s) { return unary(Op::kAddScalar, a, scalar_attr(s)); }
Var neg(const Var& a) { return scale(a, -1.0); }
Var exp(const Var& a) { return unary(Op::kExp, a); }
Var log(const Var& a) { return unary(Op::kLog, a); }
Var pow(const Var& a, double p) { return unary(Op::kPow, a, scalar_attr(p)); }
Var relu(const Var& a) { return unary(Op::kRelu, a); }
Var leaky_relu(const Var& a, double slope) { return unary(Op::kLeakyRelu, a, scalar_attr(slope)); }
Var sum(const Var& a) { return unary(Op::kSum, a); }
Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.shape().numel())); }
Var expand(const Var& s, Shape shape) { return unary(Op::kExpand, s, size_attr(shape.rows, shape.cols)); }
Var sum_rows(const Var& a) { return unary(Op::kSumRows, a); }
Var sum_cols(const Var& a) { return unary(Op::kSumCols, a); }
Var repeat_rows(const Var& row, std::size_t m) { return unary(Op::kRepeatRows, row, size_attr(m)); }
Var repeat_cols(const Var& col, std::size_t n) { return unary(Op::kRepeatCols, col, size_attr(n)); }
Var add_row(const Var& a, const Var& row) { return binary(Op::kAddRow, a, row); }

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  if (parts.size() == 1) return parts[0];
  return tape_of(parts[0]).apply(Op::kConcatCols, parts);
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  if (parts.size() == 1) return parts[0];
  return tape_of(parts[0]).apply(Op::kConcatRows, parts);
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t width) {
  return unary(Op::kSliceCols, a, size_attr(begin, width));
}
Var slice_rows(const Var& a, std::size_t begin, std::size_t count) {
  return unary(Op::kSliceRows, a, size_attr(begin, count));
}
Var embed_cols(const Var& a, std::size_t total, std::size_t begin) {
  return unary(Op::kEmbedCols, a, size_attr(total, begin));
}
Var embed_rows(const Var& a, std::size_t total, std::size_t begin) {
  return unary(Op::kEmbedRows, a, size_attr(total, begin));
}
Var softmax_rows(const Var& a) { return unary(Op::kSoftmaxRows, a); }
Var log_softmax_rows(const Var& a) { return unary(Op::kLogSoftmaxRows, a); }

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const std::size_t m = x.rows();
  const std::size_t n = x.cols();
  if (gain.shape() != Shape{1, n} || bias.shape() != Shape{1, n}) {
    throw DimensionError("layer_norm gain/bias must be 1x" + std::to_string(n));
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  Var mu = scale(sum_cols(x), inv_n);
  Var centered = sub(x, repeat_cols(mu, n));
  Var var = scale(sum_cols(mul(centered, centered)), inv_n);
  Var inv_std = pow(add_scalar(var, eps), -0.5);
  Var normed = mul(centered, repeat_cols(inv_std, n));
  return add_row(mul(normed, repeat_rows(gain, m)), bias);
}

Var dropout(const Var& x, const Tensor& mask, double rate) {
  if (mask.shape() != x.shape()) {
    throw DimensionError("dropout mask " + mask.shape().str() + " vs input " + x.shape().str());
  }
  if (!(rate >= 0.0 && rate < 1.0)) throw DomainError("dropout rate must lie in [0, 1)");
  Tensor scaled = (1.0 / (1.0 - rate)) * mask;
  return mul_const(x, std::move(scaled));
}

}  // namespace mi::ad
