#include "dsdlab/tape.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dsdlab/error.hpp"

namespace dsdlab {

namespace {

enum class Broadcast { None, Row, Col };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.same_shape(b)) return Broadcast::None;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::Row;
  if (b.cols() == 1 && b.rows() == a.rows() && b.rank() == 2) return Broadcast::Col;
  throw DimensionError(std::string(op) + ": incompatible shapes " + a.shape_string() + " and " +
                       b.shape_string());
}

template <typename F>
Tensor binary(const Tensor& a, const Tensor& b, Broadcast mode, F f) {
  Tensor out = a;
  const std::size_t m = a.rows(), n = a.cols();
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double bv = mode == Broadcast::None ? bd[i * n + j] : mode == Broadcast::Row ? bd[j] : bd[i];
      o[i * n + j] = f(o[i * n + j], bv);
    }
  return out;
}

template <typename F>
Tensor unary(const Tensor& a, F f) {
  Tensor out = a;
  for (double& x : out.data()) x = f(x);
  return out;
}

// Folds a full-shape gradient back onto a broadcast operand.
void reduce_into(Tensor& target, const Tensor& full, Broadcast mode, double sign) {
  const std::size_t m = full.rows(), n = full.cols();
  auto t = target.data();
  auto g = full.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t k = mode == Broadcast::None ? i * n + j : mode == Broadcast::Row ? j : i;
      t[k] += sign * g[i * n + j];
    }
}

void accumulate(Tensor& target, const Tensor& g, double scale = 1.0) {
  auto t = target.data();
  auto s = g.data();
  for (std::size_t i = 0; i < t.size(); ++i) t[i] += scale * s[i];
}

Tape& same_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw UsageError("operands live on different tapes");
  return *a.tape;
}

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Constant: return "constant";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Tanh: return "tanh";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Softmax: return "softmax";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Concat: return "concat";
    case OpKind::SliceCols: return "slice_cols";
    case OpKind::Gather: return "gather";
  }
  return "?";
}

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{OpKind::Leaf, std::move(value), {}, {}, true, {}, false});
  return {this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{OpKind::Constant, std::move(value), {}, {}, false, {}, false});
  return {this, nodes_.size() - 1};
}

Var Tape::record(OpKind kind, Tensor value, std::vector<NodeId> inputs, Aux aux) {
  if (!value.all_finite())
    throw NumericError(std::string(op_name(kind)) + " produced a non-finite value");
  bool needs = false;
  for (NodeId in : inputs) {
    if (in >= nodes_.size()) throw UsageError("op input refers to a future node");
    needs = needs || nodes_[in].requires_grad;
  }
  nodes_.push_back(Node{kind, std::move(value), std::move(inputs), std::move(aux), needs, {}, false});
  return {this, nodes_.size() - 1};
}

bool Tape::has_grad(NodeId id) const { return nodes_.at(id).grad_ready; }

const Tensor& Tape::grad(NodeId id) const {
  const Node& n = nodes_.at(id);
  if (!n.grad_ready) throw UsageError("node has no gradient; run backward first");
  return n.grad;
}

Tensor& Tape::grad_buffer(NodeId id) {
  Node& n = nodes_[id];
  if (!n.grad_ready) {
    n.grad = Tensor(n.value.shape(), 0.0);
    n.grad_ready = true;
  }
  return n.grad;
}

void Tape::backward(Var root) {
  if (root.tape != this) throw UsageError("backward root belongs to another tape");
  if (value(root.id).size() != 1) throw UsageError("backward requires a scalar root");
  for (Node& n : nodes_) {
    n.grad_ready = false;
    n.grad = Tensor();
  }
  // Every differentiable node gets exactly one buffer, even when unreachable.
  for (NodeId id = 0; id < nodes_.size(); ++id)
    if (nodes_[id].requires_grad) grad_buffer(id);
  if (!nodes_[root.id].requires_grad) return;
  grad_buffer(root.id)[0] = 1.0;
  for (NodeId id = root.id + 1; id-- > 0;)
    if (nodes_[id].requires_grad) propagate(id);
}

void Tape::propagate(NodeId id) {
  // Inputs always precede id, so references into nodes_ stay valid here.
  const Node& node = nodes_[id];
  const Tensor& g = node.grad;
  const Tensor& y = node.value;
  auto input_needs = [&](std::size_t k) { return nodes_[node.inputs[k]].requires_grad; };
  auto in_value = [&](std::size_t k) -> const Tensor& { return nodes_[node.inputs[k]].value; };

  switch (node.kind) {
    case OpKind::Leaf:
    case OpKind::Constant:
      return;
    case OpKind::MatMul: {
      if (input_needs(0)) accumulate(grad_buffer(node.inputs[0]), kernels::matmul_nt(g, in_value(1)));
      if (input_needs(1)) accumulate(grad_buffer(node.inputs[1]), kernels::matmul_tn(in_value(0), g));
      return;
    }
    case OpKind::Add:
    case OpKind::Sub: {
      const double sign = node.kind == OpKind::Add ? 1.0 : -1.0;
      if (input_needs(0)) accumulate(grad_buffer(node.inputs[0]), g);
      if (input_needs(1)) {
        const Broadcast mode = broadcast_kind(in_value(0), in_value(1), "add");
        reduce_into(grad_buffer(node.inputs[1]), g, mode, sign);
      }
      return;
    }
    case OpKind::Mul: {
      const Tensor& a = in_value(0);
      const Tensor& b = in_value(1);
      const Broadcast mode = broadcast_kind(a, b, "mul");
      if (input_needs(0))
        accumulate(grad_buffer(node.inputs[0]), binary(g, b, mode, [](double x, double v) { return x * v; }));
      if (input_needs(1)) {
        Tensor ga = g;
        auto gd = ga.data();
        auto ad = a.data();
        for (std::size_t i = 0; i < gd.size(); ++i) gd[i] *= ad[i];
        reduce_into(grad_buffer(node.inputs[1]), ga, mode, 1.0);
      }
      return;
    }
    case OpKind::Tanh:
    case OpKind::Sigmoid:
    case OpKind::Exp:
    case OpKind::Log: {
      if (!input_needs(0)) return;
      Tensor& dx = grad_buffer(node.inputs[0]);
      auto d = dx.data();
      auto gd = g.data();
      auto yd = y.data();
      auto xd = in_value(0).data();
      for (std::size_t i = 0; i < d.size(); ++i) {
        switch (node.kind) {
          case OpKind::Tanh: d[i] += gd[i] * (1.0 - yd[i] * yd[i]); break;
          case OpKind::Sigmoid: d[i] += gd[i] * yd[i] * (1.0 - yd[i]); break;
          case OpKind::Exp: d[i] += gd[i] * yd[i]; break;
          default: d[i] += gd[i] / xd[i]; break;
        }
      }
      return;
    }
    case OpKind::Softmax:
    case OpKind::LogSoftmax: {
      if (!input_needs(0)) return;
      Tensor& dx = grad_buffer(node.inputs[0]);
      for (std::size_t r = 0; r < y.rows(); ++r) {
        auto yr = y.row(r);
        auto gr = g.row(r);
        auto dr = dx.row(r);
        if (node.kind == OpKind::Softmax) {
          double dot = 0.0;
          for (std::size_t j = 0; j < yr.size(); ++j) dot += gr[j] * yr[j];
          for (std::size_t j = 0; j < yr.size(); ++j) dr[j] += yr[j] * (gr[j] - dot);
        } else {
          double total = 0.0;
          for (double v : gr) total += v;
          for (std::size_t j = 0; j < yr.size(); ++j) dr[j] += gr[j] - std::exp(yr[j]) * total;
        }
      }
      return;
    }
    case OpKind::Sum:
    case OpKind::Mean: {
      if (!input_needs(0)) return;
      Tensor& dx = grad_buffer(node.inputs[0]);
      const double scale = node.kind == OpKind::Sum ? g[0] : g[0] / static_cast<double>(dx.size());
      for (double& v : dx.data()) v += scale;
      return;
    }
    case OpKind::Concat: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const Tensor& part = in_value(k);
        if (input_needs(k)) {
          Tensor& dp = grad_buffer(node.inputs[k]);
          if (node.aux.axis == 0) {
            auto src = g.data().subspan(offset * g.cols(), part.size());
            auto d = dp.data();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += src[i];
          } else {
            for (std::size_t r = 0; r < part.rows(); ++r) {
              auto dr = dp.row(r);
              auto gr = g.row(r);
              for (std::size_t j = 0; j < dr.size(); ++j) dr[j] += gr[offset + j];
            }
          }
        }
        offset += node.aux.axis == 0 ? part.rows() : part.cols();
      }
      return;
    }
    case OpKind::SliceCols: {
      if (!input_needs(0)) return;
      Tensor& dx = grad_buffer(node.inputs[0]);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto dr = dx.row(r);
        auto gr = g.row(r);
        for (std::size_t j = 0; j < gr.size(); ++j) dr[node.aux.offset + j] += gr[j];
      }
      return;
    }
    case OpKind::Gather: {
      if (!input_needs(0)) return;
      Tensor& dx = grad_buffer(node.inputs[0]);
      for (std::size_t r = 0; r < node.aux.indices.size(); ++r) {
        auto dr = dx.row(node.aux.indices[r]);
        auto gr = g.row(r);
        for (std::size_t j = 0; j < gr.size(); ++j) dr[j] += gr[j];
      }
      return;
    }
  }
}

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  if (a.value().rank() != 2 || b.value().rank() != 2) throw DimensionError("matmul needs matrices");
  return t.record(OpKind::MatMul, kernels::matmul(a.value(), b.value()), {a.id, b.id});
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Broadcast mode = broadcast_kind(a.value(), b.value(), "add");
  return t.record(OpKind::Add, binary(a.value(), b.value(), mode, [](double x, double y) { return x + y; }),
                  {a.id, b.id});
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Broadcast mode = broadcast_kind(a.value(), b.value(), "sub");
  return t.record(OpKind::Sub, binary(a.value(), b.value(), mode, [](double x, double y) { return x - y; }),
                  {a.id, b.id});
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Broadcast mode = broadcast_kind(a.value(), b.value(), "mul");
  return t.record(OpKind::Mul, binary(a.value(), b.value(), mode, [](double x, double y) { return x * y; }),
                  {a.id, b.id});
}

Var tanh(Var x) {
  return x.tape->record(OpKind::Tanh, unary(x.value(), [](double v) { return std::tanh(v); }), {x.id});
}

Var sigmoid(Var x) {
  return x.tape->record(OpKind::Sigmoid,
                        unary(x.value(), [](double v) { return 1.0 / (1.0 + std::exp(-v)); }), {x.id});
}

Var exp(Var x) {
  return x.tape->record(OpKind::Exp, unary(x.value(), [](double v) { return std::exp(v); }), {x.id});
}

Var log(Var x) {
  for (double v : x.value().data())
    if (!(v > 0.0)) throw NumericError("log of a non-positive value");
  return x.tape->record(OpKind::Log, unary(x.value(), [](double v) { return std::log(v); }), {x.id});
}

Var softmax(Var x) {
  if (!x.value().all_finite()) throw NumericError("softmax: non-finite input");
  return x.tape->record(OpKind::Softmax, kernels::softmax_rows(x.value()), {x.id});
}

Var log_softmax(Var x) {
  if (!x.value().all_finite()) throw NumericError("log_softmax: non-finite input");
  return x.tape->record(OpKind::LogSoftmax, kernels::log_softmax_rows(x.value()), {x.id});
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape->record(OpKind::Sum, Tensor::scalar(s), {x.id});
}

Var mean(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape->record(OpKind::Mean, Tensor::scalar(s / static_cast<double>(x.value().size())), {x.id});
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of nothing");
  if (axis > 1) throw DimensionError("concat axis must be 0 or 1");
  Tape& t = *parts.front().tape;
  std::vector<NodeId> ids;
  const Tensor& first = parts.front().value();
  std::size_t rows = 0, cols = 0;
  for (const Var& p : parts) {
    if (p.tape != &t) throw UsageError("concat operands live on different tapes");
    const Tensor& v = p.value();
    if (axis == 0) {
      if (v.cols() != first.cols()) throw DimensionError("concat rows: column count mismatch");
      rows += v.rows();
    } else {
      if (v.rows() != first.rows()) throw DimensionError("concat cols: row count mismatch");
      cols += v.cols();
    }
    ids.push_back(p.id);
  }
  if (axis == 0) cols = first.cols();
  else rows = first.rows();
  Tensor out = Tensor::matrix(rows, cols);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    if (axis == 0) {
      std::copy(v.data().begin(), v.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(offset * cols));
      offset += v.rows();
    } else {
      for (std::size_t r = 0; r < rows; ++r) std::copy(v.row(r).begin(), v.row(r).end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(offset));
      offset += v.cols();
    }
  }
  Tape::Aux aux;
  aux.axis = axis;
  return t.record(OpKind::Concat, std::move(out), std::move(ids), std::move(aux));
}

Var slice_cols(Var x, std::size_t begin, std::size_t count) {
  const Tensor& v = x.value();
  if (count == 0 || begin + count > v.cols()) throw DimensionError("slice_cols out of range");
  Tensor out = Tensor::matrix(v.rows(), count);
  for (std::size_t r = 0; r < v.rows(); ++r)
    std::copy_n(v.row(r).begin() + static_cast<std::ptrdiff_t>(begin), count, out.row(r).begin());
  Tape::Aux aux;
  aux.offset = begin;
  return x.tape->record(OpKind::SliceCols, std::move(out), {x.id}, std::move(aux));
}

Var gather(Var table, std::span<const std::size_t> indices) {
  const Tensor& v = table.value();
  if (indices.empty()) throw DimensionError("gather with no indices");
  Tensor out = Tensor::matrix(indices.size(), v.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= v.rows())
      throw DataError("gather index " + std::to_string(indices[r]) + " outside table of " +
                      std::to_string(v.rows()) + " rows");
    std::copy(v.row(indices[r]).begin(), v.row(indices[r]).end(), out.row(r).begin());
  }
  Tape::Aux aux;
  aux.indices.assign(indices.begin(), indices.end());
  return table.tape->record(OpKind::Gather, std::move(out), {table.id}, std::move(aux));
}

double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double eps) {
  Tape tape;
  Var input = tape.leaf(x);
  Var out = f(tape, input);
  tape.backward(out);
  const Tensor analytic = tape.grad(input.id);
  auto eval = [&](const Tensor& point) {
    Tape t;
    return f(t, t.leaf(point)).value()[0];
  };
  return grad_check(eval, x, analytic, eps);
}

double grad_check(const std::function<double(const Tensor&)>& f, const Tensor& x, const Tensor& analytic,
                  double eps) {
  if (!(eps > 0.0 && eps <= 1e-3)) throw ConfigError("grad_check eps must lie in (0, 1e-3]");
  if (!analytic.same_shape(x)) throw DimensionError("analytic gradient shape differs from input");
  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = f(probe);
    probe[i] = orig - eps;
    const double down = f(probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace dsdlab
