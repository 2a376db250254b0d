#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "dsdlab/tensor.hpp"

namespace dsdlab {

using NodeId = std::size_t;

enum class OpKind {
  Leaf,
  Constant,
  MatMul,
  Add,
  Sub,
  Mul,
  Tanh,
  Sigmoid,
  Exp,
  Log,
  Softmax,
  LogSoftmax,
  Sum,
  Mean,
  Concat,
  SliceCols,
  Gather,
};

const char* op_name(OpKind kind);

class Tape;

// Op-specific data: gather indices, slice offset, concat axis.
struct OpAux {
  std::vector<std::size_t> indices;
  std::size_t offset = 0;
  std::size_t axis = 0;
};

// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  NodeId id = 0;

  const Tensor& value() const;
};

// Records eagerly evaluated ops and replays them in reverse for gradients.
// Nodes are appended in evaluation order, so inputs always precede consumers.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value);
  Var constant(Tensor value);

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  bool has_grad(NodeId id) const;
  const Tensor& grad(NodeId id) const;
  OpKind kind(NodeId id) const { return nodes_.at(id).kind; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_.at(id).inputs; }
  std::size_t size() const { return nodes_.size(); }

  // Reverse-mode sweep from a scalar root. Clears earlier gradients first.
  void backward(Var root);

  using Aux = OpAux;

  Var record(OpKind kind, Tensor value, std::vector<NodeId> inputs, Aux aux = {});

 private:
  struct Node {
    OpKind kind;
    Tensor value;
    std::vector<NodeId> inputs;
    Aux aux;
    bool requires_grad = false;
    Tensor grad;
    bool grad_ready = false;
  };

  Tensor& grad_buffer(NodeId id);
  void propagate(NodeId id);

  std::vector<Node> nodes_;
};

// Differentiable ops. Binary elementwise ops accept a right operand that is
// either the same shape, a [1 x n] row (bias broadcast over rows) or an
// [m x 1] column (per-row scale/mask).
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var tanh(Var x);
Var sigmoid(Var x);
Var exp(Var x);
Var log(Var x);
Var softmax(Var x);
Var log_softmax(Var x);
Var sum(Var x);
Var mean(Var x);
// axis 0 stacks rows, axis 1 joins columns.
Var concat(std::span<const Var> parts, std::size_t axis);
Var slice_cols(Var x, std::size_t begin, std::size_t count);
// Row gather: out[r] = table[indices[r]]. Embedding lookup.
Var gather(Var table, std::span<const std::size_t> indices);

// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
// for a scalar function built on a tape.
double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double eps = 1e-5);

// Same measure for a function with a separately supplied analytic gradient.
double grad_check(const std::function<double(const Tensor&)>& f, const Tensor& x,
                  const Tensor& analytic, double eps = 1e-5);

}  // namespace dsdlab
