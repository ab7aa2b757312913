#pragma once

#include <span>
#include <unordered_map>
#include <vector>

#include "smope/types.hpp"

namespace smope::ag {

class Graph;

// Lightweight handle into a Graph's node storage.
struct Var {
  int id = -1;
  Graph* graph = nullptr;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

// Reverse-mode tape over dense matrices. Each op records its parents and
// enough payload to replay the chain rule in reverse creation order. With
// gradients disabled the same ops run value-only, which is what evaluation
// passes use.
class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Matrix value);
  Var constant_scalar(double value);

  // Leaf bound to an external parameter; memoized so repeated lookups share
  // one node. On backward() the node gradient is added into `p.grad` when the
  // parameter requires gradients.
  Var param(DifferentiableParam& p);

  // Seeds d(loss)/d(loss) = 1 and propagates to all reachable parents.
  // `loss` must be 1x1.
  void backward(Var loss);

  const Matrix& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  const Matrix& grad(Var v) const;

  void reset();

  std::size_t size() const { return nodes_.size(); }

 private:
  enum class Op {
    kConstant,
    kParam,
    kAdd,
    kSub,
    kCmul,
    kScale,
    kMatmul,
    kTranspose,
    kSliceRows,
    kSliceCols,
    kGatherRows,
    kGatherCols,
    kBroadcastRow,
    kAddRowBroadcast,
    kMeanRows,
    kRowSums,
    kSum,
    kStackRows,
    kStackCols,
    kSoftmaxMaskedRows,
    kGelu,
    kLayerNormRows,
    kCrossEntropy,
  };

  struct Node {
    Op op = Op::kConstant;
    int a = -1, b = -1, c = -1;
    double alpha = 0.0;
    Eigen::Index i0 = 0, i1 = 0;
    std::vector<int> indices;  // gather indices, stack parents, or labels
    Matrix value;
    Matrix grad;
    Matrix saved;   // op-specific forward byproducts (probs, normalized rows)
    Matrix saved2;  // secondary byproduct (reciprocal std per row)
    bool requires_grad = false;
    DifferentiableParam* bound = nullptr;
  };

  int push(Node&& n);
  void accumulate(int target, const Matrix& g);
  void backprop_node(std::size_t i);
  bool wants_grad(int id) const {
    return id >= 0 && nodes_[static_cast<std::size_t>(id)].requires_grad;
  }

  std::vector<Node> nodes_;
  std::unordered_map<DifferentiableParam*, int> param_nodes_;
  bool grad_enabled_;

  // Op builders need access to Node.
  friend Var matmul(Var, Var);
  friend Var add(Var, Var);
  friend Var sub(Var, Var);
  friend Var cmul(Var, Var);
  friend Var scale(Var, double);
  friend Var transpose(Var);
  friend Var slice_rows(Var, Eigen::Index, Eigen::Index);
  friend Var slice_cols(Var, Eigen::Index, Eigen::Index);
  friend Var gather_rows(Var, std::vector<int>);
  friend Var gather_cols(Var, std::vector<int>);
  friend Var broadcast_row(Var, Eigen::Index);
  friend Var add_row_broadcast(Var, Var);
  friend Var mean_rows(Var);
  friend Var row_sums(Var);
  friend Var sum(Var);
  friend Var stack_rows(std::span<const Var>);
  friend Var stack_cols(std::span<const Var>);
  friend Var softmax_masked_rows(Var, Var);
  friend Var gelu(Var);
  friend Var layer_norm_rows(Var, Var, Var, double);
  friend Var cross_entropy(Var, std::vector<int>);
};

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var cmul(Var a, Var b);
Var scale(Var a, double s);
Var transpose(Var a);
Var slice_rows(Var a, Eigen::Index first, Eigen::Index count);
Var slice_cols(Var a, Eigen::Index first, Eigen::Index count);
Var gather_rows(Var a, std::vector<int> idx);
Var gather_cols(Var a, std::vector<int> idx);
Var broadcast_row(Var a, Eigen::Index n_rows);
Var add_row_broadcast(Var a, Var row);
Var mean_rows(Var a);
Var row_sums(Var a);
Var sum(Var a);
Var stack_rows(std::span<const Var> parts);
Var stack_cols(std::span<const Var> parts);

// `mask01` is a constant 0/1 matrix, either 1xC (applied to every row) or the
// full shape of `logits`. Masked entries come out exactly 0 and are excluded
// from the row normalizer.
Var softmax_masked_rows(Var logits, Var mask01);

Var gelu(Var a);
Var layer_norm_rows(Var x, Var gain, Var bias, double eps = 1e-6);

// Mean negative log-likelihood of `labels` under row-wise softmax of the
// logits; returns a 1x1 node.
Var cross_entropy(Var logits, std::vector<int> labels);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }

// GELU as a plain scalar function (exact erf form) plus its derivative; the
// tape op and the theory validator share these.
double gelu_value(double x);
double gelu_derivative(double x);

}  // namespace smope::ag
