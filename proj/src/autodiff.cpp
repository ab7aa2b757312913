#include "smope/autodiff.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace smope::ag {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
  return cdf + x * pdf;
}

const Matrix& Var::value() const { return graph->value(*this); }

int Graph::push(Node&& n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

void Graph::reset() {
  nodes_.clear();
  param_nodes_.clear();
}

Var Graph::constant(Matrix value) {
  Node n;
  n.op = Op::kConstant;
  n.value = std::move(value);
  return Var{push(std::move(n)), this};
}

Var Graph::constant_scalar(double value) {
  Matrix m(1, 1);
  m(0, 0) = value;
  return constant(std::move(m));
}

Var Graph::param(DifferentiableParam& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) {
    return Var{it->second, this};
  }
  Node n;
  n.op = Op::kParam;
  n.value = p.value;
  n.requires_grad = grad_enabled_ && p.requires_grad;
  n.bound = &p;
  const int id = push(std::move(n));
  param_nodes_.emplace(&p, id);
  return Var{id, this};
}

const Matrix& Graph::grad(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.grad.size() == 0) {
    static const Matrix empty;
    return empty;
  }
  return n.grad;
}

void Graph::accumulate(int target, const Matrix& g) {
  if (target < 0) {
    return;
  }
  Node& n = nodes_[static_cast<std::size_t>(target)];
  if (!n.requires_grad) {
    return;
  }
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Graph::backward(Var loss) {
  Node& top = nodes_[static_cast<std::size_t>(loss.id)];
  if (top.value.rows() != 1 || top.value.cols() != 1) {
    throw DimensionError("backward: loss node must be 1x1");
  }
  if (!grad_enabled_) {
    throw ConfigError("backward: graph was built with gradients disabled");
  }
  top.grad = Matrix::Ones(1, 1);
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() == 0) {
      continue;
    }
    backprop_node(i);
  }
  for (auto& [param, id] : param_nodes_) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.requires_grad && n.grad.size() != 0) {
      param->grad += n.grad;
    }
  }
}

void Graph::backprop_node(std::size_t i) {
  Node& n = nodes_[i];
  const Matrix& g = n.grad;
  auto val = [&](int id) -> const Matrix& { return nodes_[static_cast<std::size_t>(id)].value; };

  switch (n.op) {
    case Op::kConstant:
    case Op::kParam:
      break;
    case Op::kAdd:
      accumulate(n.a, g);
      accumulate(n.b, g);
      break;
    case Op::kSub:
      accumulate(n.a, g);
      if (wants_grad(n.b)) {
        accumulate(n.b, (-g).eval());
      }
      break;
    case Op::kCmul:
      if (wants_grad(n.a)) {
        accumulate(n.a, g.cwiseProduct(val(n.b)));
      }
      if (wants_grad(n.b)) {
        accumulate(n.b, g.cwiseProduct(val(n.a)));
      }
      break;
    case Op::kScale:
      if (wants_grad(n.a)) {
        accumulate(n.a, (n.alpha * g).eval());
      }
      break;
    case Op::kMatmul:
      if (wants_grad(n.a)) {
        accumulate(n.a, g * val(n.b).transpose());
      }
      if (wants_grad(n.b)) {
        accumulate(n.b, val(n.a).transpose() * g);
      }
      break;
    case Op::kTranspose:
      if (wants_grad(n.a)) {
        accumulate(n.a, g.transpose());
      }
      break;
    case Op::kSliceRows:
      if (wants_grad(n.a)) {
        Node& p = nodes_[static_cast<std::size_t>(n.a)];
        if (p.grad.size() == 0) {
          p.grad = Matrix::Zero(p.value.rows(), p.value.cols());
        }
        p.grad.middleRows(n.i0, n.i1) += g;
      }
      break;
    case Op::kSliceCols:
      if (wants_grad(n.a)) {
        Node& p = nodes_[static_cast<std::size_t>(n.a)];
        if (p.grad.size() == 0) {
          p.grad = Matrix::Zero(p.value.rows(), p.value.cols());
        }
        p.grad.middleCols(n.i0, n.i1) += g;
      }
      break;
    case Op::kGatherRows:
      if (wants_grad(n.a)) {
        Node& p = nodes_[static_cast<std::size_t>(n.a)];
        if (p.grad.size() == 0) {
          p.grad = Matrix::Zero(p.value.rows(), p.value.cols());
        }
        for (std::size_t k = 0; k < n.indices.size(); ++k) {
          p.grad.row(n.indices[k]) += g.row(static_cast<Eigen::Index>(k));
        }
      }
      break;
    case Op::kGatherCols:
      if (wants_grad(n.a)) {
        Node& p = nodes_[static_cast<std::size_t>(n.a)];
        if (p.grad.size() == 0) {
          p.grad = Matrix::Zero(p.value.rows(), p.value.cols());
        }
        for (std::size_t k = 0; k < n.indices.size(); ++k) {
          p.grad.col(n.indices[k]) += g.col(static_cast<Eigen::Index>(k));
        }
      }
      break;
    case Op::kBroadcastRow:
      if (wants_grad(n.a)) {
        accumulate(n.a, g.colwise().sum().eval());
      }
      break;
    case Op::kAddRowBroadcast:
      accumulate(n.a, g);
      if (wants_grad(n.b)) {
        accumulate(n.b, g.colwise().sum().eval());
      }
      break;
    case Op::kMeanRows:
      if (wants_grad(n.a)) {
        const Eigen::Index rows = val(n.a).rows();
        Matrix expanded = (g / static_cast<double>(rows)).replicate(rows, 1);
        accumulate(n.a, expanded);
      }
      break;
    case Op::kRowSums:
      if (wants_grad(n.a)) {
        const Eigen::Index cols = val(n.a).cols();
        accumulate(n.a, (g * Matrix::Ones(1, cols)).eval());
      }
      break;
    case Op::kSum:
      if (wants_grad(n.a)) {
        accumulate(n.a, (g(0, 0) * Matrix::Ones(val(n.a).rows(), val(n.a).cols())).eval());
      }
      break;
    case Op::kStackRows: {
      Eigen::Index offset = 0;
      for (int pid : n.indices) {
        const Eigen::Index r = val(pid).rows();
        if (wants_grad(pid)) {
          accumulate(pid, g.middleRows(offset, r).eval());
        }
        offset += r;
      }
      break;
    }
    case Op::kStackCols: {
      Eigen::Index offset = 0;
      for (int pid : n.indices) {
        const Eigen::Index c = val(pid).cols();
        if (wants_grad(pid)) {
          accumulate(pid, g.middleCols(offset, c).eval());
        }
        offset += c;
      }
      break;
    }
    case Op::kSoftmaxMaskedRows:
      if (wants_grad(n.a)) {
        // Masked entries have value exactly 0, so they drop out on their own.
        const Matrix& y = n.value;
        Matrix gy = g.cwiseProduct(y);
        Vector row_dots = gy.rowwise().sum();
        Matrix dx = gy - y.cwiseProduct(row_dots.replicate(1, y.cols()));
        accumulate(n.a, dx);
      }
      break;
    case Op::kGelu:
      if (wants_grad(n.a)) {
        const Matrix& x = val(n.a);
        Matrix dx(x.rows(), x.cols());
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
          for (Eigen::Index c = 0; c < x.cols(); ++c) {
            dx(r, c) = g(r, c) * gelu_derivative(x(r, c));
          }
        }
        accumulate(n.a, dx);
      }
      break;
    case Op::kLayerNormRows: {
      const Matrix& xhat = n.saved;
      const Matrix& rstd = n.saved2;  // one column, per-row 1/std
      const Matrix& gain = val(n.b);
      if (wants_grad(n.c)) {
        accumulate(n.c, g.colwise().sum().eval());
      }
      if (wants_grad(n.b)) {
        accumulate(n.b, g.cwiseProduct(xhat).colwise().sum().eval());
      }
      if (wants_grad(n.a)) {
        const Eigen::Index cols = xhat.cols();
        Matrix dxhat = g.cwiseProduct(gain.replicate(g.rows(), 1));
        Vector mean_dxhat = dxhat.rowwise().mean();
        Vector mean_dxhat_xhat = dxhat.cwiseProduct(xhat).rowwise().mean();
        Matrix dx = dxhat - mean_dxhat.replicate(1, cols) -
                    xhat.cwiseProduct(mean_dxhat_xhat.replicate(1, cols));
        dx = dx.cwiseProduct(rstd.replicate(1, cols));
        accumulate(n.a, dx);
      }
      break;
    }
    case Op::kCrossEntropy:
      if (wants_grad(n.a)) {
        const Matrix& probs = n.saved;
        Matrix dlogits = probs;
        for (std::size_t k = 0; k < n.indices.size(); ++k) {
          dlogits(static_cast<Eigen::Index>(k), n.indices[k]) -= 1.0;
        }
        dlogits *= g(0, 0) / static_cast<double>(probs.rows());
        accumulate(n.a, dlogits);
      }
      break;
  }
}

namespace {

Graph* same_graph(Var a, Var b) {
  if (a.graph != b.graph) {
    throw DimensionError("autodiff: operands belong to different graphs");
  }
  return a.graph;
}

}  // namespace

Var matmul(Var a, Var b) {
  Graph* g = same_graph(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions differ");
  }
  Graph::Node n;
  n.op = Graph::Op::kMatmul;
  n.a = a.id;
  n.b = b.id;
  n.value = av * bv;
  n.requires_grad = g->wants_grad(a.id) || g->wants_grad(b.id);
  return Var{g->push(std::move(n)), g};
}

Var add(Var a, Var b) {
  Graph* g = same_graph(a, b);
  check_same_shape(a.value(), b.value(), "add");
  Graph::Node n;
  n.op = Graph::Op::kAdd;
  n.a = a.id;
  n.b = b.id;
  n.value = a.value() + b.value();
  n.requires_grad = g->wants_grad(a.id) || g->wants_grad(b.id);
  return Var{g->push(std::move(n)), g};
}

Var sub(Var a, Var b) {
  Graph* g = same_graph(a, b);
  check_same_shape(a.value(), b.value(), "sub");
  Graph::Node n;
  n.op = Graph::Op::kSub;
  n.a = a.id;
  n.b = b.id;
  n.value = a.value() - b.value();
  n.requires_grad = g->wants_grad(a.id) || g->wants_grad(b.id);
  return Var{g->push(std::move(n)), g};
}

Var cmul(Var a, Var b) {
  Graph* g = same_graph(a, b);
  check_same_shape(a.value(), b.value(), "cmul");
  Graph::Node n;
  n.op = Graph::Op::kCmul;
  n.a = a.id;
  n.b = b.id;
  n.value = a.value().cwiseProduct(b.value());
  n.requires_grad = g->wants_grad(a.id) || g->wants_grad(b.id);
  return Var{g->push(std::move(n)), g};
}

Var scale(Var a, double s) {
  Graph* g = a.graph;
  Graph::Node n;
  n.op = Graph::Op::kScale;
  n.a = a.id;
  n.alpha = s;
  n.value = s * a.value();
  n.requires_grad = g->wants_grad(a.id);
  return Var{g->push(std::move(n)), g};
}

Var transpose(Var a) {
  Graph* g = a.graph;
  Graph::Node n;
  n.op = Graph::Op::kTranspose;
  n.a = a.id;
  n.value = a.value().transpose();
  n.requires_grad = g->wants_grad(a.id);
  return Var{g->push(std::move(n)), g};
}

Var slice_rows(Var a, Eigen::Index first, Eigen::Index count) {
  Graph* g = a.graph;
  if (first < 0 || first + count > a.value().rows()) {
    throw DimensionError("slice_rows: range out of bounds");
  }
  Graph::Node n;
  n.op = Graph::Op::kSliceRows;
  n.a = a.id;
  n.i0 = first;
  n.i1 = count;
  n.value = a.value().middleRows(first, count);
  n.requires_grad = g->wants_grad(a.id);
  return Var{g->push(std::move(n)), g};
}

Var slice_cols(Var a, Eigen::Index first, Eigen::Index count) {
  Graph* g = a.graph;
  if (first < 0 || first + count > a.value().cols()) {
    throw DimensionError("slice_cols: range out of bounds");
  }
  Graph::Node n;
  n.op = Graph::Op::kSliceCols;
  n.a = a.id;
  n.i0 = first;
  n.i1 = count;
  n.value = a.value().middleCols(first, count);
  n.requires_grad = g->wants_grad(a.id);
  return Var{g->push(std::move(n)), g};
}

Var gather_rows(Var a, std::vector<int> idx) {
  Graph* g = a.graph;
  const Matrix& av = a.value();
  Matrix out(static_cast<Eigen::Index>(idx.size()), av.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= av.rows()) {
      throw DimensionError("gather_rows: index out of range");
    }
    out.row(static_cast<Eigen::Index>(k)) = av.row(idx[k]);
  }
  Graph::Node n;
  n.op = Graph::Op::kGatherRows;
  n.a = a.id;
  n.indices = std::move(idx);
  n.value = std::move(out);
  n.requires_grad = g->wants_grad(a.id);
  return Var{g->push(std::move(n)), g};
}

Var gather_cols(Var a, std::vector<int> idx) {
  Graph* g = a.graph;
  const Matrix& av = a.value();
  Matrix out(av.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= av.cols()) {
      throw DimensionError("gather_cols: index out of range");
    }
    out.col(static_cast<Eigen::Index>(k)) = av.col(idx[k]);
  }
  Graph::Node n;
  n.op = Graph::Op::kGatherCols;
  n.a = a.id;
  n.indices = std::move(idx);
  n.value = std::move(out);
  n.requires_grad = g->wants_grad(a.id);
  return Var{g->push(std::move(n)), g};
}

Var broadcast_row(Var a, Eigen::Index n_rows) {
  Graph* g = a.graph;
  if (a.value().rows() != 1) {
    throw DimensionError("broadcast_row: expected a single-row operand");
  }
  Graph::Node n;
  n.op = Graph::Op::kBroadcastRow;
  n.a = a.id;
  n.value = a.value().replicate(n_rows, 1);
  n.requires_grad = g->wants_grad(a.id);
  return Var{g->push(std::move(n)), g};
}

Var add_row_broadcast(Var a, Var row) {
  Graph* g = same_graph(a, row);
  if (row.value().rows() != 1 || row.value().cols() != a.value().cols()) {
    throw DimensionError("add_row_broadcast: row shape mismatch");
  }
  Graph::Node n;
  n.op = Graph::Op::kAddRowBroadcast;
  n.a = a.id;
  n.b = row.id;
  n.value = a.value() + row.value().replicate(a.value().rows(), 1);
  n.requires_grad = g->wants_grad(a.id) || g->wants_grad(row.id);
  return Var{g->push(std::move(n)), g};
}

Var mean_rows(Var a) {
  Graph* g = a.graph;
  Graph::Node n;
  n.op = Graph::Op::kMeanRows;
  n.a = a.id;
  n.value = a.value().colwise().mean();
  n.requires_grad = g->wants_grad(a.id);
  return Var{g->push(std::move(n)), g};
}

Var row_sums(Var a) {
  Graph* g = a.graph;
  Graph::Node n;
  n.op = Graph::Op::kRowSums;
  n.a = a.id;
  n.value = a.value().rowwise().sum();
  n.requires_grad = g->wants_grad(a.id);
  return Var{g->push(std::move(n)), g};
}

Var sum(Var a) {
  Graph* g = a.graph;
  Graph::Node n;
  n.op = Graph::Op::kSum;
  n.a = a.id;
  n.value = Matrix::Constant(1, 1, a.value().sum());
  n.requires_grad = g->wants_grad(a.id);
  return Var{g->push(std::move(n)), g};
}

Var stack_rows(std::span<const Var> parts) {
  if (parts.empty()) {
    throw DimensionError("stack_rows: empty part list");
  }
  Graph* g = parts[0].graph;
  Eigen::Index total = 0;
  const Eigen::Index cols = parts[0].value().cols();
  for (const Var& p : parts) {
    same_graph(parts[0], p);
    if (p.value().cols() != cols) {
      throw DimensionError("stack_rows: column count mismatch");
    }
    total += p.value().rows();
  }
  Matrix out(total, cols);
  Graph::Node n;
  n.op = Graph::Op::kStackRows;
  n.indices.reserve(parts.size());
  Eigen::Index offset = 0;
  bool any_grad = false;
  for (const Var& p : parts) {
    out.middleRows(offset, p.value().rows()) = p.value();
    offset += p.value().rows();
    n.indices.push_back(p.id);
    any_grad = any_grad || g->wants_grad(p.id);
  }
  n.value = std::move(out);
  n.requires_grad = any_grad;
  return Var{g->push(std::move(n)), g};
}

Var stack_cols(std::span<const Var> parts) {
  if (parts.empty()) {
    throw DimensionError("stack_cols: empty part list");
  }
  Graph* g = parts[0].graph;
  Eigen::Index total = 0;
  const Eigen::Index rows = parts[0].value().rows();
  for (const Var& p : parts) {
    same_graph(parts[0], p);
    if (p.value().rows() != rows) {
      throw DimensionError("stack_cols: row count mismatch");
    }
    total += p.value().cols();
  }
  Matrix out(rows, total);
  Graph::Node n;
  n.op = Graph::Op::kStackCols;
  n.indices.reserve(parts.size());
  Eigen::Index offset = 0;
  bool any_grad = false;
  for (const Var& p : parts) {
    out.middleCols(offset, p.value().cols()) = p.value();
    offset += p.value().cols();
    n.indices.push_back(p.id);
    any_grad = any_grad || g->wants_grad(p.id);
  }
  n.value = std::move(out);
  n.requires_grad = any_grad;
  return Var{g->push(std::move(n)), g};
}

Var softmax_masked_rows(Var logits, Var mask01) {
  Graph* g = same_graph(logits, mask01);
  const Matrix& x = logits.value();
  const Matrix& m = mask01.value();
  const bool row_mask = m.rows() == 1;
  if (m.cols() != x.cols() || (!row_mask && m.rows() != x.rows())) {
    throw DimensionError("softmax_masked_rows: mask shape mismatch");
  }
  Matrix out = Matrix::Zero(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double max_logit = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (m(row_mask ? 0 : r, c) != 0.0) {
        max_logit = std::max(max_logit, x(r, c));
      }
    }
    if (!std::isfinite(max_logit)) {
      throw DimensionError("softmax_masked_rows: a row has all entries masked");
    }
    double denom = 0.0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (m(row_mask ? 0 : r, c) != 0.0) {
        out(r, c) = std::exp(x(r, c) - max_logit);
        denom += out(r, c);
      }
    }
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (m(row_mask ? 0 : r, c) != 0.0) {
        out(r, c) /= denom;
      }
    }
  }
  Graph::Node n;
  n.op = Graph::Op::kSoftmaxMaskedRows;
  n.a = logits.id;
  n.b = mask01.id;
  n.value = std::move(out);
  n.requires_grad = g->wants_grad(logits.id);
  return Var{g->push(std::move(n)), g};
}

Var gelu(Var a) {
  Graph* g = a.graph;
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      out(r, c) = gelu_value(x(r, c));
    }
  }
  Graph::Node n;
  n.op = Graph::Op::kGelu;
  n.a = a.id;
  n.value = std::move(out);
  n.requires_grad = g->wants_grad(a.id);
  return Var{g->push(std::move(n)), g};
}

Var layer_norm_rows(Var x, Var gain, Var bias, double eps) {
  Graph* g = same_graph(x, gain);
  same_graph(x, bias);
  const Matrix& xv = x.value();
  if (gain.value().rows() != 1 || gain.value().cols() != xv.cols() || bias.value().rows() != 1 ||
      bias.value().cols() != xv.cols()) {
    throw DimensionError("layer_norm_rows: gain/bias must be 1 x cols");
  }
  Matrix xhat(xv.rows(), xv.cols());
  Matrix rstd(xv.rows(), 1);
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    const double inv = 1.0 / std::sqrt(var + eps);
    rstd(r, 0) = inv;
    xhat.row(r) = (xv.row(r).array() - mu) * inv;
  }
  Graph::Node n;
  n.op = Graph::Op::kLayerNormRows;
  n.a = x.id;
  n.b = gain.id;
  n.c = bias.id;
  n.value = xhat.cwiseProduct(gain.value().replicate(xv.rows(), 1)) +
            bias.value().replicate(xv.rows(), 1);
  n.saved = std::move(xhat);
  n.saved2 = std::move(rstd);
  n.requires_grad =
      g->wants_grad(x.id) || g->wants_grad(gain.id) || g->wants_grad(bias.id);
  return Var{g->push(std::move(n)), g};
}

Var cross_entropy(Var logits, std::vector<int> labels) {
  Graph* g = logits.graph;
  const Matrix& x = logits.value();
  if (static_cast<Eigen::Index>(labels.size()) != x.rows()) {
    throw DimensionError("cross_entropy: one label per row required");
  }
  Matrix probs(x.rows(), x.cols());
  double nll = 0.0;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= x.cols()) {
      throw DimensionError("cross_entropy: label out of range");
    }
    const double max_logit = x.row(r).maxCoeff();
    const double denom = (x.row(r).array() - max_logit).exp().sum();
    probs.row(r) = (x.row(r).array() - max_logit).exp() / denom;
    nll -= x(r, y) - max_logit - std::log(denom);
  }
  Graph::Node n;
  n.op = Graph::Op::kCrossEntropy;
  n.a = logits.id;
  n.indices = std::move(labels);
  n.value = Matrix::Constant(1, 1, nll / static_cast<double>(x.rows()));
  n.saved = std::move(probs);
  n.requires_grad = g->wants_grad(logits.id);
  return Var{g->push(std::move(n)), g};
}

}  // namespace smope::ag
