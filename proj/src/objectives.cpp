#include "smope/objectives.hpp"

#include <cmath>

#include "smope/numerics.hpp"

namespace smope {

double router_loss(std::span<const RoutingDecision> decisions) {
  if (decisions.empty()) {
    return 0.0;
  }
  double acc = 0.0;
  for (const RoutingDecision& d : decisions) {
    const Vector probs = softmax(d.proxy_scores);
    double mass = 0.0;
    for (int j : d.selected) {
      mass += probs(j);
    }
    acc -= mass;
  }
  return acc / static_cast<double>(decisions.size());
}

ag::Var router_loss_graph(ag::Graph& g, std::span<const RoutedProxy> routed) {
  if (routed.empty()) {
    return g.constant_scalar(0.0);
  }
  std::vector<ag::Var> terms;
  terms.reserve(routed.size());
  for (const RoutedProxy& r : routed) {
    ag::Var mask = g.constant(Matrix::Ones(1, r.scores.cols()));
    ag::Var probs = ag::softmax_masked_rows(r.scores, mask);
    terms.push_back(ag::sum(ag::gather_cols(probs, r.selected)));
  }
  ag::Var stacked = ag::stack_rows(terms);
  return ag::scale(ag::sum(stacked), -1.0 / static_cast<double>(routed.size()));
}

PrototypeSet build_prototype_set(std::span<const Matrix> old_keys_per_layer,
                                 std::span<const Vector> mean_frequencies) {
  if (old_keys_per_layer.size() != mean_frequencies.size()) {
    throw DimensionError("build_prototype_set: per-layer lists differ in length");
  }
  PrototypeSet out;
  for (std::size_t l = 0; l < old_keys_per_layer.size(); ++l) {
    const Matrix& keys = old_keys_per_layer[l];
    const Vector& freq = mean_frequencies[l];
    if (freq.size() != keys.rows()) {
      throw DimensionError("build_prototype_set: frequency length differs from key count");
    }
    const double mean = freq.mean();
    std::vector<int> kept;
    for (Eigen::Index j = 0; j < freq.size(); ++j) {
      if (freq(j) >= mean) {
        kept.push_back(static_cast<int>(j));
      }
    }
    Matrix retained(static_cast<Eigen::Index>(kept.size()), keys.cols());
    for (std::size_t i = 0; i < kept.size(); ++i) {
      retained.row(static_cast<Eigen::Index>(i)) = keys.row(kept[i]);
    }
    out.keys_per_layer.push_back(std::move(retained));
    out.source_experts.push_back(std::move(kept));
  }
  return out;
}

double prototype_loss(const PrototypeSet& protos, std::span<const Matrix> current_keys, int k) {
  if (protos.empty()) {
    return 0.0;
  }
  if (protos.keys_per_layer.size() != current_keys.size()) {
    throw DimensionError("prototype_loss: layer counts differ");
  }
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t l = 0; l < current_keys.size(); ++l) {
    const Matrix& keys = current_keys[l];
    const Matrix& ps = protos.keys_per_layer[l];
    for (Eigen::Index p = 0; p < ps.rows(); ++p) {
      const Vector dots = keys * ps.row(p).transpose();
      const std::vector<int> top = select_experts(dots, Vector::Zero(dots.size()), k);
      const Vector probs = softmax(dots);
      double mass = 0.0;
      for (int j : top) {
        mass += probs(j);
      }
      acc -= mass;
      ++count;
    }
  }
  return acc / static_cast<double>(count);
}

ag::Var prototype_loss_graph(ag::Graph& g, const PrototypeSet& protos,
                             std::span<const ag::Var> current_keys, int k,
                             const ProtoSelections* forced) {
  if (protos.empty()) {
    return g.constant_scalar(0.0);
  }
  if (protos.keys_per_layer.size() != current_keys.size()) {
    throw DimensionError("prototype_loss_graph: layer counts differ");
  }
  std::vector<ag::Var> per_layer;
  std::size_t count = 0;
  for (std::size_t l = 0; l < current_keys.size(); ++l) {
    const Matrix& ps = protos.keys_per_layer[l];
    if (ps.rows() == 0) {
      continue;
    }
    ag::Var proto_mat = g.constant(ps);
    ag::Var logits = ag::matmul(proto_mat, ag::transpose(current_keys[l]));  // P x N_p
    ag::Var all_mask = g.constant(Matrix::Ones(1, logits.cols()));
    ag::Var probs = ag::softmax_masked_rows(logits, all_mask);
    // 0/1 selector of each prototype's current top-K keys.
    Matrix sel = Matrix::Zero(ps.rows(), logits.cols());
    for (Eigen::Index p = 0; p < ps.rows(); ++p) {
      std::vector<int> top;
      if (forced != nullptr) {
        top = (*forced)[l][static_cast<std::size_t>(p)];
      } else {
        const Vector dots = logits.value().row(p).transpose();
        top = select_experts(dots, Vector::Zero(dots.size()), k);
      }
      for (int j : top) {
        sel(p, j) = 1.0;
      }
    }
    per_layer.push_back(ag::sum(ag::cmul(probs, g.constant(sel))));
    count += static_cast<std::size_t>(ps.rows());
  }
  ag::Var total = ag::sum(ag::stack_rows(per_layer));
  return ag::scale(total, -1.0 / static_cast<double>(count));
}

double total_loss(double ce, double router, double proto, const LossWeights& w) {
  ensure_finite(ce, "total_loss ce");
  ensure_finite(router, "total_loss router");
  ensure_finite(proto, "total_loss proto");
  if (w.alpha_router < 0.0 || w.alpha_proto < 0.0 || !std::isfinite(w.alpha_router) ||
      !std::isfinite(w.alpha_proto)) {
    throw ConfigError("total_loss: loss weights must be finite and non-negative");
  }
  return ce + w.alpha_router * router + w.alpha_proto * proto;
}

}  // namespace smope
