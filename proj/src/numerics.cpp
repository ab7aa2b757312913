#include "smope/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace smope {

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ (" + std::to_string(a.cols()) +
                         " vs " + std::to_string(b.rows()) + ")");
  }
  return a * b;
}

Vector softmax_masked(const Vector& logits, const std::vector<bool>& mask) {
  if (static_cast<Eigen::Index>(mask.size()) != logits.size()) {
    throw DimensionError("softmax_masked: mask length differs from logits length");
  }
  double max_logit = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    if (mask[static_cast<std::size_t>(i)]) {
      max_logit = std::max(max_logit, logits(i));
    }
  }
  if (!std::isfinite(max_logit)) {
    throw DimensionError("softmax_masked: all entries masked");
  }
  Vector out = Vector::Zero(logits.size());
  double denom = 0.0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    if (mask[static_cast<std::size_t>(i)]) {
      const double e = std::exp(logits(i) - max_logit);
      out(i) = e;
      denom += e;
    }
  }
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    if (mask[static_cast<std::size_t>(i)]) {
      out(i) /= denom;
    }
  }
  return out;
}

Matrix softmax_masked_rows(const Matrix& logits, const std::vector<bool>& mask) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    out.row(r) = softmax_masked(logits.row(r).transpose(), mask).transpose();
  }
  return out;
}

GradCheckReport finite_diff_check(const std::function<double()>& loss_fn,
                                  std::span<DifferentiableParam* const> params, double step,
                                  double tol) {
  if (step < 1e-6 || step > 1e-3) {
    throw ConfigError("finite_diff_check: step must lie in [1e-6, 1e-3]");
  }
  // The analytic gradients are snapshot first; the perturbation loop below
  // only ever calls the value-side loss.
  std::vector<Matrix> analytic;
  analytic.reserve(params.size());
  for (const auto* p : params) {
    analytic.push_back(p->grad);
  }

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    DifferentiableParam& p = *params[pi];
    for (Eigen::Index r = 0; r < p.value.rows(); ++r) {
      for (Eigen::Index c = 0; c < p.value.cols(); ++c) {
        const double original = p.value(r, c);
        p.value(r, c) = original + step;
        const double f_plus = loss_fn();
        p.value(r, c) = original - step;
        const double f_minus = loss_fn();
        p.value(r, c) = original;
        ensure_finite(f_plus, "finite_diff_check loss");
        ensure_finite(f_minus, "finite_diff_check loss");

        const double numeric = (f_plus - f_minus) / (2.0 * step);
        const double a = analytic[pi](r, c);
        const double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
        ++report.entries_checked;
        if (rel >= report.max_rel_error) {
          report.max_rel_error = rel;
          report.worst = GradCheckEntry{p.name, r, c, a, numeric, rel};
        }
      }
    }
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

}  // namespace smope
