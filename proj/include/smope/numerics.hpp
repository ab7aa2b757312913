#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "smope/types.hpp"

namespace smope {

// Checked dense product.
Matrix matmul(const Matrix& a, const Matrix& b);

// Softmax restricted to unmasked entries: masked entries are excluded from
// the normalizer and come out exactly 0. This is how the sparse mixture's
// restricted denominators are realized downstream.
Vector softmax_masked(const Vector& logits, const std::vector<bool>& mask);

// Row-wise variant; `mask` has one entry per column and applies to every row.
Matrix softmax_masked_rows(const Matrix& logits, const std::vector<bool>& mask);

inline Vector softmax(const Vector& logits) {
  return softmax_masked(logits, std::vector<bool>(static_cast<std::size_t>(logits.size()), true));
}

struct GradCheckEntry {
  std::string param;
  Eigen::Index row = 0;
  Eigen::Index col = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t entries_checked = 0;
  bool passed = false;
  GradCheckEntry worst;
};

// Central-difference check of the analytic gradients currently stored in
// `params[i]->grad` against `loss_fn` evaluated at perturbed parameter values.
// Relative error per entry is |a - n| / max(1, |a|, |n|). The loss must be
// deterministic under the caller's RNG discipline; a non-finite loss raises
// NumericError and `step` outside [1e-6, 1e-3] raises ConfigError.
GradCheckReport finite_diff_check(const std::function<double()>& loss_fn,
                                  std::span<DifferentiableParam* const> params, double step,
                                  double tol);

}  // namespace smope
