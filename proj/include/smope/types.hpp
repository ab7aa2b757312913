#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>

namespace smope {

// Dense 64-bit value carriers. Row-major storage so checkpoint IO and the
// brute-force loop oracles see the same layout as the math notation.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape mismatches, bad indices, invalid masks.
struct DimensionError : Error {
  using Error::Error;
};

// Invalid configuration values (K > N_p, malformed config files, ...).
struct ConfigError : Error {
  using Error::Error;
};

// Non-finite values, failed factorizations, failed fits.
struct NumericError : Error {
  using Error::Error;
};

// Degenerate data (too few samples per class, empty measures, ...).
struct DataError : Error {
  using Error::Error;
};

inline void ensure_finite(const Matrix& m, const std::string& what) {
  if (!m.allFinite()) {
    throw NumericError(what + ": non-finite entries");
  }
}

inline void ensure_finite(double x, const std::string& what) {
  if (!std::isfinite(x)) {
    throw NumericError(what + ": non-finite value");
  }
}

// A value with an associated gradient buffer of identical shape. Gradients
// accumulate across backward passes and are zeroed when an optimizer step
// consumes them.
struct DifferentiableParam {
  std::string name;
  Matrix value;
  Matrix grad;
  bool requires_grad = true;

  DifferentiableParam() = default;
  DifferentiableParam(std::string param_name, Matrix initial)
      : name(std::move(param_name)),
        value(std::move(initial)),
        grad(Matrix::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(); }

  // Appends zero-initialized rows; grad stays shape-synced.
  void append_rows(Eigen::Index extra) {
    const Eigen::Index r = value.rows();
    value.conservativeResize(r + extra, value.cols());
    value.bottomRows(extra).setZero();
    grad.conservativeResize(r + extra, grad.cols());
    grad.bottomRows(extra).setZero();
  }
};

}  // namespace smope
