#pragma once

#include <optional>
#include <vector>

#include "smope/rng.hpp"
#include "smope/types.hpp"

namespace smope {

// Empirical validator for the least-squares estimation theory: a regression
// model mixing frozen quadratic-gated experts with learnable linear-gated
// prompt experts, fitted by best-of-restarts projected gradient descent and
// scored in parameter space by a Voronoi-cell loss.

struct ExpertParams {
  Vector a;       // input weights, dimension N*d
  double b = 0.0;
};

// One weighted atom: gate weight exp(beta0), gate direction beta1 (through
// the shared matrix W), expert parameters eta = (a, b).
struct MeasureAtom {
  double beta0 = 0.0;
  Vector beta1;  // gate space dimension
  ExpertParams eta;
};

struct MixingMeasure {
  std::vector<MeasureAtom> atoms;
};

// Frozen pre-trained side: quadratic gates X^T B_j X + c_j and fixed experts.
struct PretrainedGate {
  std::vector<Matrix> quad;  // symmetric, (N*d) x (N*d)
  std::vector<double> offset;
  std::vector<ExpertParams> eta;
  std::size_t count() const { return quad.size(); }
};

struct TheoryModel {
  PretrainedGate pretrained;
  Matrix gate_map;  // W, (N*d) x gate_dim, frozen, shared across atoms
  int input_dim() const { return static_cast<int>(gate_map.rows()); }
  int gate_dim() const { return static_cast<int>(gate_map.cols()); }
};

struct RegressionDataset {
  Matrix x;  // n x (N*d), entries bounded
  Vector y;
  double noise_sigma = 0.0;
};

// Expert response h(X, (a, b)) = GELU(a^T X + b).
double expert_value(const Vector& x, const ExpertParams& eta);

// Two-block softmax mixture over pre-trained and prompt experts; gate logits
// are max-shifted before exponentiation. Gate weights sum to one.
double eval_regression_fn(const TheoryModel& model, const MixingMeasure& g, const Vector& x);

// X ~ uniform on [-1, 1]^{N*d}, Y = g(X) + sigma * gaussian. Deterministic
// per seed.
RegressionDataset sample_dataset(const TheoryModel& model, const MixingMeasure& g_true, int n,
                                 double noise_sigma, std::uint64_t seed);

struct FitOptions {
  int restarts = 16;
  int steps = 1200;
  double lr = 5e-2;
  double box = 3.0;  // projection box per coordinate
};

struct FitResult {
  MixingMeasure measure;
  double loss = 0.0;  // mean squared training error of the best restart
  int failed_restarts = 0;
};

// Best-of-restarts Adam on the mean squared error, every parameter projected
// into [-box, box] after each step. Optionally warm-starts one restart from
// `init`. Throws NumericError if every restart diverges.
FitResult fit_least_squares(const TheoryModel& model, const RegressionDataset& data, int n_atoms,
                            const FitOptions& opt, std::uint64_t seed,
                            const MixingMeasure* init = nullptr);

// Analytic gradient of the mean squared error at `g`, packed one atom per row
// as [beta0, beta1..., a..., b]; used by the fitter and checked against
// central differences in the tests.
Matrix squared_loss_gradient(const TheoryModel& model, const MixingMeasure& g,
                             const RegressionDataset& data, double* loss_out = nullptr);

Matrix pack_measure(const MixingMeasure& g);
MixingMeasure unpack_measure(const Matrix& packed, int gate_dim, int input_dim);

// Parameter-space discrepancy: atoms of `g` are assigned to nearest-atom
// Voronoi cells of `g_true` over (beta1, eta); cells with several atoms
// contribute squared deviations, singleton cells first powers, plus the
// aggregated gate-weight mismatch per cell.
double voronoi_loss(const MixingMeasure& g, const MixingMeasure& g_true);

struct RateConfig {
  std::vector<int> n_grid{250, 500, 1000, 2000};
  int seeds_per_n = 10;
  double noise_sigma = 0.1;
  int true_atoms = 2;       // N_p
  int fit_atoms = 2;        // N'_p >= N_p
  int pretrained_experts = 2;
  int tokens = 2;           // N
  int token_dim = 2;        // d
  int gate_dim = 2;
  FitOptions fit;
  std::uint64_t master_seed = 0;
  int threads = 1;
  bool init_at_truth = false;  // ablation: warm-start one restart from the truth
};

struct RateCell {
  int n = 0;
  int seed = 0;
  double fit_loss = 0.0;
  double voronoi = 0.0;
  bool ok = false;
};

struct RateResult {
  std::vector<RateCell> cells;
  std::vector<double> median_per_n;  // aligned with config n_grid
  std::optional<double> slope;       // log-log OLS slope; empty if degenerate
  int failures = 0;
  TheoryModel model;
  MixingMeasure g_true;
};

// Draws a fixed ground truth, then fits independent datasets over the n-grid
// and reports per-n median Voronoi losses and the log-log slope.
RateResult rate_experiment(const RateConfig& cfg);

// Random ground truth + frozen model for the experiment; atoms are well
// separated and the last atom's beta0 is normalized to zero.
std::pair<TheoryModel, MixingMeasure> make_reference_truth(const RateConfig& cfg);

// Numerical-rank check of the identifiability function family for `h`: the
// Gram matrix of {X^nu * d^|gamma| h / d eta^gamma} with |nu| + |gamma| <= 2
// over random inputs, for several distinct eta. Returns the condition number
// of the column-normalized Gram matrix.
double identifiability_condition(const std::vector<ExpertParams>& etas, int input_dim,
                                 int n_points, std::uint64_t seed);

}  // namespace smope
