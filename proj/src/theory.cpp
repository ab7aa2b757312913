#include "smope/theory.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <thread>

#include "smope/autodiff.hpp"  // gelu_value / gelu_derivative

namespace smope {

namespace {

double gelu_second_derivative(double x) {
  // phi(x) * (2 - x^2) with phi the standard normal density.
  const double pdf = 0.3989422804014326779 * std::exp(-0.5 * x * x);
  return pdf * (2.0 - x * x);
}

struct FitWorkspace {
  Matrix gate_inputs;  // n x gate_dim, rows W^T x_i
  Matrix pre_logits;   // n x n_pretrained
  Matrix pre_values;   // n x n_pretrained
};

FitWorkspace make_workspace(const TheoryModel& model, const RegressionDataset& data) {
  FitWorkspace ws;
  const Eigen::Index n = data.x.rows();
  const auto n_pre = static_cast<Eigen::Index>(model.pretrained.count());
  ws.gate_inputs = data.x * model.gate_map;
  ws.pre_logits.resize(n, n_pre);
  ws.pre_values.resize(n, n_pre);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vector x = data.x.row(i).transpose();
    for (Eigen::Index j = 0; j < n_pre; ++j) {
      ws.pre_logits(i, j) =
          x.dot(model.pretrained.quad[static_cast<std::size_t>(j)] * x) +
          model.pretrained.offset[static_cast<std::size_t>(j)];
      ws.pre_values(i, j) = expert_value(x, model.pretrained.eta[static_cast<std::size_t>(j)]);
    }
  }
  return ws;
}

// Mean squared error and its gradient in packed layout. `grad` may be null.
double mse_and_gradient(const TheoryModel& model, const MixingMeasure& g,
                        const RegressionDataset& data, const FitWorkspace& ws, Matrix* grad) {
  const Eigen::Index n = data.x.rows();
  const auto n_pre = static_cast<Eigen::Index>(model.pretrained.count());
  const auto n_atoms = static_cast<Eigen::Index>(g.atoms.size());
  const Eigen::Index gate_dim = model.gate_dim();
  const Eigen::Index input_dim = model.input_dim();

  if (grad != nullptr) {
    grad->setZero();
  }
  double loss = 0.0;
  std::vector<double> logits(static_cast<std::size_t>(n_pre + n_atoms));
  std::vector<double> values(static_cast<std::size_t>(n_pre + n_atoms));
  std::vector<double> weights(static_cast<std::size_t>(n_pre + n_atoms));
  std::vector<double> zs(static_cast<std::size_t>(n_atoms));

  for (Eigen::Index i = 0; i < n; ++i) {
    const auto x = data.x.row(i);
    for (Eigen::Index j = 0; j < n_pre; ++j) {
      logits[static_cast<std::size_t>(j)] = ws.pre_logits(i, j);
      values[static_cast<std::size_t>(j)] = ws.pre_values(i, j);
    }
    for (Eigen::Index a = 0; a < n_atoms; ++a) {
      const MeasureAtom& atom = g.atoms[static_cast<std::size_t>(a)];
      logits[static_cast<std::size_t>(n_pre + a)] =
          atom.beta1.dot(ws.gate_inputs.row(i)) + atom.beta0;
      const double z = atom.eta.a.dot(x) + atom.eta.b;
      zs[static_cast<std::size_t>(a)] = z;
      values[static_cast<std::size_t>(n_pre + a)] = ag::gelu_value(z);
    }
    const double shift = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    for (std::size_t e = 0; e < logits.size(); ++e) {
      weights[e] = std::exp(logits[e] - shift);
      denom += weights[e];
    }
    double gx = 0.0;
    for (std::size_t e = 0; e < logits.size(); ++e) {
      weights[e] /= denom;
      gx += weights[e] * values[e];
    }
    const double residual = gx - data.y(i);
    loss += residual * residual;

    if (grad != nullptr) {
      const double factor = 2.0 * residual / static_cast<double>(n);
      for (Eigen::Index a = 0; a < n_atoms; ++a) {
        const std::size_t e = static_cast<std::size_t>(n_pre + a);
        const double dlogit = weights[e] * (values[e] - gx);
        const double dvalue = weights[e] * ag::gelu_derivative(zs[static_cast<std::size_t>(a)]);
        auto row = grad->row(a);
        row(0) += factor * dlogit;
        for (Eigen::Index u = 0; u < gate_dim; ++u) {
          row(1 + u) += factor * dlogit * ws.gate_inputs(i, u);
        }
        for (Eigen::Index u = 0; u < input_dim; ++u) {
          row(1 + gate_dim + u) += factor * dvalue * x(u);
        }
        row(1 + gate_dim + input_dim) += factor * dvalue;
      }
    }
  }
  return loss / static_cast<double>(n);
}

}  // namespace

double expert_value(const Vector& x, const ExpertParams& eta) {
  if (eta.a.size() != x.size()) {
    throw DimensionError("expert_value: parameter width differs from input width");
  }
  return ag::gelu_value(eta.a.dot(x) + eta.b);
}

double eval_regression_fn(const TheoryModel& model, const MixingMeasure& g, const Vector& x) {
  if (g.atoms.empty() && model.pretrained.count() == 0) {
    throw DataError("eval_regression_fn: no experts");
  }
  if (x.size() != model.input_dim()) {
    throw DimensionError("eval_regression_fn: input width mismatch");
  }
  std::vector<double> logits;
  std::vector<double> values;
  const Vector u = model.gate_map.transpose() * x;
  for (std::size_t j = 0; j < model.pretrained.count(); ++j) {
    logits.push_back(x.dot(model.pretrained.quad[j] * x) + model.pretrained.offset[j]);
    values.push_back(expert_value(x, model.pretrained.eta[j]));
  }
  for (const MeasureAtom& atom : g.atoms) {
    logits.push_back(atom.beta1.dot(u) + atom.beta0);
    values.push_back(expert_value(x, atom.eta));
  }
  const double shift = *std::max_element(logits.begin(), logits.end());
  double denom = 0.0;
  for (double& l : logits) {
    l = std::exp(l - shift);
    denom += l;
  }
  double out = 0.0;
  for (std::size_t e = 0; e < logits.size(); ++e) {
    out += (logits[e] / denom) * values[e];
  }
  return out;
}

RegressionDataset sample_dataset(const TheoryModel& model, const MixingMeasure& g_true, int n,
                                 double noise_sigma, std::uint64_t seed) {
  if (n < 1) {
    throw ConfigError("sample_dataset: n must be positive");
  }
  Rng rng(seed);
  RegressionDataset data;
  data.noise_sigma = noise_sigma;
  data.x = rng.uniform_matrix(n, model.input_dim(), -1.0, 1.0);
  data.y.resize(n);
  for (int i = 0; i < n; ++i) {
    data.y(i) = eval_regression_fn(model, g_true, data.x.row(i).transpose());
  }
  if (noise_sigma > 0.0) {
    for (int i = 0; i < n; ++i) {
      data.y(i) += noise_sigma * rng.gaussian();
    }
  }
  return data;
}

Matrix pack_measure(const MixingMeasure& g) {
  if (g.atoms.empty()) {
    throw DataError("pack_measure: empty measure");
  }
  const Eigen::Index gate_dim = g.atoms.front().beta1.size();
  const Eigen::Index input_dim = g.atoms.front().eta.a.size();
  Matrix packed(static_cast<Eigen::Index>(g.atoms.size()), 1 + gate_dim + input_dim + 1);
  for (std::size_t i = 0; i < g.atoms.size(); ++i) {
    const MeasureAtom& atom = g.atoms[i];
    auto row = packed.row(static_cast<Eigen::Index>(i));
    row(0) = atom.beta0;
    row.segment(1, gate_dim) = atom.beta1.transpose();
    row.segment(1 + gate_dim, input_dim) = atom.eta.a.transpose();
    row(1 + gate_dim + input_dim) = atom.eta.b;
  }
  return packed;
}

MixingMeasure unpack_measure(const Matrix& packed, int gate_dim, int input_dim) {
  if (packed.cols() != 1 + gate_dim + input_dim + 1) {
    throw DimensionError("unpack_measure: packed width mismatch");
  }
  MixingMeasure g;
  g.atoms.resize(static_cast<std::size_t>(packed.rows()));
  for (Eigen::Index i = 0; i < packed.rows(); ++i) {
    MeasureAtom& atom = g.atoms[static_cast<std::size_t>(i)];
    atom.beta0 = packed(i, 0);
    atom.beta1 = packed.row(i).segment(1, gate_dim).transpose();
    atom.eta.a = packed.row(i).segment(1 + gate_dim, input_dim).transpose();
    atom.eta.b = packed(i, 1 + gate_dim + input_dim);
  }
  return g;
}

Matrix squared_loss_gradient(const TheoryModel& model, const MixingMeasure& g,
                             const RegressionDataset& data, double* loss_out) {
  const FitWorkspace ws = make_workspace(model, data);
  Matrix grad = Matrix::Zero(static_cast<Eigen::Index>(g.atoms.size()),
                             1 + model.gate_dim() + model.input_dim() + 1);
  const double loss = mse_and_gradient(model, g, data, ws, &grad);
  if (loss_out != nullptr) {
    *loss_out = loss;
  }
  return grad;
}

FitResult fit_least_squares(const TheoryModel& model, const RegressionDataset& data, int n_atoms,
                            const FitOptions& opt, std::uint64_t seed, const MixingMeasure* init) {
  if (n_atoms < 1) {
    throw ConfigError("fit_least_squares: need at least one atom");
  }
  const FitWorkspace ws = make_workspace(model, data);
  const Eigen::Index cols = 1 + model.gate_dim() + model.input_dim() + 1;
  Rng rng(seed);

  FitResult best;
  best.loss = std::numeric_limits<double>::infinity();
  int failed = 0;

  for (int r = 0; r < opt.restarts; ++r) {
    Matrix packed;
    if (r == 0 && init != nullptr) {
      packed = pack_measure(*init);
      if (packed.rows() != n_atoms) {
        throw ConfigError("fit_least_squares: init atom count differs from n_atoms");
      }
    } else {
      packed = rng.uniform_matrix(n_atoms, cols, -opt.box, opt.box);
    }

    // Adam on the packed atoms with cosine decay and box projection.
    Matrix m = Matrix::Zero(n_atoms, cols);
    Matrix v = Matrix::Zero(n_atoms, cols);
    Matrix grad(n_atoms, cols);
    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    bool diverged = false;
    MixingMeasure current = unpack_measure(packed, model.gate_dim(), model.input_dim());
    for (int step = 0; step < opt.steps; ++step) {
      const double loss = mse_and_gradient(model, current, data, ws, &grad);
      if (!std::isfinite(loss)) {
        diverged = true;
        break;
      }
      m = beta1 * m + (1.0 - beta1) * grad;
      v = beta2 * v + (1.0 - beta2) * grad.cwiseProduct(grad);
      const double bc1 = 1.0 - std::pow(beta1, step + 1);
      const double bc2 = 1.0 - std::pow(beta2, step + 1);
      const double lr = opt.lr * (0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) /
                                                        static_cast<double>(opt.steps))));
      packed -= lr * (m / bc1).cwiseQuotient(((v / bc2).cwiseSqrt().array() + eps).matrix());
      packed = packed.cwiseMax(-opt.box).cwiseMin(opt.box);
      current = unpack_measure(packed, model.gate_dim(), model.input_dim());
    }
    if (diverged) {
      ++failed;
      continue;
    }
    const double final_loss = mse_and_gradient(model, current, data, ws, nullptr);
    if (!std::isfinite(final_loss)) {
      ++failed;
      continue;
    }
    if (final_loss < best.loss) {
      best.loss = final_loss;
      best.measure = current;
    }
  }
  if (!std::isfinite(best.loss)) {
    throw NumericError("fit_least_squares: every restart diverged");
  }
  best.failed_restarts = failed;
  return best;
}

double voronoi_loss(const MixingMeasure& g, const MixingMeasure& g_true) {
  if (g.atoms.empty()) {
    throw DataError("voronoi_loss: estimated measure is empty");
  }
  auto omega = [](const MeasureAtom& atom) {
    Vector w(atom.beta1.size() + atom.eta.a.size() + 1);
    w << atom.beta1, atom.eta.a, atom.eta.b;
    return w;
  };
  const std::size_t n_true = g_true.atoms.size();
  std::vector<std::vector<std::size_t>> cells(n_true);
  for (std::size_t i = 0; i < g.atoms.size(); ++i) {
    const Vector wi = omega(g.atoms[i]);
    std::size_t best = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n_true; ++j) {
      const double dist = (wi - omega(g_true.atoms[j])).norm();
      if (dist < best_dist) {  // strict: ties stay at the lower index
        best_dist = dist;
        best = j;
      }
    }
    cells[best].push_back(i);
  }

  double loss = 0.0;
  for (std::size_t j = 0; j < n_true; ++j) {
    const MeasureAtom& truth = g_true.atoms[j];
    double cell_weight = 0.0;
    for (std::size_t i : cells[j]) {
      const MeasureAtom& est = g.atoms[i];
      const double w = std::exp(est.beta0);
      cell_weight += w;
      const double d_beta = (est.beta1 - truth.beta1).norm();
      Vector deta(est.eta.a.size() + 1);
      deta << (est.eta.a - truth.eta.a), (est.eta.b - truth.eta.b);
      const double d_eta = deta.norm();
      if (cells[j].size() > 1) {
        loss += w * (d_beta * d_beta + d_eta * d_eta);
      } else {
        loss += w * (d_beta + d_eta);
      }
    }
    loss += std::abs(cell_weight - std::exp(truth.beta0));
  }
  return loss;
}

std::pair<TheoryModel, MixingMeasure> make_reference_truth(const RateConfig& cfg) {
  const int input_dim = cfg.tokens * cfg.token_dim;
  Rng rng(cfg.master_seed ^ 0x7BEEF0ULL);

  TheoryModel model;
  // Orthonormalized random gate map, shared by all atoms.
  Matrix raw = rng.gaussian_matrix(input_dim, cfg.gate_dim);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(raw);
  Eigen::MatrixXd q = qr.householderQ();
  model.gate_map = q.leftCols(cfg.gate_dim);

  for (int j = 0; j < cfg.pretrained_experts; ++j) {
    Matrix a = rng.gaussian_matrix(input_dim, input_dim, 0.0, 0.25);
    model.pretrained.quad.push_back(0.5 * (a + a.transpose()));
    model.pretrained.offset.push_back(rng.uniform(-0.5, 0.5));
    ExpertParams eta;
    eta.a = rng.gaussian_vector(input_dim, 0.0, 0.8);
    eta.b = rng.uniform(-0.5, 0.5);
    model.pretrained.eta.push_back(std::move(eta));
  }

  // Well-separated atoms inside the projection box; the last beta0 is pinned
  // to zero.
  MixingMeasure truth;
  const double min_sep = 1.5;
  for (int attempt = 0; attempt < 200 && static_cast<int>(truth.atoms.size()) < cfg.true_atoms;
       ++attempt) {
    MeasureAtom atom;
    atom.beta0 = 0.0;
    atom.beta1 = rng.gaussian_vector(cfg.gate_dim, 0.0, 1.2).cwiseMax(-2.0).cwiseMin(2.0);
    atom.eta.a = rng.gaussian_vector(input_dim, 0.0, 1.0).cwiseMax(-2.0).cwiseMin(2.0);
    atom.eta.b = rng.uniform(-1.0, 1.0);
    bool far_enough = true;
    for (const MeasureAtom& other : truth.atoms) {
      Vector d(cfg.gate_dim + input_dim + 1);
      d << (atom.beta1 - other.beta1), (atom.eta.a - other.eta.a), (atom.eta.b - other.eta.b);
      if (d.norm() < min_sep) {
        far_enough = false;
        break;
      }
    }
    if (far_enough) {
      truth.atoms.push_back(std::move(atom));
    }
  }
  if (static_cast<int>(truth.atoms.size()) != cfg.true_atoms) {
    throw NumericError("make_reference_truth: could not place separated atoms");
  }
  for (std::size_t i = 0; i + 1 < truth.atoms.size(); ++i) {
    truth.atoms[i].beta0 = Rng(cfg.master_seed ^ (0x51ULL + i)).uniform(-0.5, 0.5);
  }
  truth.atoms.back().beta0 = 0.0;
  return {std::move(model), std::move(truth)};
}

RateResult rate_experiment(const RateConfig& cfg) {
  if (cfg.n_grid.empty() || cfg.seeds_per_n < 1) {
    throw ConfigError("rate_experiment: empty n-grid or no seeds");
  }
  if (cfg.fit_atoms < cfg.true_atoms) {
    throw ConfigError("rate_experiment: fit_atoms must be at least true_atoms");
  }
  RateResult result;
  auto [model, truth] = make_reference_truth(cfg);
  result.model = model;
  result.g_true = truth;

  std::vector<RateCell> cells;
  for (std::size_t ni = 0; ni < cfg.n_grid.size(); ++ni) {
    for (int s = 0; s < cfg.seeds_per_n; ++s) {
      RateCell c;
      c.n = cfg.n_grid[ni];
      c.seed = s;
      cells.push_back(c);
    }
  }

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) {
        return;
      }
      RateCell& c = cells[i];
      const std::uint64_t data_seed =
          cfg.master_seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(c.n) +
                             static_cast<std::uint64_t>(c.seed) + 1);
      const std::uint64_t fit_seed = data_seed ^ 0xF17F17ULL;
      try {
        const RegressionDataset data =
            sample_dataset(model, truth, c.n, cfg.noise_sigma, data_seed);
        const FitResult fit = fit_least_squares(model, data, cfg.fit_atoms, cfg.fit, fit_seed);
        c.fit_loss = fit.loss;
        c.voronoi = voronoi_loss(fit.measure, truth);
        c.ok = true;
      } catch (const Error&) {
        c.ok = false;
      }
    }
  };
  const int threads = std::max(1, cfg.threads);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) {
      pool.emplace_back(worker);
    }
    for (auto& t : pool) {
      t.join();
    }
  }

  result.cells = cells;
  for (int n : cfg.n_grid) {
    std::vector<double> losses;
    for (const RateCell& c : cells) {
      if (c.n == n && c.ok) {
        losses.push_back(c.voronoi);
      } else if (c.n == n && !c.ok) {
        ++result.failures;
      }
    }
    if (losses.empty()) {
      result.median_per_n.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    std::sort(losses.begin(), losses.end());
    const std::size_t mid = losses.size() / 2;
    result.median_per_n.push_back(losses.size() % 2 == 1
                                      ? losses[mid]
                                      : 0.5 * (losses[mid - 1] + losses[mid]));
  }

  // Log-log OLS slope; degenerate when a median is ~0 or missing.
  bool degenerate = false;
  for (double med : result.median_per_n) {
    if (!std::isfinite(med) || med < 1e-12) {
      degenerate = true;
    }
  }
  if (!degenerate && result.median_per_n.size() >= 2) {
    const std::size_t k = result.median_per_n.size();
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      mx += std::log(static_cast<double>(cfg.n_grid[i]));
      my += std::log(result.median_per_n[i]);
    }
    mx /= static_cast<double>(k);
    my /= static_cast<double>(k);
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      const double dx = std::log(static_cast<double>(cfg.n_grid[i])) - mx;
      sxy += dx * (std::log(result.median_per_n[i]) - my);
      sxx += dx * dx;
    }
    result.slope = sxy / sxx;
  }
  return result;
}

double identifiability_condition(const std::vector<ExpertParams>& etas, int input_dim,
                                 int n_points, std::uint64_t seed) {
  if (etas.empty() || n_points < 1) {
    throw ConfigError("identifiability_condition: need etas and points");
  }
  Rng rng(seed);
  const Matrix xs = rng.uniform_matrix(n_points, input_dim, -1.0, 1.0);

  // Distinct members of {X^nu * d^|gamma| h / d eta^gamma : |nu|+|gamma| <= 2}
  // for eta = (a, b). With h = phi(a^T X + b) the parameter derivatives are
  // monomials in X times phi'(z) or phi''(z), so several (nu, gamma) pairs
  // coincide as functions (e.g. X_u * dh/da_w and X_w * dh/da_u); each
  // distinct function appears once:
  //   h * {1, X_u, X_u X_v}, phi'(z) * {1, X_u, X_u X_v},
  //   phi''(z) * {1, X_u, X_u X_v}   with u <= v.
  const int pair_count = input_dim * (input_dim + 1) / 2;
  const int cols_per_eta = 3 * (1 + input_dim + pair_count);
  Matrix phi(n_points, static_cast<Eigen::Index>(etas.size()) * cols_per_eta);

  for (int p = 0; p < n_points; ++p) {
    const Vector x = xs.row(p).transpose();
    Eigen::Index col = 0;
    for (const ExpertParams& eta : etas) {
      const double z = eta.a.dot(x) + eta.b;
      const double levels[3] = {ag::gelu_value(z), ag::gelu_derivative(z),
                                gelu_second_derivative(z)};
      for (double f : levels) {
        phi(p, col++) = f;
        for (int u = 0; u < input_dim; ++u) {
          phi(p, col++) = x(u) * f;
        }
        for (int u = 0; u < input_dim; ++u) {
          for (int v = u; v < input_dim; ++v) {
            phi(p, col++) = x(u) * x(v) * f;
          }
        }
      }
    }
  }

  // Column-normalize so the rank check is scale-free, then take the spectrum
  // of the Gram matrix.
  for (Eigen::Index c = 0; c < phi.cols(); ++c) {
    const double norm = phi.col(c).norm();
    if (norm > 0.0) {
      phi.col(c) /= norm;
    }
  }
  const Matrix gram = phi.transpose() * phi;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
  const double lo = es.eigenvalues().minCoeff();
  const double hi = es.eigenvalues().maxCoeff();
  if (lo <= 0.0) {
    return std::numeric_limits<double>::infinity();
  }
  return hi / lo;
}

}  // namespace smope
