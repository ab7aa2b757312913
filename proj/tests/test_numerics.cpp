#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>

#include "smope/numerics.hpp"
#include "smope/rng.hpp"

using namespace smope;

TEST_SUITE_BEGIN("numerics");

TEST_CASE("matmul identity and zero cases") {
  Matrix a(2, 2);
  a << 1, 2, 3, 4;
  CHECK(matmul(Matrix::Identity(2, 2), a) == a);

  Matrix row(1, 2);
  row << 1, 2;
  Matrix zero = Matrix::Zero(2, 1);
  const Matrix prod = matmul(row, zero);
  CHECK(prod.rows() == 1);
  CHECK(prod(0, 0) == 0.0);
}

TEST_CASE("matmul hand-evaluated product") {
  Matrix a(2, 2);
  a << 1, 2, 3, 4;
  Matrix b(2, 1);
  b << 5, 6;
  const Matrix c = matmul(a, b);
  CHECK(c(0, 0) == doctest::Approx(17.0).epsilon(1e-15));
  CHECK(c(1, 0) == doctest::Approx(39.0).epsilon(1e-15));
}

TEST_CASE("matmul shape mismatch throws") {
  CHECK_THROWS_AS(matmul(Matrix::Zero(2, 3), Matrix::Zero(2, 3)), DimensionError);
}

TEST_CASE("matmul associativity on small random matrices") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = rng.gaussian_matrix(4, 3);
    const Matrix b = rng.gaussian_matrix(3, 5);
    const Matrix c = rng.gaussian_matrix(5, 2);
    const Matrix left = matmul(matmul(a, b), c);
    const Matrix right = matmul(a, matmul(b, c));
    const double rel = (left - right).norm() / std::max(1.0, right.norm());
    CHECK(rel < 1e-10);
  }
}

TEST_CASE("matmul is bit-identical across repeated seeded runs") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    const Matrix a = rng.gaussian_matrix(6, 7);
    const Matrix b = rng.gaussian_matrix(7, 5);
    return matmul(a, b);
  };
  const Matrix first = run(99);
  const Matrix second = run(99);
  CHECK(std::memcmp(first.data(), second.data(),
                    sizeof(double) * static_cast<std::size_t>(first.size())) == 0);
}

TEST_CASE("softmax_masked symmetric all-on case") {
  Vector logits = Vector::Zero(3);
  const Vector p = softmax_masked(logits, {true, true, true});
  for (int i = 0; i < 3; ++i) {
    CHECK(p(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }
}

TEST_CASE("softmax_masked single unmasked entry") {
  Vector logits(2);
  logits << 5, 1;
  const Vector p = softmax_masked(logits, {true, false});
  CHECK(p(0) == 1.0);
  CHECK(p(1) == 0.0);
}

TEST_CASE("softmax_masked direct evaluation with a masked middle entry") {
  Vector logits(3);
  logits << 1, 2, 3;
  const Vector p = softmax_masked(logits, {true, false, true});
  const double denom = std::exp(1.0) + std::exp(3.0);
  CHECK(p(0) == doctest::Approx(std::exp(1.0) / denom).epsilon(1e-14));
  CHECK(p(1) == 0.0);
  CHECK(p(2) == doctest::Approx(std::exp(3.0) / denom).epsilon(1e-14));
}

TEST_CASE("softmax_masked rejects an all-masked input") {
  Vector logits(2);
  logits << 1, 2;
  CHECK_THROWS_AS(softmax_masked(logits, {false, false}), DimensionError);
}

TEST_CASE("softmax_masked output is a probability vector, shift-invariant") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 2 + rng.uniform_int(8);
    Vector logits(n);
    std::vector<bool> mask(static_cast<std::size_t>(n));
    bool any = false;
    for (int i = 0; i < n; ++i) {
      logits(i) = rng.uniform(-30.0, 30.0);
      mask[static_cast<std::size_t>(i)] = rng.uniform() < 0.7;
      any = any || mask[static_cast<std::size_t>(i)];
    }
    if (!any) {
      mask[0] = true;
    }
    const Vector p = softmax_masked(logits, mask);
    CHECK(std::abs(p.sum() - 1.0) < 1e-12);
    for (int i = 0; i < n; ++i) {
      if (!mask[static_cast<std::size_t>(i)]) {
        CHECK(p(i) == 0.0);
      } else {
        CHECK(p(i) >= 0.0);
      }
    }
    const double shift = rng.uniform(-5.0, 5.0);
    Vector shifted = logits;
    for (int i = 0; i < n; ++i) {
      if (mask[static_cast<std::size_t>(i)]) {
        shifted(i) += shift;
      }
    }
    const Vector q = softmax_masked(shifted, mask);
    CHECK((p - q).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("finite_diff_check: sum of squares is exact to rounding") {
  Rng rng(3);
  DifferentiableParam p("p", rng.gaussian_matrix(2, 3));
  auto loss_fn = [&]() { return p.value.squaredNorm(); };
  p.grad = 2.0 * p.value;
  DifferentiableParam* params[] = {&p};
  const GradCheckReport report = finite_diff_check(loss_fn, params, 1e-5, 1e-8);
  CHECK(report.passed);
  CHECK(report.max_rel_error < 1e-8);
  CHECK(report.entries_checked == 6);
}

TEST_CASE("finite_diff_check: constant loss has zero gradients both ways") {
  DifferentiableParam p("p", Matrix::Ones(2, 2));
  auto loss_fn = [&]() { return 42.0; };
  p.zero_grad();
  DifferentiableParam* params[] = {&p};
  const GradCheckReport report = finite_diff_check(loss_fn, params, 1e-4, 1e-10);
  CHECK(report.passed);
  CHECK(report.worst.numeric == 0.0);
  CHECK(report.worst.analytic == 0.0);
}

TEST_CASE("finite_diff_check validates the step range") {
  DifferentiableParam p("p", Matrix::Ones(1, 1));
  DifferentiableParam* params[] = {&p};
  auto loss_fn = [&]() { return p.value(0, 0); };
  CHECK_THROWS_AS(finite_diff_check(loss_fn, params, 1e-7, 1e-4), ConfigError);
  CHECK_THROWS_AS(finite_diff_check(loss_fn, params, 1e-2, 1e-4), ConfigError);
}

TEST_CASE("finite_diff_check flags non-finite losses") {
  DifferentiableParam p("p", Matrix::Ones(1, 1));
  DifferentiableParam* params[] = {&p};
  auto loss_fn = [&]() { return std::numeric_limits<double>::quiet_NaN(); };
  CHECK_THROWS_AS(finite_diff_check(loss_fn, params, 1e-5, 1e-4), NumericError);
}

TEST_CASE("rng determinism, splitting, and ranges") {
  Rng a(123);
  Rng b(123);
  for (int i = 0; i < 100; ++i) {
    CHECK(a.next_u64() == b.next_u64());
  }
  Rng parent(5);
  Rng c1 = parent.child(1);
  Rng c2 = parent.child(2);
  CHECK(c1.next_u64() != c2.next_u64());
  Rng u(9);
  for (int i = 0; i < 1000; ++i) {
    const double x = u.uniform();
    CHECK(x >= 0.0);
    CHECK(x < 1.0);
  }
  // gaussian moments, loose
  Rng gr(17);
  double sum = 0.0, sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = gr.gaussian();
    sum += x;
    sq += x * x;
  }
  CHECK(std::abs(sum / n) < 0.05);
  CHECK(std::abs(sq / n - 1.0) < 0.05);
}

TEST_SUITE_END();
