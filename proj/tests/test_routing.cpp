#include <doctest.h>

#include <cmath>

#include "smope/routing.hpp"

using namespace smope;

TEST_SUITE_BEGIN("routing");

TEST_CASE("adaptive noise: zero epsilon, hand case, degenerate range") {
  NoiseConfig cfg{0.0, NoiseMode::kAdaptive};
  Vector s(3);
  s << 1, 3, 5;
  Vector f(3);
  f << 0.6, 0.3, 0.3;
  CHECK(adaptive_noise(s, f, cfg, true).isZero(0.0));

  cfg.epsilon = 0.5;
  const Vector noise = adaptive_noise(s, f, cfg, true);
  CHECK(noise(0) == doctest::Approx(2.0).epsilon(1e-15));  // range 4, F0 >= mean 0.4
  CHECK(noise(1) == 0.0);
  CHECK(noise(2) == 0.0);

  // Evaluation mode: no noise regardless of configuration.
  CHECK(adaptive_noise(s, f, cfg, false).isZero(0.0));

  const Vector constant = Vector::Constant(3, 2.0);
  CHECK(adaptive_noise(constant, f, cfg, true).isZero(0.0));  // range 0
}

TEST_CASE("adaptive noise: all-equal frequencies gate every expert") {
  NoiseConfig cfg{0.5, NoiseMode::kAdaptive};
  Vector s(3);
  s << 0, 1, 2;
  const Vector f = Vector::Constant(3, 0.25);
  const Vector noise = adaptive_noise(s, f, cfg, true);
  for (int i = 0; i < 3; ++i) {
    CHECK(noise(i) == doctest::Approx(1.0).epsilon(1e-15));
  }
}

TEST_CASE("fixed and uniform noise modes") {
  Vector s(4);
  s << 1, 2, 3, 4;
  Vector f(4);
  f << 0.5, 0.1, 0.5, 0.1;

  NoiseConfig fixed{0.3, NoiseMode::kFixed};
  const Vector fixed_noise = adaptive_noise(s, f, fixed, true);
  CHECK(fixed_noise(0) == doctest::Approx(0.3));
  CHECK(fixed_noise(1) == 0.0);
  CHECK(fixed_noise(2) == doctest::Approx(0.3));
  CHECK(fixed_noise(3) == 0.0);

  NoiseConfig uniform{0.3, NoiseMode::kUniform};
  Rng rng(4);
  const Vector u = adaptive_noise(s, f, uniform, true, &rng);
  for (int i = 0; i < 4; ++i) {
    CHECK(std::abs(u(i)) <= 0.3);
  }
  CHECK_THROWS_AS(adaptive_noise(s, f, uniform, true, nullptr), ConfigError);
}

TEST_CASE("select_experts: order, tie-break, penalized scores") {
  Vector s(3);
  s << 0.1, 0.9, 0.5;
  CHECK(select_experts(s, Vector::Zero(3), 2) == std::vector<int>{1, 2});

  Vector tie(3);
  tie << 5, 5, 1;
  CHECK(select_experts(tie, Vector::Zero(3), 1) == std::vector<int>{0});

  Vector scores(3);
  scores << 1, 3, 5;
  Vector noise(3);
  noise << 0, 0, 2.5;
  CHECK(select_experts(scores, noise, 1) == std::vector<int>{1});  // 5 - 2.5 < 3

  CHECK(select_experts(scores, Vector::Zero(3), kDenseSelect) == std::vector<int>{0, 1, 2});
  CHECK_THROWS_AS(select_experts(scores, Vector::Zero(3), 4), ConfigError);
  CHECK_THROWS_AS(select_experts(scores, Vector::Zero(3), 0), ConfigError);
}

TEST_CASE("selection is invariant under positive affine transforms") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const int np = 2 + rng.uniform_int(8);
    Vector s(np), noise(np);
    for (int i = 0; i < np; ++i) {
      s(i) = rng.uniform(-5.0, 5.0);
      noise(i) = rng.uniform(0.0, 2.0);
    }
    const int k = 1 + rng.uniform_int(np);
    const double a = rng.uniform(0.1, 10.0);
    const double b = rng.uniform(-50.0, 50.0);
    const Vector transformed = a * (s - noise).array() + b;
    CHECK(select_experts(s, noise, k) ==
          select_experts(transformed, Vector::Zero(np), k));
  }
}

TEST_CASE("usage entropy: uniform, one-hot, hand value, and errors") {
  CHECK(usage_entropy(Vector::Constant(5, 0.2)) == doctest::Approx(std::log(5.0)).epsilon(1e-12));

  Vector onehot = Vector::Zero(4);
  onehot(2) = 1.0;
  CHECK(usage_entropy(onehot) == 0.0);

  Vector f(4);
  f << 0.5, 0.25, 0.25, 0.0;
  const double expect = -(0.5 * std::log(0.5) + 2 * 0.25 * std::log(0.25));
  CHECK(usage_entropy(f) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(usage_entropy(f) == doctest::Approx(1.0397).epsilon(1e-4));

  CHECK_THROWS_AS(usage_entropy(Vector::Zero(3)), DataError);
}

TEST_CASE("frequency sanity: selected counts sum to K times instances") {
  UsageStats usage(2, 6);
  Rng rng(6);
  const int k = 2;
  for (int i = 0; i < 50; ++i) {
    for (int h = 0; h < 2; ++h) {
      Vector s(6);
      for (int j = 0; j < 6; ++j) {
        s(j) = rng.uniform(-1.0, 1.0);
      }
      const auto sel = select_experts(s, Vector::Zero(6), k);
      usage.instance_counts[static_cast<std::size_t>(h)] += 1;
      for (int e : sel) {
        usage.selected_counts[static_cast<std::size_t>(h) * 6 + static_cast<std::size_t>(e)] += 1;
      }
    }
  }
  for (int h = 0; h < 2; ++h) {
    std::uint64_t total = 0;
    for (int e = 0; e < 6; ++e) {
      total += usage.selected(h, e);
    }
    CHECK(total == static_cast<std::uint64_t>(k) * usage.instance_counts[static_cast<std::size_t>(h)]);
    CHECK(usage.frequencies(h).maxCoeff() <= 1.0);
    CHECK(usage.frequencies(h).minCoeff() >= 0.0);
  }
}

TEST_SUITE_END();
