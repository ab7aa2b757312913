#include <doctest.h>

#include <cmath>

#include "smope/numerics.hpp"
#include "smope/objectives.hpp"
#include "smope/rng.hpp"

using namespace smope;

namespace {

RoutingDecision make_decision(const Vector& scores, std::vector<int> selected) {
  RoutingDecision d;
  d.proxy_scores = scores;
  d.noise = Vector::Zero(scores.size());
  d.selected = std::move(selected);
  return d;
}

}  // namespace

TEST_SUITE_BEGIN("objectives");

TEST_CASE("router loss: full selection, constant scores, hand value") {
  Rng rng(41);
  Vector s = rng.gaussian_vector(5);
  std::vector<RoutingDecision> full{make_decision(s, {0, 1, 2, 3, 4})};
  CHECK(router_loss(full) == doctest::Approx(-1.0).epsilon(1e-12));

  std::vector<RoutingDecision> constant{make_decision(Vector::Constant(4, 1.7), {1, 3})};
  CHECK(router_loss(constant) == doctest::Approx(-0.5).epsilon(1e-12));

  Vector hand(3);
  hand << 2, 1, 0;
  std::vector<RoutingDecision> single{make_decision(hand, {0})};
  const double denom = std::exp(2.0) + std::exp(1.0) + std::exp(0.0);
  CHECK(router_loss(single) == doctest::Approx(-std::exp(2.0) / denom).epsilon(1e-12));
  CHECK(router_loss(single) == doctest::Approx(-0.6652).epsilon(1e-4));
}

TEST_CASE("router loss stays in [-1, 0) and matches the graph route") {
  Rng rng(42);
  for (int trial = 0; trial < 30; ++trial) {
    const int np = 3 + rng.uniform_int(6);
    const int k = 1 + rng.uniform_int(np);
    std::vector<RoutingDecision> batch;
    ag::Graph g;
    std::vector<RoutedProxy> routed;
    std::vector<DifferentiableParam> holders;
    holders.reserve(4);
    for (int i = 0; i < 4; ++i) {
      Vector s(np);
      for (int j = 0; j < np; ++j) {
        s(j) = rng.uniform(-3.0, 3.0);
      }
      auto sel = select_experts(s, Vector::Zero(np), k);
      batch.push_back(make_decision(s, sel));
      holders.emplace_back("s" + std::to_string(i), Matrix(s.transpose()));
    }
    for (int i = 0; i < 4; ++i) {
      routed.push_back(RoutedProxy{g.param(holders[static_cast<std::size_t>(i)]),
                                   batch[static_cast<std::size_t>(i)].selected});
    }
    const double value = router_loss(batch);
    CHECK(value >= -1.0);
    CHECK(value < 0.0);
    CHECK(router_loss_graph(g, routed).scalar() == doctest::Approx(value).epsilon(1e-12));
  }
}

TEST_CASE("router loss gradient reaches the score parameters") {
  Rng rng(43);
  DifferentiableParam scores("s", rng.gaussian_matrix(1, 6));
  const std::vector<int> sel{1, 4};
  auto build = [&](ag::Graph& g) {
    std::vector<RoutedProxy> routed{RoutedProxy{g.param(scores), sel}};
    return router_loss_graph(g, routed);
  };
  scores.zero_grad();
  {
    ag::Graph g;
    g.backward(build(g));
  }
  auto loss_fn = [&]() {
    ag::Graph g(false);
    return build(g).scalar();
  };
  DifferentiableParam* params[] = {&scores};
  const auto report = finite_diff_check(loss_fn, params, 1e-5, 1e-6);
  CHECK(report.passed);
}

TEST_CASE("prototype set construction follows the frequency gate") {
  Rng rng(44);
  const Matrix keys = rng.gaussian_matrix(4, 6);
  const Matrix keys2 = rng.gaussian_matrix(4, 6);

  // Uniform frequencies: every key is at the mean, so all are retained.
  {
    const std::vector<Matrix> layers{keys};
    const std::vector<Vector> freqs{Vector::Constant(4, 0.25)};
    const PrototypeSet set = build_prototype_set(layers, freqs);
    CHECK(set.keys_per_layer[0].rows() == 4);
  }
  // Skewed frequencies: mean 0.25, only index 0 reaches it.
  {
    Vector f(4);
    f << 0.9, 0.05, 0.05, 0.0;
    const std::vector<Matrix> layers{keys, keys2};
    const std::vector<Vector> freqs{f, Vector::Constant(4, 0.25)};
    const PrototypeSet set = build_prototype_set(layers, freqs);
    CHECK(set.keys_per_layer[0].rows() == 1);
    CHECK(set.source_experts[0] == std::vector<int>{0});
    CHECK((set.keys_per_layer[0].row(0) - keys.row(0)).cwiseAbs().maxCoeff() == 0.0);
    CHECK(set.keys_per_layer[1].rows() == 4);
  }
}

TEST_CASE("prototype loss: empty set, identical keys, hand case") {
  const std::vector<Matrix> keys{Matrix::Ones(3, 2)};
  CHECK(prototype_loss(PrototypeSet{}, keys, 2) == 0.0);

  // Current keys identical to the old keys with full selection: mass -1.
  Rng rng(45);
  const Matrix old_keys = rng.gaussian_matrix(3, 4);
  PrototypeSet protos;
  protos.keys_per_layer.push_back(old_keys);
  protos.source_experts.push_back({0, 1, 2});
  const std::vector<Matrix> current{old_keys};
  CHECK(prototype_loss(protos, current, 3) == doctest::Approx(-1.0).epsilon(1e-12));

  // One prototype p = [1, 0], keys [[1, 0], [0, 1]], K = 1.
  Matrix p(1, 2);
  p << 1, 0;
  Matrix cur(2, 2);
  cur << 1, 0, 0, 1;
  PrototypeSet one;
  one.keys_per_layer.push_back(p);
  one.source_experts.push_back({0});
  const std::vector<Matrix> layer{cur};
  const double expect = -std::exp(1.0) / (std::exp(1.0) + std::exp(0.0));
  CHECK(prototype_loss(one, layer, 1) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(prototype_loss(one, layer, 1) == doctest::Approx(-0.7311).epsilon(1e-4));
}

TEST_CASE("prototype loss is invariant to prototype order and matches the graph") {
  Rng rng(46);
  const Matrix keys = rng.gaussian_matrix(5, 4);
  Matrix protos_mat = rng.gaussian_matrix(3, 4);
  PrototypeSet forward;
  forward.keys_per_layer.push_back(protos_mat);
  forward.source_experts.push_back({0, 1, 2});

  Matrix reversed(3, 4);
  for (int i = 0; i < 3; ++i) {
    reversed.row(i) = protos_mat.row(2 - i);
  }
  PrototypeSet backward;
  backward.keys_per_layer.push_back(reversed);
  backward.source_experts.push_back({2, 1, 0});

  const std::vector<Matrix> current{keys};
  const double a = prototype_loss(forward, current, 2);
  const double b = prototype_loss(backward, current, 2);
  CHECK(a == doctest::Approx(b).epsilon(1e-12));

  DifferentiableParam key_param("keys", keys);
  ag::Graph g;
  const std::vector<ag::Var> key_vars{g.param(key_param)};
  CHECK(prototype_loss_graph(g, forward, key_vars, 2).scalar() ==
        doctest::Approx(a).epsilon(1e-12));
}

TEST_CASE("prototype loss gradient w.r.t. current keys at fixed selection") {
  Rng rng(47);
  DifferentiableParam keys("keys", rng.gaussian_matrix(4, 3));
  PrototypeSet protos;
  protos.keys_per_layer.push_back(rng.gaussian_matrix(2, 3));
  protos.source_experts.push_back({0, 1});

  // Pin the per-prototype selections for the perturbation.
  ProtoSelections frozen(1);
  for (int p = 0; p < 2; ++p) {
    const Vector dots =
        keys.value * protos.keys_per_layer[0].row(p).transpose();
    frozen[0].push_back(select_experts(dots, Vector::Zero(dots.size()), 2));
  }
  auto build = [&](ag::Graph& g) {
    const std::vector<ag::Var> kv{g.param(keys)};
    return prototype_loss_graph(g, protos, kv, 2, &frozen);
  };
  keys.zero_grad();
  {
    ag::Graph g;
    g.backward(build(g));
  }
  auto loss_fn = [&]() {
    ag::Graph g(false);
    return build(g).scalar();
  };
  DifferentiableParam* params[] = {&keys};
  const auto report = finite_diff_check(loss_fn, params, 1e-5, 1e-4);
  CHECK(report.passed);
}

TEST_CASE("total loss arithmetic") {
  CHECK(total_loss(3.25, -0.7, -0.9, LossWeights{0.0, 0.0}) == 3.25);
  CHECK(total_loss(1.0, -0.5, -0.25, LossWeights{1e-4, 1e-4}) ==
        doctest::Approx(0.999925).epsilon(1e-15));
  CHECK(total_loss(0.0, 0.0, 0.0, LossWeights{0.1, 0.2}) == 0.0);
  CHECK_THROWS_AS(total_loss(1.0, 0.0, 0.0, LossWeights{-0.1, 0.0}), ConfigError);
  CHECK_THROWS_AS(total_loss(std::numeric_limits<double>::infinity(), 0.0, 0.0, LossWeights{}),
                  NumericError);
}

TEST_SUITE_END();
