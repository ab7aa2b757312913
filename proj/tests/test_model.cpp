#include <doctest.h>

#include <cstdio>
#include <cstring>

#include "smope/checkpoint.hpp"
#include "smope/model.hpp"
#include "smope/numerics.hpp"
#include "smope/objectives.hpp"

using namespace smope;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.embed_dim = 8;
  cfg.tokens = 4;
  cfg.raw_dim = 3;
  cfg.prompt_layers = 1;
  cfg.prompt_length = 4;
  cfg.select_k = 2;
  cfg.mlp_ratio = 2.0;
  return cfg;
}

std::vector<Sample> random_batch(const ModelConfig& cfg, int count, int classes, Rng& rng) {
  std::vector<Sample> out;
  for (int i = 0; i < count; ++i) {
    Sample s;
    s.features = rng.gaussian_matrix(cfg.tokens - 1, cfg.raw_dim);
    s.label = rng.uniform_int(classes);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST_SUITE_BEGIN("model");

TEST_CASE("config validation") {
  ModelConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());
  cfg.embed_dim = 9;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.prompt_layers = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.select_k = 5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.select_k = kDenseSelect;
  CHECK_NOTHROW(cfg.validate());
  cfg.prompt_layers = 0;  // prompting disabled is a valid configuration
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("embed: zero input and weights, identity extension, determinism") {
  ModelConfig cfg = tiny_config();
  Rng rng(51);
  Backbone b = make_backbone(cfg, rng);

  // Zero input with zero embedding: feature rows vanish, the class token row
  // stays.
  Backbone zeroed = b;
  zeroed.embed.value.setZero();
  const Matrix tokens = embed(Matrix::Zero(cfg.tokens - 1, cfg.raw_dim), zeroed, cfg);
  CHECK(tokens.row(0) == b.class_token.value.row(0));
  CHECK(tokens.bottomRows(cfg.tokens - 1).isZero(0.0));

  // Identity-extended embedding copies the raw features into the leading
  // coordinates.
  Backbone ident = b;
  ident.embed.value.setZero();
  for (int i = 0; i < cfg.raw_dim; ++i) {
    ident.embed.value(i, i) = 1.0;
  }
  const Matrix feats = rng.gaussian_matrix(cfg.tokens - 1, cfg.raw_dim);
  const Matrix emb = embed(feats, ident, cfg);
  CHECK((emb.block(1, 0, cfg.tokens - 1, cfg.raw_dim) - feats).cwiseAbs().maxCoeff() == 0.0);
  CHECK(emb.block(1, cfg.raw_dim, cfg.tokens - 1, cfg.embed_dim - cfg.raw_dim).isZero(0.0));

  // Determinism: recomputation with the same seed matches bitwise.
  auto make = [&](std::uint64_t seed) {
    Rng r(seed);
    Backbone bb = make_backbone(cfg, r);
    Rng fr(seed + 1);
    return embed(fr.gaussian_matrix(cfg.tokens - 1, cfg.raw_dim), bb, cfg);
  };
  const Matrix e1 = make(7);
  const Matrix e2 = make(7);
  CHECK(std::memcmp(e1.data(), e2.data(), sizeof(double) * static_cast<std::size_t>(e1.size())) ==
        0);

  CHECK_THROWS_AS(embed(Matrix::Zero(cfg.tokens, cfg.raw_dim), b, cfg), DimensionError);
}

TEST_CASE("evaluation forwards are deterministic; dense override matches forced full set") {
  ModelConfig cfg = tiny_config();
  LearnerState st = make_learner(cfg, 99);
  Rng rng(52);
  st.head.grow(3, cfg.embed_dim, rng);
  const std::vector<Sample> batch = random_batch(cfg, 3, 3, rng);

  ForwardOptions eval_opts;
  std::vector<RoutingDecision> d1, d2;
  const Matrix z1 = forward_reps(st, batch, eval_opts, &d1);
  const Matrix z2 = forward_reps(st, batch, eval_opts, &d2);
  CHECK(std::memcmp(z1.data(), z2.data(), sizeof(double) * static_cast<std::size_t>(z1.size())) ==
        0);
  REQUIRE(d1.size() == d2.size());
  for (std::size_t i = 0; i < d1.size(); ++i) {
    CHECK(d1[i].selected == d2[i].selected);
    CHECK(d1[i].noise.isZero(0.0));  // evaluation is noise-free
  }

  // Dense selection override equals pinning the full expert set.
  ForwardOptions dense;
  dense.select_k_override = kDenseSelect;
  const Matrix zd = forward_reps(st, batch, dense);
  ForcedSelections forced;
  const std::size_t slots = batch.size() * static_cast<std::size_t>(cfg.prompt_layers) *
                            static_cast<std::size_t>(cfg.heads);
  forced.sets.assign(slots, {0, 1, 2, 3});
  ForwardOptions pinned;
  pinned.forced = &forced;
  const Matrix zf = forward_reps(st, batch, pinned);
  CHECK((zd - zf).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("prompt_layers = 0 gives the plain transformer") {
  ModelConfig cfg = tiny_config();
  LearnerState st = make_learner(cfg, 123);
  Rng rng(53);
  st.head.grow(2, cfg.embed_dim, rng);
  const std::vector<Sample> batch = random_batch(cfg, 2, 2, rng);

  ForwardOptions no_prompts;
  no_prompts.use_prompts = false;
  const Matrix z_off = forward_reps(st, batch, no_prompts);

  LearnerState st_zero = st;
  st_zero.cfg.prompt_layers = 0;
  ForwardOptions defaults;
  std::vector<RoutingDecision> decisions;
  const Matrix z_zero = forward_reps(st_zero, batch, defaults, &decisions);
  CHECK(decisions.empty());
  CHECK((z_off - z_zero).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("classify: zero head, single class, growth keeps one row per class") {
  ModelConfig cfg = tiny_config();
  LearnerState st = make_learner(cfg, 5);
  Rng rng(54);
  st.head.grow(1, cfg.embed_dim, rng);
  st.head.weight.value.setZero();
  st.head.bias.value.setZero();

  ag::Graph g;
  Matrix reps = rng.gaussian_matrix(2, cfg.embed_dim);
  ag::Var logits = classify(g, st.head, g.constant(reps));
  CHECK(logits.value().isZero(0.0));
  // One class: softmax probability 1.
  const Vector p = softmax(logits.value().row(0).transpose());
  CHECK(p(0) == 1.0);

  st.head.grow(2, cfg.embed_dim, rng);
  CHECK(st.head.classes() == 3);
  CHECK(st.head.weight.value.rows() == 3);
  CHECK(st.head.bias.value.rows() == 3);
  CHECK(st.head.weight.grad.rows() == 3);
}

TEST_CASE("full objective passes the finite-difference check on a 4-sample batch") {
  ModelConfig cfg = tiny_config();
  LearnerState st = make_learner(cfg, 7);
  st.backbone.set_frozen(true);
  Rng rng(55);
  st.head.grow(3, cfg.embed_dim, rng);
  const std::vector<Sample> batch = random_batch(cfg, 4, 3, rng);
  std::vector<int> labels;
  for (const Sample& s : batch) {
    labels.push_back(s.label);
  }

  // Record the routing once, then pin it for the whole check (the selection
  // is piecewise constant in the parameters).
  ForwardOptions probe;
  probe.train = true;
  probe.noise = NoiseConfig{0.4, NoiseMode::kAdaptive};
  std::vector<RoutingDecision> decisions;
  forward_reps(st, batch, probe, &decisions);
  ForcedSelections forced;
  for (const RoutingDecision& d : decisions) {
    forced.sets.push_back(d.selected);
  }

  // A prototype set with pinned top-K per prototype.
  PrototypeSet protos;
  protos.keys_per_layer.push_back(rng.gaussian_matrix(2, cfg.embed_dim));
  protos.source_experts.push_back({0, 1});
  ProtoSelections proto_sel(1);
  for (int p = 0; p < 2; ++p) {
    const Vector dots =
        st.prompts[0].keys.value * protos.keys_per_layer[0].row(p).transpose();
    proto_sel[0].push_back(select_experts(dots, Vector::Zero(dots.size()), cfg.select_k));
  }

  const LossWeights w{1e-2, 1e-2};  // large enough to register against ce
  auto build = [&](ag::Graph& g) {
    ForwardOptions opts;
    opts.train = true;
    opts.forced = &forced;
    ForwardResult fw = forward_batch(g, st, batch, opts);
    ag::Var ce = ag::cross_entropy(classify(g, st.head, fw.reps), labels);
    ag::Var router = router_loss_graph(g, fw.routed);
    std::vector<ag::Var> key_vars;
    for (PromptBlock& pb : st.prompts) {
      key_vars.push_back(g.param(pb.keys));
    }
    ag::Var proto = prototype_loss_graph(g, protos, key_vars, cfg.select_k, &proto_sel);
    return ag::add(ce, ag::add(ag::scale(router, w.alpha_router),
                               ag::scale(proto, w.alpha_proto)));
  };

  std::vector<DifferentiableParam*> params = trainable_parameters(st);
  for (auto* p : params) {
    p->zero_grad();
  }
  {
    ag::Graph g;
    g.backward(build(g));
  }
  auto loss_fn = [&]() {
    ag::Graph g(false);
    return build(g).scalar();
  };
  const GradCheckReport report = finite_diff_check(loss_fn, params, 1e-5, 1e-4);
  CHECK(report.passed);
  CHECK(report.max_rel_error < 1e-4);

  // The frozen backbone receives no gradient at all.
  for (DifferentiableParam* p : st.backbone.parameters()) {
    CHECK(p->grad.isZero(0.0));
  }
}

TEST_CASE("checkpoint round-trip is lossless at 64-bit") {
  ModelConfig cfg = tiny_config();
  LearnerState st = make_learner(cfg, 31);
  Rng rng(56);
  st.head.grow(4, cfg.embed_dim, rng);
  st.backbone.set_frozen(true);
  st.tasks_trained = 2;
  st.prev_prefix_keys.push_back(rng.gaussian_matrix(cfg.prompt_length, cfg.embed_dim));
  st.prompts[0].usage.instance_counts[0] = 10;
  st.prompts[0].usage.selected_counts[1] = 7;
  GaussianStats gs;
  gs.mean = rng.gaussian_vector(cfg.embed_dim);
  gs.cov = Matrix::Identity(cfg.embed_dim, cfg.embed_dim) * 0.5;
  st.class_stats[3] = gs;

  const std::string path = "checkpoint_roundtrip.bin";
  save_checkpoint(st, path);
  LearnerState loaded = load_checkpoint(path);
  std::remove(path.c_str());

  auto same = [](const Matrix& a, const Matrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) ==
               0;
  };
  const auto orig_params = st.backbone.parameters();
  const auto new_params = loaded.backbone.parameters();
  REQUIRE(orig_params.size() == new_params.size());
  for (std::size_t i = 0; i < orig_params.size(); ++i) {
    CHECK(same(orig_params[i]->value, new_params[i]->value));
    CHECK(new_params[i]->requires_grad == false);
  }
  CHECK(same(st.prompts[0].keys.value, loaded.prompts[0].keys.value));
  CHECK(same(st.prompts[0].values.value, loaded.prompts[0].values.value));
  CHECK(same(st.head.weight.value, loaded.head.weight.value));
  CHECK(same(st.head.bias.value, loaded.head.bias.value));
  CHECK(same(st.prev_prefix_keys[0], loaded.prev_prefix_keys[0]));
  CHECK(loaded.prompts[0].usage.instance_counts[0] == 10);
  CHECK(loaded.prompts[0].usage.selected_counts[1] == 7);
  CHECK(loaded.tasks_trained == 2);
  REQUIRE(loaded.class_stats.count(3) == 1);
  CHECK(same(Matrix(st.class_stats[3].mean.transpose()),
             Matrix(loaded.class_stats[3].mean.transpose())));
  CHECK(same(st.class_stats[3].cov, loaded.class_stats[3].cov));
}

TEST_SUITE_END();
