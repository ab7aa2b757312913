#include <doctest.h>

#include <cmath>

#include "smope/numerics.hpp"
#include "smope/prefix_moe.hpp"
#include "smope/rng.hpp"

using namespace smope;

namespace {

HeadWeights random_head(int d, int dk, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  return HeadWeights{rng.uniform_matrix(d, dk, -s, s), rng.uniform_matrix(d, dk, -s, s),
                     rng.uniform_matrix(d, dk, -s, s)};
}

std::vector<int> all_experts(int np) {
  std::vector<int> out(static_cast<std::size_t>(np));
  for (int i = 0; i < np; ++i) {
    out[static_cast<std::size_t>(i)] = i;
  }
  return out;
}

// Runs the training-path head attention on a throwaway tape.
Matrix training_path_output(const Matrix& x, const Matrix& pk, const Matrix& pv,
                            const HeadWeights& w, const std::vector<int>& selected) {
  ag::Graph g(false);
  HeadAttentionInputs in;
  in.tokens = g.constant(x);
  ag::Var wq = g.constant(w.wq);
  ag::Var wk = g.constant(w.wk);
  ag::Var wv = g.constant(w.wv);
  in.q = ag::matmul(in.tokens, wq);
  in.k = ag::matmul(in.tokens, wk);
  in.v = ag::matmul(in.tokens, wv);
  in.wq_head = wq;
  in.pk_proj = ag::matmul(g.constant(pk), wk);
  in.pk_proj_t = ag::transpose(in.pk_proj);
  in.pv_proj = ag::matmul(g.constant(pv), wv);
  AttentionOptions opt;
  opt.mode = AttentionMode::kProxy;
  opt.forced_selection = &selected;
  return smope_head_attention(g, in, opt).output.value();
}

}  // namespace

TEST_SUITE_BEGIN("prefix_moe");

TEST_CASE("per-token prompt scores: zero keys, identical rows, loop oracle") {
  Rng rng(21);
  const int d = 4, n = 3, np = 2;
  const HeadWeights w = random_head(d, d, rng);

  const Matrix x = rng.gaussian_matrix(n, d);
  CHECK(per_token_prompt_scores(x, Matrix::Zero(np, d), w).isZero(0.0));

  Matrix same_rows = x.row(0).replicate(n, 1);
  const Matrix pk = rng.gaussian_matrix(np, d);
  const Matrix scores_same = per_token_prompt_scores(same_rows, pk, w);
  for (int j = 0; j < np; ++j) {
    for (int i = 1; i < n; ++i) {
      CHECK(scores_same(i, j) == doctest::Approx(scores_same(0, j)).epsilon(1e-14));
    }
  }

  MacCounter mc;
  const Matrix oracle = per_token_prompt_scores_counted(x, pk * w.wk, w, mc);
  const Matrix fast = per_token_prompt_scores(x, pk, w);
  CHECK((oracle - fast).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("proxy scores: identical tokens, column-mean identity, zero input") {
  Rng rng(22);
  const int d = 6, n = 5, np = 4;
  const HeadWeights w = random_head(d, 3, rng);
  const Matrix pk = rng.gaussian_matrix(np, d);

  Matrix same_rows = rng.gaussian_matrix(1, d).replicate(n, 1);
  const Vector proxy_same = proxy_scores(same_rows, pk, w);
  const Matrix per_token_same = per_token_prompt_scores(same_rows, pk, w);
  CHECK((proxy_same.transpose() - per_token_same.row(0)).cwiseAbs().maxCoeff() < 1e-12);

  for (int trial = 0; trial < 20; ++trial) {
    const Matrix x = rng.gaussian_matrix(n, d);
    const Vector proxy = proxy_scores(x, pk, w);
    const Matrix per_token = per_token_prompt_scores(x, pk, w);
    const Vector col_mean = per_token.colwise().mean().transpose();
    CHECK((proxy - col_mean).cwiseAbs().maxCoeff() < 1e-12);
  }

  CHECK(proxy_scores(Matrix::Zero(n, d), pk, w).isZero(0.0));
}

TEST_CASE("assemble_attention shapes and constant prompt columns") {
  Rng rng(23);
  const int d = 4, n = 3, np = 3;
  const HeadWeights w = random_head(d, 2, rng);
  const Matrix x = rng.gaussian_matrix(n, d);
  const Matrix pk = rng.gaussian_matrix(np, d);

  const Matrix full = assemble_attention(x, pk, all_experts(np), w);
  CHECK(full.rows() == n);
  CHECK(full.cols() == np + n);
  const Vector proxy = proxy_scores(x, pk, w);
  for (int j = 0; j < np; ++j) {
    for (int i = 0; i < n; ++i) {
      CHECK(full(i, j) == doctest::Approx(proxy(j)).epsilon(1e-14));
    }
  }

  // Single-token sequences: the averaged token is the token itself, so the
  // prompt logits equal the per-token scores.
  const Matrix x1 = rng.gaussian_matrix(1, d);
  const Matrix a1 = assemble_attention(x1, pk, all_experts(np), w);
  const Matrix per_token = per_token_prompt_scores(x1, pk, w);
  CHECK((a1.leftCols(np) - per_token).cwiseAbs().maxCoeff() < 1e-12);

  CHECK_THROWS_AS(assemble_attention(x, pk, {np}, w), DimensionError);
}

TEST_CASE("row-stochasticity of the softmaxed assembled attention") {
  Rng rng(24);
  const int d = 8, n = 4, np = 5;
  const HeadWeights w = random_head(d, 4, rng);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix x = rng.gaussian_matrix(n, d);
    const Matrix pk = rng.gaussian_matrix(np, d);
    const Matrix logits = assemble_attention(x, pk, {0, 2}, w);
    const Matrix attn = softmax_masked_rows(
        logits, std::vector<bool>(static_cast<std::size_t>(logits.cols()), true));
    for (int i = 0; i < n; ++i) {
      CHECK(std::abs(attn.row(i).sum() - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("training path equals the loop reference for K in {1, Np/2, Np}") {
  Rng rng(25);
  const int d = 8, n = 5, np = 4, dk = 4;
  for (int trial = 0; trial < 10; ++trial) {
    const HeadWeights w = random_head(d, dk, rng);
    const Matrix x = rng.gaussian_matrix(n, d);
    const Matrix pk = rng.gaussian_matrix(np, d);
    const Matrix pv = rng.gaussian_matrix(np, d);
    for (int k : {1, np / 2, np}) {
      const Vector proxy = proxy_scores(x, pk, w);
      const std::vector<int> selected = select_experts(proxy, Vector::Zero(np), k);
      const Matrix fast = training_path_output(x, pk, pv, w, selected);
      const Matrix slow = smope_head_output_reference(x, pk, pv, selected, w);
      CHECK((fast - slow).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
}

TEST_CASE("reference limit: strongly negative prompt scores recover plain attention") {
  Rng rng(26);
  const int d = 6, n = 4, np = 3;
  const HeadWeights w = random_head(d, 3, rng);
  const Matrix x = rng.gaussian_matrix(n, d);
  // Scale the keys so every proxy score sits far below the query-key logits
  // while the values stay benign.
  Matrix pk = rng.gaussian_matrix(np, d);
  Vector proxy = proxy_scores(x, pk, w);
  for (int j = 0; j < np; ++j) {
    if (proxy(j) > 0) {
      pk.row(j) *= -1.0;
    }
  }
  proxy = proxy_scores(x, pk, w);
  const double scale = 60.0 / std::max(1e-9, proxy.cwiseAbs().minCoeff());
  pk *= scale;
  const Matrix pv = rng.gaussian_matrix(np, d);

  const Matrix with_prompts = smope_head_output_reference(x, pk, pv, all_experts(np), w);
  const Matrix plain = plain_attention_reference(x, w);
  CHECK((with_prompts - plain).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("reference with zero prompt values scales rows by the pre-trained share") {
  Rng rng(27);
  const int d = 6, n = 4, np = 3;
  const HeadWeights w = random_head(d, 3, rng);
  const Matrix x = rng.gaussian_matrix(n, d);
  const Matrix pk = rng.gaussian_matrix(np, d);
  const std::vector<int> selected{0, 2};

  const Matrix out = smope_head_output_reference(x, pk, Matrix::Zero(np, d), selected, w);
  const Matrix plain = plain_attention_reference(x, w);

  const Vector proxy = proxy_scores(x, pk, w);
  const Matrix qk = (x * w.wq) * (x * w.wk).transpose() / std::sqrt(3.0);
  for (int i = 0; i < n; ++i) {
    double pre = 0.0;
    for (int j = 0; j < n; ++j) {
      pre += std::exp(qk(i, j));
    }
    double prompt = 0.0;
    for (int j : selected) {
      prompt += std::exp(proxy(j));
    }
    const double share = pre / (pre + prompt);
    CHECK((out.row(i) - share * plain.row(i)).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("scalar hand computation: one token, one prompt expert, d = 1") {
  HeadWeights w;
  w.wq = Matrix::Constant(1, 1, 0.5);
  w.wk = Matrix::Constant(1, 1, -0.8);
  w.wv = Matrix::Constant(1, 1, 1.5);
  Matrix x = Matrix::Constant(1, 1, 2.0);
  Matrix pk = Matrix::Constant(1, 1, 0.7);
  Matrix pv = Matrix::Constant(1, 1, -0.3);

  // d_v = 1 so the scale is 1. Logits: pre = (2*0.5)*(2*-0.8) = -1.6,
  // prompt = (2*0.5)*(0.7*-0.8) = -0.56. Values: pre = 3.0, prompt = -0.45.
  const double e_pre = std::exp(-1.6);
  const double e_prompt = std::exp(-0.56);
  const double expect = (e_pre * 3.0 + e_prompt * -0.45) / (e_pre + e_prompt);
  const Matrix out = smope_head_output_reference(x, pk, pv, {0}, w);
  CHECK(out(0, 0) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("prefix tuning reference: no prompts reduces to plain attention") {
  Rng rng(28);
  const int d = 6, n = 4;
  const HeadWeights w = random_head(d, 3, rng);
  const Matrix x = rng.gaussian_matrix(n, d);
  const Matrix out = prefix_attention_reference(x, Matrix(0, d), Matrix(0, d), w);
  CHECK((out - plain_attention_reference(x, w)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("prefix tuning reference: structural identity against a direct assembly") {
  Rng rng(29);
  const int d = 6, n = 4, np = 3, dk = 3;
  const HeadWeights w = random_head(d, dk, rng);
  const Matrix x = rng.gaussian_matrix(n, d);
  const Matrix pk = rng.gaussian_matrix(np, d);
  const Matrix pv = rng.gaussian_matrix(np, d);

  const Matrix ref = prefix_attention_reference(x, pk, pv, w);

  // Direct dense assembly: per-token prompt logits next to the query-key
  // logits, one softmax over all columns, stacked value rows.
  Matrix logits(n, np + n);
  logits.leftCols(np) = per_token_prompt_scores(x, pk, w);
  logits.rightCols(n) = (x * w.wq) * (x * w.wk).transpose() / std::sqrt(static_cast<double>(dk));
  const Matrix attn =
      softmax_masked_rows(logits, std::vector<bool>(static_cast<std::size_t>(np + n), true));
  Matrix values(np + n, dk);
  values.topRows(np) = pv * w.wv;
  values.bottomRows(n) = x * w.wv;
  const Matrix direct = attn * values;
  CHECK((ref - direct).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("prefix tuning reference: identical rows match the proxy-dense output") {
  Rng rng(30);
  const int d = 6, np = 3;
  const HeadWeights w = random_head(d, 3, rng);
  const Matrix x = rng.gaussian_matrix(1, d).replicate(4, 1);
  const Matrix pk = rng.gaussian_matrix(np, d);
  const Matrix pv = rng.gaussian_matrix(np, d);
  const Matrix per_token = prefix_attention_reference(x, pk, pv, w);
  const Matrix proxy_dense = smope_head_output_reference(x, pk, pv, all_experts(np), w);
  CHECK((per_token - proxy_dense).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("instrumented cost: proxy scoring is an N-fold reduction plus O(d_k)") {
  Rng rng(31);
  const int d = 64, dk = 16, n = 17, np = 8;
  const HeadWeights w = random_head(d, dk, rng);
  const Matrix x = rng.gaussian_matrix(n, d);
  const Matrix pk = rng.gaussian_matrix(np, d);
  const Matrix pk_proj = pk * w.wk;

  MacCounter per_token, proxy;
  const Matrix scores = per_token_prompt_scores_counted(x, pk_proj, w, per_token);
  const Vector proxy_vec = proxy_scores_counted(x, pk_proj, w, proxy);

  CHECK((scores - per_token_prompt_scores(x, pk, w)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((proxy_vec - proxy_scores(x, pk, w)).cwiseAbs().maxCoeff() < 1e-12);

  const auto allowance = static_cast<std::uint64_t>(d + dk);
  CHECK(proxy.macs <= per_token.macs / static_cast<std::uint64_t>(n) + allowance);
}

TEST_CASE("usage bookkeeping from decision streams") {
  Rng rng(32);
  PromptBlock block(4, 8, 2, rng, "t");

  update_usage(block, {});
  CHECK(block.usage.frequencies(0).isZero(0.0));

  RoutingDecision d;
  d.layer = 0;
  d.head = 0;
  d.selected = {0, 2};
  std::vector<RoutingDecision> stream{d};
  update_usage(block, stream);
  const Vector f = block.usage.frequencies(0);
  CHECK(f(0) == 1.0);
  CHECK(f(1) == 0.0);
  CHECK(f(2) == 1.0);
  CHECK(f(3) == 0.0);

  for (int pass = 0; pass < 2; ++pass) {
    std::vector<RoutingDecision> many;
    for (int i = 0; i < 10; ++i) {
      RoutingDecision di;
      di.head = 1;
      di.selected = {0};
      many.push_back(di);
    }
    update_usage(block, many);
  }
  CHECK(block.usage.frequencies(1)(0) == 1.0);

  RoutingDecision bad;
  bad.head = 7;
  std::vector<RoutingDecision> bad_stream{bad};
  CHECK_THROWS_AS(update_usage(block, bad_stream), DimensionError);
}

TEST_SUITE_END();
