#include "smope/prefix_moe.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

namespace smope {

namespace {

double inv_sqrt_dv(const HeadWeights& w) {
  return 1.0 / std::sqrt(static_cast<double>(w.wv.cols()));
}

void check_head_shapes(const Matrix& tokens, const Matrix& prompt_keys, const HeadWeights& w) {
  if (tokens.cols() != w.wq.rows() || tokens.cols() != w.wk.rows()) {
    throw DimensionError("prompt scores: token width differs from projection height");
  }
  if (prompt_keys.size() != 0 && prompt_keys.cols() != tokens.cols()) {
    throw DimensionError("prompt scores: prompt key width differs from token width");
  }
}

}  // namespace

PromptBlock::PromptBlock(int prompt_length, int embed_dim, int heads, Rng& rng,
                         const std::string& tag) {
  // Zero-mean uniform init at scale 1/sqrt(d).
  const double s = 1.0 / std::sqrt(static_cast<double>(embed_dim));
  keys = DifferentiableParam(tag + ".prompt_keys",
                             rng.uniform_matrix(prompt_length, embed_dim, -s, s));
  values = DifferentiableParam(tag + ".prompt_values",
                               rng.uniform_matrix(prompt_length, embed_dim, -s, s));
  usage = UsageStats(heads, prompt_length);
}

void update_usage(PromptBlock& block, std::span<const RoutingDecision> decisions) {
  for (const RoutingDecision& d : decisions) {
    if (d.head < 0 || d.head >= block.usage.heads) {
      throw DimensionError("update_usage: head index out of range");
    }
    block.usage.instance_counts[static_cast<std::size_t>(d.head)] += 1;
    for (int e : d.selected) {
      if (e < 0 || e >= block.usage.experts) {
        throw DimensionError("update_usage: expert index out of range");
      }
      block.usage.selected_counts[static_cast<std::size_t>(d.head) *
                                      static_cast<std::size_t>(block.usage.experts) +
                                  static_cast<std::size_t>(e)] += 1;
    }
  }
}

Matrix per_token_prompt_scores(const Matrix& tokens, const Matrix& prompt_keys,
                               const HeadWeights& w) {
  check_head_shapes(tokens, prompt_keys, w);
  const Matrix q = tokens * w.wq;               // N x d_k
  const Matrix pk = prompt_keys * w.wk;         // N_p x d_k
  return inv_sqrt_dv(w) * (q * pk.transpose());  // N x N_p
}

Vector proxy_scores(const Matrix& tokens, const Matrix& prompt_keys, const HeadWeights& w) {
  check_head_shapes(tokens, prompt_keys, w);
  const RowVector xbar = tokens.colwise().mean();
  const RowVector qbar = xbar * w.wq;
  const Matrix pk = prompt_keys * w.wk;
  return inv_sqrt_dv(w) * (pk * qbar.transpose());
}

Matrix assemble_attention(const Matrix& tokens, const Matrix& prompt_keys,
                          const std::vector<int>& selected, const HeadWeights& w) {
  const Vector s = proxy_scores(tokens, prompt_keys, w);
  const Eigen::Index n = tokens.rows();
  Matrix out(n, static_cast<Eigen::Index>(selected.size()) + n);
  Eigen::Index col = 0;
  for (int j : selected) {
    if (j < 0 || j >= s.size()) {
      throw DimensionError("assemble_attention: selected index out of range");
    }
    out.col(col++).setConstant(s(j));
  }
  const Matrix q = tokens * w.wq;
  const Matrix k = tokens * w.wk;
  out.middleCols(col, n) = inv_sqrt_dv(w) * (q * k.transpose());
  return out;
}

namespace {

// Shared loop kernel for the reference oracles. `prompt_logits(i, c)` gives
// the logit of the c-th active prompt expert for token i.
Matrix mixture_reference(const Matrix& tokens, const Matrix& prompt_values,
                         const std::vector<int>& active,
                         const std::function<double(Eigen::Index, std::size_t)>& prompt_logit,
                         const HeadWeights& w) {
  const Eigen::Index n = tokens.rows();
  const Eigen::Index dv = w.wv.cols();
  const double scale = inv_sqrt_dv(w);

  Matrix q(n, w.wq.cols());
  Matrix k(n, w.wk.cols());
  Matrix v(n, dv);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index c = 0; c < w.wq.cols(); ++c) {
      double aq = 0.0, ak = 0.0;
      for (Eigen::Index t = 0; t < tokens.cols(); ++t) {
        aq += tokens(i, t) * w.wq(t, c);
        ak += tokens(i, t) * w.wk(t, c);
      }
      q(i, c) = aq;
      k(i, c) = ak;
    }
    for (Eigen::Index c = 0; c < dv; ++c) {
      double av = 0.0;
      for (Eigen::Index t = 0; t < tokens.cols(); ++t) {
        av += tokens(i, t) * w.wv(t, c);
      }
      v(i, c) = av;
    }
  }
  Matrix pv(static_cast<Eigen::Index>(active.size()), dv);
  for (std::size_t a = 0; a < active.size(); ++a) {
    for (Eigen::Index c = 0; c < dv; ++c) {
      double acc = 0.0;
      for (Eigen::Index t = 0; t < prompt_values.cols(); ++t) {
        acc += prompt_values(active[a], t) * w.wv(t, c);
      }
      pv(static_cast<Eigen::Index>(a), c) = acc;
    }
  }

  Matrix out = Matrix::Zero(n, dv);
  for (Eigen::Index i = 0; i < n; ++i) {
    std::vector<double> logits;
    logits.reserve(static_cast<std::size_t>(n) + active.size());
    for (std::size_t a = 0; a < active.size(); ++a) {
      logits.push_back(prompt_logit(i, a));
    }
    for (Eigen::Index j = 0; j < n; ++j) {
      double dot = 0.0;
      for (Eigen::Index c = 0; c < q.cols(); ++c) {
        dot += q(i, c) * k(j, c);
      }
      logits.push_back(scale * dot);
    }
    const double m = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    for (double l : logits) {
      denom += std::exp(l - m);
    }
    for (std::size_t a = 0; a < active.size(); ++a) {
      const double wgt = std::exp(logits[a] - m) / denom;
      for (Eigen::Index c = 0; c < dv; ++c) {
        out(i, c) += wgt * pv(static_cast<Eigen::Index>(a), c);
      }
    }
    for (Eigen::Index j = 0; j < n; ++j) {
      const double wgt = std::exp(logits[active.size() + static_cast<std::size_t>(j)] - m) / denom;
      for (Eigen::Index c = 0; c < dv; ++c) {
        out(i, c) += wgt * v(j, c);
      }
    }
  }
  return out;
}

}  // namespace

Matrix smope_head_output_reference(const Matrix& tokens, const Matrix& prompt_keys,
                                   const Matrix& prompt_values, const std::vector<int>& selected,
                                   const HeadWeights& w) {
  if (selected.empty()) {
    throw ConfigError("smope_head_output_reference: selection may not be empty");
  }
  const Vector s = proxy_scores(tokens, prompt_keys, w);
  for (int j : selected) {
    if (j < 0 || j >= s.size()) {
      throw DimensionError("smope_head_output_reference: selected index out of range");
    }
  }
  return mixture_reference(
      tokens, prompt_values, selected,
      [&](Eigen::Index, std::size_t a) { return s(selected[a]); }, w);
}

Matrix prefix_attention_reference(const Matrix& tokens, const Matrix& prompt_keys,
                                  const Matrix& prompt_values, const HeadWeights& w) {
  if (prompt_keys.rows() == 0) {
    return plain_attention_reference(tokens, w);
  }
  const Matrix scores = per_token_prompt_scores(tokens, prompt_keys, w);
  std::vector<int> all(static_cast<std::size_t>(prompt_keys.rows()));
  for (std::size_t j = 0; j < all.size(); ++j) {
    all[j] = static_cast<int>(j);
  }
  return mixture_reference(
      tokens, prompt_values, all,
      [&](Eigen::Index i, std::size_t a) { return scores(i, static_cast<Eigen::Index>(a)); }, w);
}

Matrix plain_attention_reference(const Matrix& tokens, const HeadWeights& w) {
  const Matrix empty(0, tokens.cols());
  return mixture_reference(
      tokens, empty, {}, [](Eigen::Index, std::size_t) { return 0.0; }, w);
}

Matrix per_token_prompt_scores_counted(const Matrix& tokens, const Matrix& projected_prompt_keys,
                                       const HeadWeights& w, MacCounter& counter) {
  const Eigen::Index n = tokens.rows();
  const Eigen::Index d = tokens.cols();
  const Eigen::Index dk = w.wq.cols();
  const Eigen::Index np = projected_prompt_keys.rows();
  const double scale = inv_sqrt_dv(w);

  // This path projects every token's query.
  Matrix q(n, dk);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index c = 0; c < dk; ++c) {
      double acc = 0.0;
      for (Eigen::Index t = 0; t < d; ++t) {
        acc += tokens(i, t) * w.wq(t, c);
        ++counter.macs;
      }
      q(i, c) = acc;
    }
  }
  Matrix out(n, np);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < np; ++j) {
      double acc = 0.0;
      for (Eigen::Index c = 0; c < dk; ++c) {
        acc += q(i, c) * projected_prompt_keys(j, c);
        ++counter.macs;
      }
      out(i, j) = scale * acc;
    }
  }
  return out;
}

Vector proxy_scores_counted(const Matrix& tokens, const Matrix& projected_prompt_keys,
                            const HeadWeights& w, MacCounter& counter) {
  const Eigen::Index n = tokens.rows();
  const Eigen::Index d = tokens.cols();
  const Eigen::Index dk = w.wq.cols();
  const Eigen::Index np = projected_prompt_keys.rows();
  const double scale = inv_sqrt_dv(w);

  // One averaged token, one query projection, one dot per expert.
  RowVector xbar = RowVector::Zero(d);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index t = 0; t < d; ++t) {
      xbar(t) += tokens(i, t);
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  for (Eigen::Index t = 0; t < d; ++t) {
    xbar(t) *= inv_n;
    ++counter.macs;
  }
  RowVector qbar(dk);
  for (Eigen::Index c = 0; c < dk; ++c) {
    double acc = 0.0;
    for (Eigen::Index t = 0; t < d; ++t) {
      acc += xbar(t) * w.wq(t, c);
      ++counter.macs;
    }
    qbar(c) = acc;
  }
  Vector out(np);
  for (Eigen::Index j = 0; j < np; ++j) {
    double acc = 0.0;
    for (Eigen::Index c = 0; c < dk; ++c) {
      acc += qbar(c) * projected_prompt_keys(j, c);
      ++counter.macs;
    }
    out(j) = scale * acc;
  }
  return out;
}

HeadAttentionResult smope_head_attention(ag::Graph& g, const HeadAttentionInputs& in,
                                         const AttentionOptions& opt) {
  const Eigen::Index n = in.tokens.rows();
  const Eigen::Index dv = in.v.cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dv));

  HeadAttentionResult result;
  ag::Var pretrained = ag::scale(ag::matmul(in.q, ag::transpose(in.k)), scale);

  if (opt.mode == AttentionMode::kPerToken) {
    ag::Var prompt_logits = ag::scale(ag::matmul(in.q, in.pk_proj_t), scale);
    const ag::Var logit_parts[] = {prompt_logits, pretrained};
    ag::Var logits = ag::stack_cols(logit_parts);
    ag::Var mask = g.constant(Matrix::Ones(1, logits.cols()));
    ag::Var attn = ag::softmax_masked_rows(logits, mask);
    const ag::Var value_parts[] = {in.pv_proj, in.v};
    result.output = ag::matmul(attn, ag::stack_rows(value_parts));
    return result;
  }

  // Proxy scores from the averaged token.
  ag::Var xbar = ag::mean_rows(in.tokens);
  ag::Var qbar = ag::matmul(xbar, in.wq_head);
  ag::Var proxy = ag::scale(ag::matmul(qbar, in.pk_proj_t), scale);

  const Vector scores = proxy.value().row(0).transpose();
  Vector noise = Vector::Zero(scores.size());
  std::vector<int> selected;
  if (opt.forced_selection != nullptr) {
    selected = *opt.forced_selection;
  } else {
    const Vector zero_freq = Vector::Zero(scores.size());
    const Vector& freq = opt.usage_frequencies != nullptr ? *opt.usage_frequencies : zero_freq;
    noise = adaptive_noise(scores, freq, opt.noise, opt.train, opt.rng);
    selected = select_experts(scores, noise, opt.select_k);
  }

  ag::Var picked = ag::gather_cols(proxy, selected);
  ag::Var prompt_cols = ag::broadcast_row(picked, n);
  const ag::Var logit_parts[] = {prompt_cols, pretrained};
  ag::Var logits = ag::stack_cols(logit_parts);
  ag::Var mask = g.constant(Matrix::Ones(1, logits.cols()));
  ag::Var attn = ag::softmax_masked_rows(logits, mask);
  const ag::Var value_parts[] = {ag::gather_rows(in.pv_proj, selected), in.v};
  result.output = ag::matmul(attn, ag::stack_rows(value_parts));
  result.proxy = proxy;
  result.decision.proxy_scores = scores;
  result.decision.noise = noise;
  result.decision.selected = std::move(selected);
  result.has_routing = true;
  return result;
}

ag::Var plain_head_attention(ag::Graph& g, ag::Var q, ag::Var k, ag::Var v) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(v.cols()));
  ag::Var logits = ag::scale(ag::matmul(q, ag::transpose(k)), scale);
  ag::Var mask = g.constant(Matrix::Ones(1, logits.cols()));
  ag::Var attn = ag::softmax_masked_rows(logits, mask);
  return ag::matmul(attn, v);
}

}  // namespace smope
