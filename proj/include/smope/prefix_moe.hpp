#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "smope/autodiff.hpp"
#include "smope/routing.hpp"
#include "smope/rng.hpp"
#include "smope/types.hpp"

namespace smope {

// One attention head's projections, each d x d_k (d_v = d_k).
struct HeadWeights {
  Matrix wq;
  Matrix wk;
  Matrix wv;
};

// Per-layer prefix parameters plus lifetime usage counters. One key/value
// pair is shared by all heads of the layer; usage is tracked per head.
struct PromptBlock {
  DifferentiableParam keys;    // N_p x d
  DifferentiableParam values;  // N_p x d
  UsageStats usage;

  PromptBlock() = default;
  PromptBlock(int prompt_length, int embed_dim, int heads, Rng& rng, const std::string& tag);
};

// Folds an ordered stream of evaluation-mode routing decisions into the
// block's lifetime counters; F becomes the proportion over all instances
// recorded so far.
void update_usage(PromptBlock& block, std::span<const RoutingDecision> decisions);

// ---------------------------------------------------------------------------
// Value-level score operations.

// Per-token prompt scores: entry (i, j') = x_i^T Wq Wk^T pk_{j'} / sqrt(d_v).
Matrix per_token_prompt_scores(const Matrix& tokens, const Matrix& prompt_keys,
                               const HeadWeights& w);

// Proxy scores from the averaged token: s~_{j'} = xbar^T Wq Wk^T pk_{j'} /
// sqrt(d_v). Costs a single query projection per head regardless of the
// token count; equals the column mean of the per-token scores.
Vector proxy_scores(const Matrix& tokens, const Matrix& prompt_keys, const HeadWeights& w);

// The adjusted attention logits: the selected experts' proxy scores replicated
// down all N rows, followed by the standard query-key logits. A masked softmax
// over the K + N columns realizes the sparse model's restricted denominators.
Matrix assemble_attention(const Matrix& tokens, const Matrix& prompt_keys,
                          const std::vector<int>& selected, const HeadWeights& w);

// ---------------------------------------------------------------------------
// Loop-based reference oracles. These evaluate the head output element by
// element, independent of the matrix path used in training.

// Sparse mixture head output: per token, a softmax-weighted sum over the N
// pre-trained value experts and the selected prompt experts, with proxy scores
// on the prompt side and the denominator restricted to the selected set.
// Selecting every expert gives the dense aggregated mixture.
Matrix smope_head_output_reference(const Matrix& tokens, const Matrix& prompt_keys,
                                   const Matrix& prompt_values, const std::vector<int>& selected,
                                   const HeadWeights& w);

// Conventional prefix tuning for one head: per-token prompt scores, every
// prompt expert active. The shared-prompt baseline path.
Matrix prefix_attention_reference(const Matrix& tokens, const Matrix& prompt_keys,
                                  const Matrix& prompt_values, const HeadWeights& w);

// Plain single-head attention (no prompts), same loop style.
Matrix plain_attention_reference(const Matrix& tokens, const HeadWeights& w);

// ---------------------------------------------------------------------------
// Instrumented cost counters. Both run the score computation as explicit
// loops and count one unit per multiply-accumulate, including the query
// projections each path needs; `projected_prompt_keys` (N_p x d_k) is shared
// by both paths and therefore excluded from both counts.

struct MacCounter {
  std::uint64_t macs = 0;
};

Matrix per_token_prompt_scores_counted(const Matrix& tokens, const Matrix& projected_prompt_keys,
                                       const HeadWeights& w, MacCounter& counter);

Vector proxy_scores_counted(const Matrix& tokens, const Matrix& projected_prompt_keys,
                            const HeadWeights& w, MacCounter& counter);

// ---------------------------------------------------------------------------
// Training-path attention on the tape.

enum class AttentionMode {
  kProxy,     // aggregated proxy scores, top-K selection
  kPerToken,  // conventional prefix tuning (baseline)
};

struct HeadAttentionInputs {
  ag::Var tokens;   // N x d MSA input for one sample
  ag::Var q;        // N x d_k
  ag::Var k;        // N x d_k
  ag::Var v;        // N x d_v
  ag::Var wq_head;  // d x d_k, for the proxy query projection
  ag::Var pk_proj;  // N_p x d_k (prompt keys through Wk)
  ag::Var pk_proj_t;
  ag::Var pv_proj;  // N_p x d_v
};

struct AttentionOptions {
  AttentionMode mode = AttentionMode::kProxy;
  int select_k = kDenseSelect;
  bool train = false;
  NoiseConfig noise;
  const Vector* usage_frequencies = nullptr;  // F for this head; null = zeros
  Rng* rng = nullptr;
  const std::vector<int>* forced_selection = nullptr;  // pins K_X
};

struct HeadAttentionResult {
  ag::Var output;  // N x d_v
  ag::Var proxy;   // 1 x N_p raw scores (proxy mode only)
  RoutingDecision decision;
  bool has_routing = false;
};

// Graph-side routing record: the raw proxy-score node plus the selected set,
// kept so the router objective can differentiate into the prefix keys.
struct RoutedProxy {
  ag::Var scores;
  std::vector<int> selected;
};

// The attention route used by training: proxy scores for the prompt columns,
// noise-penalized top-K selection, then one masked softmax over the selected
// prompt columns and the query-key logits, applied to the stacked value rows.
HeadAttentionResult smope_head_attention(ag::Graph& g, const HeadAttentionInputs& in,
                                         const AttentionOptions& opt);

// Pre-trained-only head (layers without prompts).
ag::Var plain_head_attention(ag::Graph& g, ag::Var q, ag::Var k, ag::Var v);

}  // namespace smope
