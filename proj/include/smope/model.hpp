#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "smope/autodiff.hpp"
#include "smope/prefix_moe.hpp"
#include "smope/rng.hpp"
#include "smope/types.hpp"

namespace smope {

struct ModelConfig {
  int depth = 4;
  int heads = 4;          // m
  int embed_dim = 64;     // d
  int tokens = 17;        // N, class token included
  int raw_dim = 16;       // feature width of one input token
  int prompt_layers = 2;  // L_p, prompts live in the first L_p blocks
  int prompt_length = 8;  // N_p
  int select_k = 2;       // K, or kDenseSelect
  double mlp_ratio = 2.0;

  int head_dim() const { return embed_dim / heads; }
  int mlp_hidden() const { return static_cast<int>(embed_dim * mlp_ratio); }
  void validate() const;
};

struct BlockWeights {
  DifferentiableParam wq, wk, wv, wo;           // d x d
  DifferentiableParam ln1_gain, ln1_bias;       // 1 x d
  DifferentiableParam ln2_gain, ln2_bias;       // 1 x d
  DifferentiableParam mlp_w1, mlp_b1;           // d x hidden, 1 x hidden
  DifferentiableParam mlp_w2, mlp_b2;           // hidden x d, 1 x d
};

struct Backbone {
  DifferentiableParam embed;        // raw_dim x d
  DifferentiableParam class_token;  // 1 x d
  std::vector<BlockWeights> blocks;
  bool frozen = false;

  void set_frozen(bool frozen_flag);
  std::vector<DifferentiableParam*> parameters();
  std::vector<const DifferentiableParam*> parameters() const;
};

Backbone make_backbone(const ModelConfig& cfg, Rng& rng);

// Grows by whole-class rows as new tasks arrive; row r always maps to class
// id r.
struct ClassifierHead {
  DifferentiableParam weight;  // C x d
  DifferentiableParam bias;    // C x 1

  int classes() const { return static_cast<int>(weight.value.rows()); }
  void grow(int new_classes, int embed_dim, Rng& rng);
  std::vector<DifferentiableParam*> parameters() { return {&weight, &bias}; }
};

struct Sample {
  Matrix features;  // (N - 1) x raw_dim
  int label = 0;    // global class id
};

struct GaussianStats {
  Vector mean;
  Matrix cov;  // ridged, symmetric
};

struct LearnerState {
  ModelConfig cfg;
  Backbone backbone;
  ClassifierHead head;
  std::vector<PromptBlock> prompts;            // one per prompted layer
  std::vector<Matrix> prev_prefix_keys;        // snapshot taken at task entry
  std::map<int, GaussianStats> class_stats;    // per seen class
  int tasks_trained = 0;
};

// Builds an unfrozen learner with randomly initialized backbone and prompts.
LearnerState make_learner(const ModelConfig& cfg, std::uint64_t seed);

// Token matrix for one input: row 0 is the class token, the remaining rows
// are the linearly embedded feature vectors.
Matrix embed(const Matrix& features, const Backbone& backbone, const ModelConfig& cfg);

// Pins every (sample, prompted layer, head) selection; used by the
// finite-difference harness where the routing must stay constant.
struct ForcedSelections {
  std::vector<std::vector<int>> sets;  // index ((s * L_p) + l) * m + h
};

struct ForwardOptions {
  bool train = false;
  AttentionMode attention = AttentionMode::kProxy;
  int select_k_override = 0;  // 0: use cfg.select_k; kDenseSelect or a K > 0
  bool use_prompts = true;
  NoiseConfig noise;
  Rng* rng = nullptr;
  const ForcedSelections* forced = nullptr;
};

struct ForwardResult {
  ag::Var reps;                            // B x d class-token representations
  std::vector<RoutedProxy> routed;         // graph refs, proxy mode only
  std::vector<RoutingDecision> decisions;  // aligned with `routed`
};

// Runs the whole stack over a batch on the given tape. Routing decisions are
// recorded per (sample, prompted layer, head) in sample-major order.
ForwardResult forward_batch(ag::Graph& g, LearnerState& state, std::span<const Sample> batch,
                            const ForwardOptions& opt);

// Affine map onto the grown label space.
ag::Var classify(ag::Graph& g, ClassifierHead& head, ag::Var reps);

// Evaluation conveniences (no gradients).
Matrix forward_reps(LearnerState& state, std::span<const Sample> batch, const ForwardOptions& opt,
                    std::vector<RoutingDecision>* decisions = nullptr);
std::vector<int> predict(LearnerState& state, std::span<const Sample> batch);

std::vector<DifferentiableParam*> prompt_parameters(LearnerState& state);
std::vector<DifferentiableParam*> trainable_parameters(LearnerState& state);

}  // namespace smope
