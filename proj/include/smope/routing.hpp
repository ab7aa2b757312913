#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "smope/rng.hpp"
#include "smope/types.hpp"

namespace smope {

// Selecting all experts (the dense training phase).
inline constexpr int kDenseSelect = -1;

enum class NoiseMode { kAdaptive, kFixed, kUniform };

struct NoiseConfig {
  double epsilon = 0.0;  // in [0, 1]
  NoiseMode mode = NoiseMode::kAdaptive;
};

// Per (sample, layer, head) routing record.
struct RoutingDecision {
  int layer = 0;
  int head = 0;
  Vector proxy_scores;        // raw pre-noise scores
  Vector noise;               // penalty actually applied
  std::vector<int> selected;  // ascending
};

// Lifetime expert-usage counters for one prompt block, kept per head.
struct UsageStats {
  int heads = 0;
  int experts = 0;
  std::vector<std::uint64_t> selected_counts;  // heads x experts, head-major
  std::vector<std::uint64_t> instance_counts;  // per head

  UsageStats() = default;
  UsageStats(int n_heads, int n_experts)
      : heads(n_heads),
        experts(n_experts),
        selected_counts(static_cast<std::size_t>(n_heads) * static_cast<std::size_t>(n_experts), 0),
        instance_counts(static_cast<std::size_t>(n_heads), 0) {}

  std::uint64_t selected(int head, int expert) const {
    return selected_counts[static_cast<std::size_t>(head) * static_cast<std::size_t>(experts) +
                           static_cast<std::size_t>(expert)];
  }

  // F for one head: lifetime proportion of instances on which each expert was
  // selected; zeros before any instance has been recorded.
  Vector frequencies(int head) const;
};

// Score penalties for expert selection. Adaptive mode penalizes experts whose
// lifetime frequency is at or above the per-head mean by epsilon times the
// current score range; fixed mode subtracts a constant from those experts;
// uniform mode draws i.i.d. penalties from [-epsilon, epsilon] for every
// expert. Outside training the penalty is identically zero.
Vector adaptive_noise(const Vector& proxy_scores, const Vector& frequencies,
                      const NoiseConfig& cfg, bool train, Rng* rng = nullptr);

// Indices of the K largest (score - noise), ties broken toward the lower
// index, returned ascending. K = kDenseSelect selects every expert.
std::vector<int> select_experts(const Vector& proxy_scores, const Vector& noise, int k);

// Shannon entropy of the usage profile normalized to a distribution,
// in [0, ln(n_experts)].
double usage_entropy(const Vector& frequencies);

}  // namespace smope
