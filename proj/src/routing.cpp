#include "smope/routing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace smope {

Vector UsageStats::frequencies(int head) const {
  if (head < 0 || head >= heads) {
    throw DimensionError("UsageStats::frequencies: head index out of range");
  }
  Vector f = Vector::Zero(experts);
  const std::uint64_t n = instance_counts[static_cast<std::size_t>(head)];
  if (n == 0) {
    return f;
  }
  for (int e = 0; e < experts; ++e) {
    f(e) = static_cast<double>(selected(head, e)) / static_cast<double>(n);
  }
  return f;
}

Vector adaptive_noise(const Vector& proxy_scores, const Vector& frequencies,
                      const NoiseConfig& cfg, bool train, Rng* rng) {
  const Eigen::Index n = proxy_scores.size();
  Vector noise = Vector::Zero(n);
  if (!train || cfg.epsilon == 0.0) {
    return noise;
  }
  if (cfg.mode == NoiseMode::kUniform) {
    if (rng == nullptr) {
      throw ConfigError("adaptive_noise: uniform mode needs an Rng");
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      noise(i) = rng->uniform(-cfg.epsilon, cfg.epsilon);
    }
    return noise;
  }
  if (frequencies.size() != n) {
    throw DimensionError("adaptive_noise: frequency vector length mismatch");
  }
  const double mean_freq = frequencies.mean();
  const double range = proxy_scores.maxCoeff() - proxy_scores.minCoeff();
  const double penalty = cfg.mode == NoiseMode::kAdaptive ? cfg.epsilon * range : cfg.epsilon;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (frequencies(i) >= mean_freq) {
      noise(i) = penalty;
    }
  }
  return noise;
}

std::vector<int> select_experts(const Vector& proxy_scores, const Vector& noise, int k) {
  const int n = static_cast<int>(proxy_scores.size());
  if (k == kDenseSelect) {
    k = n;
  }
  if (k < 1 || k > n) {
    throw ConfigError("select_experts: K must lie in [1, number of experts]");
  }
  if (noise.size() != proxy_scores.size()) {
    throw DimensionError("select_experts: noise vector length mismatch");
  }
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  // Stable sort on descending penalized score keeps the lower index first on
  // ties.
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return proxy_scores(a) - noise(a) > proxy_scores(b) - noise(b);
  });
  std::vector<int> selected(order.begin(), order.begin() + k);
  std::sort(selected.begin(), selected.end());
  return selected;
}

double usage_entropy(const Vector& frequencies) {
  const double total = frequencies.sum();
  if (total <= 0.0) {
    throw DataError("usage_entropy: usage profile is all zero");
  }
  double h = 0.0;
  for (Eigen::Index i = 0; i < frequencies.size(); ++i) {
    const double p = frequencies(i) / total;
    if (p > 0.0) {
      h -= p * std::log(p);
    }
  }
  return h;
}

}  // namespace smope
