#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>
#include <vector>

#include "smope/types.hpp"

namespace smope {

// Splittable deterministic generator built on the splitmix64 mixing function.
// The stream depends only on (seed, call sequence) and uses pure integer and
// IEEE double arithmetic, so it is reproducible across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Independent child stream; deterministic given the parent's state.
  Rng split() { return Rng(next_u64() ^ 0xA02B9FE5E09FD0C2ULL); }

  // Child stream keyed by a caller-chosen tag, independent of how many draws
  // the parent has made. Used to give each pipeline stage its own stream.
  Rng child(std::uint64_t tag) const {
    Rng r(state_ ^ (tag * 0xD6E8FEB86659FD93ULL + 0x9E3779B97F4A7C15ULL));
    r.next_u64();
    return r;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; the spare is cached.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  double gaussian(double mu, double sigma) { return mu + sigma * gaussian(); }

  // Unbiased integer in [0, n).
  int uniform_int(int n) {
    const auto bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return static_cast<int>(r % bound);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[static_cast<std::size_t>(uniform_int(static_cast<int>(i)))]);
    }
  }

  Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double lo, double hi) {
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) {
        m(r, c) = uniform(lo, hi);
      }
    }
    return m;
  }

  Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double mu = 0.0,
                         double sigma = 1.0) {
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) {
        m(r, c) = gaussian(mu, sigma);
      }
    }
    return m;
  }

  Vector gaussian_vector(Eigen::Index n, double mu = 0.0, double sigma = 1.0) {
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      v(i) = gaussian(mu, sigma);
    }
    return v;
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace smope
