#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "smope/types.hpp"

namespace smope {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over a fixed parameter set. step() consumes and zeroes the gradients,
// skipping parameters that do not require them.
class Adam {
 public:
  Adam(std::vector<DifferentiableParam*> params, AdamConfig cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    slots_.reserve(params_.size());
    for (const auto* p : params_) {
      slots_.push_back({Matrix::Zero(p->value.rows(), p->value.cols()),
                        Matrix::Zero(p->value.rows(), p->value.cols())});
    }
  }

  void step(double lr_scale = 1.0) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      DifferentiableParam& p = *params_[i];
      if (!p.requires_grad) {
        continue;
      }
      Slot& s = slots_[i];
      s.m = cfg_.beta1 * s.m + (1.0 - cfg_.beta1) * p.grad;
      s.v = cfg_.beta2 * s.v + (1.0 - cfg_.beta2) * p.grad.cwiseProduct(p.grad);
      const double lr = lr_scale * cfg_.lr;
      p.value -= lr * (s.m / bc1).cwiseQuotient(((s.v / bc2).cwiseSqrt().array() + cfg_.eps).matrix());
      p.grad.setZero();
    }
  }

 private:
  struct Slot {
    Matrix m, v;
  };
  std::vector<DifferentiableParam*> params_;
  std::vector<Slot> slots_;
  AdamConfig cfg_;
  long t_ = 0;
};

// Cosine decay factor over [0, total): 1 at step 0 falling to ~0 at the end.
inline double cosine_decay(int step, int total) {
  if (total <= 1) {
    return 1.0;
  }
  return 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                               static_cast<double>(total)));
}

}  // namespace smope
