#pragma once

#include <map>
#include <span>
#include <string>

#include "co3/autodiff.hpp"

namespace co3 {

// Adam with bias-corrected moments. Moments are keyed by parameter name so
// one optimizer can own any subset of a model.
class Adam {
 public:
  struct Moments {
    ad::Matrix m;
    ad::Matrix v;
  };

  explicit Adam(double lr = 0.001, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::span<ad::Parameter* const> params);

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  long steps() const { return steps_; }
  void set_steps(long steps) { steps_ = steps; }
  std::map<std::string, Moments>& moments() { return moments_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }

 private:
  double lr_;
  double beta1_;
  double beta2_;
  double eps_;
  long steps_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace co3
