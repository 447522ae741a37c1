#include "co3/optim.hpp"

#include <cmath>

#include "co3/error.hpp"

namespace co3 {

void Adam::step(std::span<ad::Parameter* const> params) {
  ++steps_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (ad::Parameter* p : params) {
    if (p->grad.rows() != p->value.rows() || p->grad.cols() != p->value.cols()) p->zero_grad();
    auto [it, inserted] = moments_.try_emplace(p->name);
    Moments& mo = it->second;
    if (inserted) {
      mo.m = ad::Matrix::Zero(p->value.rows(), p->value.cols());
      mo.v = ad::Matrix::Zero(p->value.rows(), p->value.cols());
    } else if (mo.m.rows() != p->value.rows() || mo.m.cols() != p->value.cols()) {
      fail(ErrorCode::shape, "adam: moment shape mismatch for " + p->name);
    }
    mo.m = beta1_ * mo.m + (1.0 - beta1_) * p->grad;
    mo.v = beta2_ * mo.v + (1.0 - beta2_) * p->grad.cwiseProduct(p->grad);
    p->value.array() -= lr_ * (mo.m.array() / c1) / ((mo.v.array() / c2).sqrt() + eps_);
  }
}

}  // namespace co3
