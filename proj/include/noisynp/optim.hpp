#pragma once

#include <cmath>
#include <string>

#include "noisynp/common.hpp"
#include "noisynp/params.hpp"

namespace noisynp {

// Adam with bias correction. Moment accumulators live in the ParamStore so
// they travel with checkpoints; the optimizer itself only holds the step
// counter and hyperparameters.
template <class S>
class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  long step_count() const { return t_; }
  void set_step_count(long t) { t_ = t; }

  void step(ParamStore<S>& params, double lr) {
    ++t_;
    const S b1 = static_cast<S>(beta1_), b2 = static_cast<S>(beta2_);
    const S bc1 = static_cast<S>(1.0 - std::pow(beta1_, t_));
    const S bc2 = static_cast<S>(1.0 - std::pow(beta2_, t_));
    const S a = static_cast<S>(lr);
    for (const auto& name : params.names()) {
      auto& p = params.at(name);
      if (!p.grad.allFinite())
        throw NumericError("non-finite gradient in parameter " + name);
      p.m = b1 * p.m + (S(1) - b1) * p.grad;
      p.v = b2 * p.v + (S(1) - b2) * p.grad.cwiseProduct(p.grad);
      p.value.array() -=
          a * (p.m.array() / bc1) /
          ((p.v.array() / bc2).sqrt() + static_cast<S>(eps_));
    }
  }

  double beta1() const { return beta1_; }
  double beta2() const { return beta2_; }
  double eps() const { return eps_; }

 private:
  double beta1_, beta2_, eps_;
  long t_ = 0;
};

}  // namespace noisynp
