#include "ctcaps/adam.hpp"

#include <cmath>

#include "ctcaps/errors.hpp"

namespace ctcaps {

Adam::Adam(std::vector<Tensor> params, float lr, float beta1, float beta2, float eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (params_.empty()) throw UsageError("optimizer needs at least one parameter");
  if (!(lr_ > 0.0f)) throw UsageError("learning rate must be positive");
  state_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].defined() || !params_[i].requires_grad())
      throw UsageError("optimizer parameters must require gradients");
    state_[i].m.assign(params_[i].values().size(), 0.0f);
    state_[i].v.assign(params_[i].values().size(), 0.0f);
  }
}

void Adam::step() {
  // Validate every gradient before mutating anything; a missing buffer
  // counts as all zeros.
  for (const Tensor& p : params_)
    if (p.has_grad() && !all_finite(p.grad()))
      throw OptimizerError("non-finite gradient, step refused");

  ++t_;
  const double corr1 = 1.0 - std::pow(static_cast<double>(beta1_), static_cast<double>(t_));
  const double corr2 = 1.0 - std::pow(static_cast<double>(beta2_), static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    AdamState& s = state_[i];
    const float* g = p.has_grad() ? p.grad().data() : nullptr;
    float* w = p.data();
    for (size_t k = 0; k < s.m.size(); ++k) {
      const float gk = g ? g[k] : 0.0f;
      s.m[k] = beta1_ * s.m[k] + (1.0f - beta1_) * gk;
      s.v[k] = beta2_ * s.v[k] + (1.0f - beta2_) * gk * gk;
      const double mhat = s.m[k] / corr1;
      const double vhat = s.v[k] / corr2;
      w[k] -= static_cast<float>(lr_ * mhat / (std::sqrt(vhat) + eps_));
    }
  }
}

void Adam::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

}  // namespace ctcaps
