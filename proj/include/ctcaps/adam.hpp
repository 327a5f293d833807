#pragma once

#include <cstdint>
#include <vector>

#include "ctcaps/tensor.hpp"

namespace ctcaps {

// First and second moment estimates for one parameter tensor.
struct AdamState {
  std::vector<float> m;
  std::vector<float> v;
};

// Adam with bias correction. step() refuses to touch any parameter while
// some gradient is non-finite, so a poisoned batch cannot corrupt state.
class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, float lr, float beta1 = 0.9f,
                float beta2 = 0.999f, float eps = 1e-8f);

  void step();
  void zero_grad();

  int64_t steps() const { return t_; }
  float lr() const { return lr_; }
  const std::vector<AdamState>& state() const { return state_; }

 private:
  std::vector<Tensor> params_;
  std::vector<AdamState> state_;
  float lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

}  // namespace ctcaps
