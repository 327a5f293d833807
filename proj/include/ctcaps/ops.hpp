#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "ctcaps/tensor.hpp"

// Differentiable operations. Each op computes its value eagerly and, when
// gradients are enabled and some input requires them, records a backward
// closure on the output node. backward() then walks the tape once per call
// and adds this pass's gradients on top of whatever the nodes already hold,
// so two backward calls double every gradient.

namespace ctcaps::ops {

bool grad_enabled();

// Scoped switch to pure inference: ops built while a guard is alive carry
// no parents and no backward closures. Nests; thread-local.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Reverse pass from a scalar root. Every reachable node that requires
// gradients receives its accumulated gradient, intermediates included.
void backward(const Tensor& root);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, float s);
Tensor mul_scalar(const Tensor& a, float s);
Tensor relu(const Tensor& a);
Tensor square(const Tensor& a);
Tensor softmax(const Tensor& a, int axis);
Tensor reshape(const Tensor& a, std::vector<int> shape);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis);
// Single element as a scalar; gradient lands on that element alone.
Tensor pick(const Tensor& a, std::vector<int> idx);

// Rank-2 only. trans flags read the operand transposed without moving data.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
// x (B, in) * w (in, out) + bias (out).
Tensor dense(const Tensor& x, const Tensor& w, const Tensor& bias);

// x (B, C, H, W), w (O, C, K, K), bias (O). Output floor-sized.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);

struct MaxPoolResult {
  Tensor out;
  // Flat index of each window winner inside its (H, W) plane; ties go to
  // the lowest index. Shared with the backward closure.
  std::shared_ptr<std::vector<int32_t>> argmax;
};
MaxPoolResult maxpool2d(const Tensor& x, int window, int stride);

// Per-channel running statistics for batchnorm. Stats are plain values,
// never on the tape.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  bool initialized = false;
  float momentum = 0.9f;
  float eps = 1e-5f;

  static BatchNormState create(int channels);
};

// x (B, C, H, W), gamma/beta (C). Training mode normalizes by biased batch
// statistics and folds them into the running stats (the first batch copies
// them outright). Eval mode uses the running stats and throws StateError
// if none were ever recorded.
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 BatchNormState& state, bool training);

// Per-example cross entropy from logits (B, K); labels in [0, K). Returns
// shape (B,).
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Plain value op, never on the tape. x rank-2 (H, W) -> (oh, ow).
Tensor bilinear_resize(const Tensor& x, int oh, int ow);

// Tape-node factory shared by the capsule ops: value plus closure in, node
// wired to the inputs that require gradients out.
Tensor make_op(std::vector<int> shape, std::vector<float> data,
               const std::vector<Tensor>& inputs,
               std::function<void(TensorNode&)> backward_fn);

}  // namespace ctcaps::ops
