#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "ctcaps/tensor.hpp"

// Capsule primitives: squash, prediction transforms, routing by agreement,
// margin loss, and the class-frequency weighted loss combination.

namespace ctcaps {

struct CapsuleLayerSpec {
  int in_caps = 0;
  int in_dim = 0;
  int out_caps = 0;
  int out_dim = 0;
  // Weight-sharing groups. Capsules are split into `types` consecutive
  // blocks that share one transform per output capsule; types == in_caps
  // means every capsule has its own.
  int types = 1;
  int routing_iters = 3;
};

// Global class counts used by the weighted loss; class 1 is positive.
struct ClassWeights {
  int64_t n_pos = 0;
  int64_t n_neg = 0;
};

ClassWeights count_classes(const std::vector<int>& labels);

// The combination coefficients used by weighted_loss, in double: the
// positive class's batch mean is scaled by first (= n_neg / total), the
// negative class's by second (= n_pos / total). They always sum to 1.
std::pair<double, double> loss_class_weights(const ClassWeights& w);

// Coupling coefficients after each routing iteration, for inspection.
struct RoutingDiagnostics {
  std::vector<std::vector<float>> coupling;  // each (B * in_caps * out_caps)
};

// v = s * |s| / (1 + |s|^2), rows along the last axis. Unit direction is
// kept; length maps to |s|^2 / (1 + |s|^2) in [0, 1).
Tensor squash(const Tensor& s);

// Euclidean norm over the last axis: (B, J, D) -> (B, J).
Tensor capsule_norms(const Tensor& v);

// u (B, I, in_dim) through per-type transforms w (types, J, in_dim, out_dim)
// giving predictions (B, I, J, out_dim).
Tensor capsule_predictions(const Tensor& u, const Tensor& w, const CapsuleLayerSpec& spec);

// Routing by agreement over predictions (B, I, J, D) -> outputs (B, J, D).
// Logits start at zero; each round applies softmax over J, forms the
// weighted sum, squashes, and adds the prediction-output agreement. Only
// the final round is recorded on the tape, with its coupling frozen.
Tensor dynamic_routing(const Tensor& uhat, int iterations,
                       RoutingDiagnostics* diag = nullptr);

// Full capsule layer: predictions then routing.
Tensor capsule_layer(const Tensor& u, const Tensor& w, const CapsuleLayerSpec& spec,
                     RoutingDiagnostics* diag = nullptr);

// Per-example margin loss from capsule norms (B, K): the target class is
// pushed above m_pos, the rest below m_neg with down-weight lambda.
Tensor margin_loss(const Tensor& norms, const std::vector<int>& labels,
                   float m_pos = 0.9f, float m_neg = 0.1f, float lambda = 0.5f);

// Combines per-example losses (B,) into a scalar, weighting each class's
// batch mean by the opposite class's share of the global counts, so the
// rare class is not drowned out.
Tensor weighted_loss(const Tensor& per_example, const std::vector<int>& labels,
                     const ClassWeights& w);

// Rearranges conv features (B, C, H, W), C = types * caps_dim, into
// capsules (B, types * H * W, caps_dim); capsule t * H * W + y * W + x
// takes dims from channels [t * caps_dim, (t + 1) * caps_dim).
Tensor caps_from_conv(const Tensor& x, int caps_dim);

}  // namespace ctcaps
