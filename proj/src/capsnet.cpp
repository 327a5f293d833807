#include "ctcaps/capsnet.hpp"

#include <cmath>

#include "ctcaps/errors.hpp"
#include "ctcaps/kernels.hpp"
#include "ctcaps/ops.hpp"

namespace ctcaps {

ClassWeights count_classes(const std::vector<int>& labels) {
  ClassWeights w;
  for (int y : labels) {
    if (y == 1)
      ++w.n_pos;
    else if (y == 0)
      ++w.n_neg;
    else
      throw UsageError("labels must be 0 or 1, got " + std::to_string(y));
  }
  return w;
}

std::pair<double, double> loss_class_weights(const ClassWeights& w) {
  if (w.n_pos + w.n_neg <= 0) throw UsageError("class weights need a nonempty cohort");
  const double total = static_cast<double>(w.n_pos + w.n_neg);
  return {static_cast<double>(w.n_neg) / total, static_cast<double>(w.n_pos) / total};
}

namespace {

// Rows of length dim: writes squash(s) into v.
void squash_rows(const float* s, float* v, int64_t rows, int dim) {
  for (int64_t r = 0; r < rows; ++r) {
    const float* sp = s + r * dim;
    float* vp = v + r * dim;
    double nsq = 0.0;
    for (int d = 0; d < dim; ++d) nsq += static_cast<double>(sp[d]) * sp[d];
    const double n = std::sqrt(nsq);
    const float f = static_cast<float>(n / (1.0 + nsq));
    for (int d = 0; d < dim; ++d) vp[d] = sp[d] * f;
  }
}

}  // namespace

Tensor squash(const Tensor& s) {
  if (s.rank() < 2) throw ShapeError("squash needs rank >= 2, got " + shape_str(s.shape()));
  const int dim = s.dim(s.rank() - 1);
  const int64_t rows = s.numel() / dim;
  std::vector<float> out(static_cast<size_t>(s.numel()));
  squash_rows(s.data(), out.data(), rows, dim);
  auto ps = s.node();
  return ops::make_op(s.shape(), std::move(out), {s}, [ps, rows, dim](TensorNode& self) {
    if (!ps->requires_grad) return;
    ps->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const float* sp = ps->data.data() + r * dim;
      const float* gp = self.grad.data() + r * dim;
      float* dp = ps->grad.data() + r * dim;
      double nsq = 0.0;
      for (int d = 0; d < dim; ++d) nsq += static_cast<double>(sp[d]) * sp[d];
      const double n = std::sqrt(nsq);
      const double f = n / (1.0 + nsq);
      // dv/ds = f * I + (f'(n)/n) * s s^T with f'(n) = (1 - n^2)/(1 + n^2)^2.
      double gdot = 0.0;
      for (int d = 0; d < dim; ++d) gdot += static_cast<double>(gp[d]) * sp[d];
      const double denom = (1.0 + nsq) * (1.0 + nsq);
      const double fp_over_n = n > 1e-12 ? (1.0 - nsq) / (denom * n) : 0.0;
      for (int d = 0; d < dim; ++d)
        dp[d] += static_cast<float>(gp[d] * f + gdot * sp[d] * fp_over_n);
    }
  });
}

Tensor capsule_norms(const Tensor& v) {
  if (v.rank() != 3) throw ShapeError("capsule_norms expects (B, J, D), got " + shape_str(v.shape()));
  const int dim = v.dim(2);
  const int64_t rows = v.numel() / dim;
  std::vector<float> out(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    double nsq = 0.0;
    const float* vp = v.data() + r * dim;
    for (int d = 0; d < dim; ++d) nsq += static_cast<double>(vp[d]) * vp[d];
    out[static_cast<size_t>(r)] = static_cast<float>(std::sqrt(nsq));
  }
  auto pv = v.node();
  return ops::make_op({v.dim(0), v.dim(1)}, std::move(out), {v},
                      [pv, rows, dim](TensorNode& self) {
                        if (!pv->requires_grad) return;
                        pv->ensure_grad();
                        for (int64_t r = 0; r < rows; ++r) {
                          const float n = self.data[static_cast<size_t>(r)];
                          const float g = self.grad[static_cast<size_t>(r)];
                          const float* vp = pv->data.data() + r * dim;
                          float* dp = pv->grad.data() + r * dim;
                          const float scale = g / (n + 1e-8f);
                          for (int d = 0; d < dim; ++d) dp[d] += scale * vp[d];
                        }
                      });
}

namespace {

kernels::CapsDims caps_dims(const Tensor& u, const Tensor& w, const CapsuleLayerSpec& spec) {
  if (u.rank() != 3) throw ShapeError("capsule input must be (B, I, D), got " + shape_str(u.shape()));
  if (w.rank() != 4)
    throw ShapeError("capsule weights must be (types, J, in_dim, out_dim), got " +
                     shape_str(w.shape()));
  if (u.dim(1) != spec.in_caps || u.dim(2) != spec.in_dim)
    throw ShapeError("capsule input " + shape_str(u.shape()) + " does not match spec (" +
                     std::to_string(spec.in_caps) + " caps, dim " +
                     std::to_string(spec.in_dim) + ")");
  if (w.dim(0) != spec.types || w.dim(1) != spec.out_caps || w.dim(2) != spec.in_dim ||
      w.dim(3) != spec.out_dim)
    throw ShapeError("capsule weights " + shape_str(w.shape()) + " do not match spec");
  if (spec.types < 1 || spec.in_caps % spec.types != 0)
    throw ShapeError("in_caps " + std::to_string(spec.in_caps) +
                     " not divisible into " + std::to_string(spec.types) + " types");
  return {u.dim(0), spec.in_caps, spec.out_caps, spec.in_dim, spec.out_dim, spec.types};
}

}  // namespace

Tensor capsule_predictions(const Tensor& u, const Tensor& w, const CapsuleLayerSpec& spec) {
  const kernels::CapsDims d = caps_dims(u, w, spec);
  std::vector<float> out(static_cast<size_t>(d.batch) * d.in_caps * d.out_caps * d.out_dim);
  kernels::caps_transform_forward(u.data(), w.data(), out.data(), d);
  auto pu = u.node(), pw = w.node();
  return ops::make_op({d.batch, d.in_caps, d.out_caps, d.out_dim}, std::move(out), {u, w},
                      [pu, pw, d](TensorNode& self) {
                        if (pu->requires_grad) {
                          std::vector<float> tmp(pu->data.size());
                          kernels::caps_transform_backward_input(pw->data.data(),
                                                                 self.grad.data(), tmp.data(), d);
                          pu->ensure_grad();
                          for (size_t i = 0; i < tmp.size(); ++i) pu->grad[i] += tmp[i];
                        }
                        if (pw->requires_grad) {
                          std::vector<float> tmp(pw->data.size());
                          kernels::caps_transform_backward_weights(pu->data.data(),
                                                                   self.grad.data(), tmp.data(), d);
                          pw->ensure_grad();
                          for (size_t i = 0; i < tmp.size(); ++i) pw->grad[i] += tmp[i];
                        }
                      });
}

namespace {

// Weighted sum with frozen coupling: gradients flow to the predictions only.
Tensor routing_sum_op(const Tensor& uhat, const Tensor& c) {
  const int batch = uhat.dim(0), in_caps = uhat.dim(1), out_caps = uhat.dim(2),
            dim = uhat.dim(3);
  std::vector<float> out(static_cast<size_t>(batch) * out_caps * dim);
  kernels::routing_weighted_sum(uhat.data(), c.data(), out.data(), batch, in_caps,
                                out_caps, dim);
  auto pu = uhat.node(), pc = c.node();
  return ops::make_op({batch, out_caps, dim}, std::move(out), {uhat, c},
                      [pu, pc, batch, in_caps, out_caps, dim](TensorNode& self) {
                        if (!pu->requires_grad) return;
                        std::vector<float> tmp(pu->data.size());
                        kernels::routing_weighted_sum_backward(pc->data.data(),
                                                               self.grad.data(), tmp.data(),
                                                               batch, in_caps, out_caps, dim);
                        pu->ensure_grad();
                        for (size_t i = 0; i < tmp.size(); ++i) pu->grad[i] += tmp[i];
                      });
}

void softmax_over_j(const std::vector<float>& logits, std::vector<float>& c, int rows,
                    int j) {
  for (int r = 0; r < rows; ++r) {
    const float* lp = logits.data() + r * j;
    float* cp = c.data() + r * j;
    float mx = lp[0];
    for (int k = 1; k < j; ++k) mx = std::max(mx, lp[k]);
    double denom = 0.0;
    for (int k = 0; k < j; ++k) denom += std::exp(static_cast<double>(lp[k] - mx));
    for (int k = 0; k < j; ++k)
      cp[k] = static_cast<float>(std::exp(static_cast<double>(lp[k] - mx)) / denom);
  }
}

}  // namespace

Tensor dynamic_routing(const Tensor& uhat, int iterations, RoutingDiagnostics* diag) {
  if (uhat.rank() != 4)
    throw ShapeError("dynamic_routing expects (B, I, J, D), got " + shape_str(uhat.shape()));
  if (iterations < 1) throw UsageError("routing needs at least one iteration");
  const int batch = uhat.dim(0), in_caps = uhat.dim(1), out_caps = uhat.dim(2),
            dim = uhat.dim(3);
  const int rows = batch * in_caps;

  std::vector<float> logits(static_cast<size_t>(rows) * out_caps, 0.0f);
  std::vector<float> c(logits.size());
  std::vector<float> s(static_cast<size_t>(batch) * out_caps * dim);
  std::vector<float> v(s.size());

  for (int it = 0; it < iterations; ++it) {
    softmax_over_j(logits, c, rows, out_caps);
    if (diag) diag->coupling.push_back(c);
    if (it + 1 == iterations) break;
    // Raw refinement round, off the tape.
    kernels::routing_weighted_sum(uhat.data(), c.data(), s.data(), batch, in_caps,
                                  out_caps, dim);
    squash_rows(s.data(), v.data(), static_cast<int64_t>(batch) * out_caps, dim);
    for (int b = 0; b < batch; ++b)
      for (int i = 0; i < in_caps; ++i)
        for (int j = 0; j < out_caps; ++j) {
          const float* up = uhat.data() + ((b * in_caps + i) * out_caps + j) * dim;
          const float* vp = v.data() + (b * out_caps + j) * dim;
          double agree = 0.0;
          for (int d = 0; d < dim; ++d) agree += static_cast<double>(up[d]) * vp[d];
          logits[static_cast<size_t>((b * in_caps + i) * out_caps + j)] +=
              static_cast<float>(agree);
        }
  }

  Tensor coupling = Tensor::from_data({batch, in_caps, out_caps}, std::move(c));
  return squash(routing_sum_op(uhat, coupling));
}

Tensor capsule_layer(const Tensor& u, const Tensor& w, const CapsuleLayerSpec& spec,
                     RoutingDiagnostics* diag) {
  return dynamic_routing(capsule_predictions(u, w, spec), spec.routing_iters, diag);
}

Tensor margin_loss(const Tensor& norms, const std::vector<int>& labels, float m_pos,
                   float m_neg, float lambda) {
  if (norms.rank() != 2) throw ShapeError("margin_loss expects norms (B, K)");
  const int batch = norms.dim(0), k = norms.dim(1);
  if (static_cast<int>(labels.size()) != batch)
    throw UsageError("margin_loss got " + std::to_string(labels.size()) +
                     " labels for batch " + std::to_string(batch));
  std::vector<float> pos_mask(static_cast<size_t>(batch) * k, 0.0f);
  std::vector<float> neg_mask(static_cast<size_t>(batch) * k, lambda);
  for (int b = 0; b < batch; ++b) {
    const int y = labels[static_cast<size_t>(b)];
    if (y < 0 || y >= k) throw UsageError("label " + std::to_string(y) + " out of range");
    pos_mask[static_cast<size_t>(b * k + y)] = 1.0f;
    neg_mask[static_cast<size_t>(b * k + y)] = 0.0f;
  }
  Tensor pos_t = Tensor::from_data({batch, k}, std::move(pos_mask));
  Tensor neg_t = Tensor::from_data({batch, k}, std::move(neg_mask));
  // present class: relu(m_pos - |v|)^2; absent classes: lambda relu(|v| - m_neg)^2
  Tensor present = ops::square(ops::relu(ops::add_scalar(ops::mul_scalar(norms, -1.0f), m_pos)));
  Tensor absent = ops::square(ops::relu(ops::add_scalar(norms, -m_neg)));
  Tensor combined = ops::add(ops::mul(pos_t, present), ops::mul(neg_t, absent));
  return ops::sum_axis(combined, 1);
}

Tensor weighted_loss(const Tensor& per_example, const std::vector<int>& labels,
                     const ClassWeights& w) {
  if (per_example.rank() != 1)
    throw ShapeError("weighted_loss expects per-example losses (B,)");
  const int batch = per_example.dim(0);
  if (static_cast<int>(labels.size()) != batch)
    throw UsageError("weighted_loss got " + std::to_string(labels.size()) +
                     " labels for batch " + std::to_string(batch));
  if (w.n_pos + w.n_neg <= 0) throw UsageError("weighted_loss needs positive class counts");
  int in_pos = 0, in_neg = 0;
  for (int y : labels) {
    if (y == 1)
      ++in_pos;
    else if (y == 0)
      ++in_neg;
    else
      throw UsageError("weighted_loss labels must be 0 or 1");
  }
  // Each class's batch-mean loss scaled by the other class's global share.
  const auto [w_pos, w_neg] = loss_class_weights(w);
  std::vector<float> coef(static_cast<size_t>(batch), 0.0f);
  for (int b = 0; b < batch; ++b) {
    if (labels[static_cast<size_t>(b)] == 1)
      coef[static_cast<size_t>(b)] = static_cast<float>(w_pos / in_pos);
    else
      coef[static_cast<size_t>(b)] = static_cast<float>(w_neg / in_neg);
  }
  Tensor coef_t = Tensor::from_data({batch}, std::move(coef));
  return ops::sum(ops::mul(per_example, coef_t));
}

Tensor caps_from_conv(const Tensor& x, int caps_dim) {
  if (x.rank() != 4) throw ShapeError("caps_from_conv expects (B, C, H, W)");
  if (caps_dim < 1 || x.dim(1) % caps_dim != 0)
    throw ShapeError("channel count " + std::to_string(x.dim(1)) +
                     " not divisible by capsule dim " + std::to_string(caps_dim));
  const int batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int types = ch / caps_dim;
  const int grid = h * w;
  const int caps = types * grid;
  std::vector<float> out(static_cast<size_t>(x.numel()));
  for (int b = 0; b < batch; ++b)
    for (int t = 0; t < types; ++t)
      for (int g = 0; g < grid; ++g)
        for (int d = 0; d < caps_dim; ++d)
          out[static_cast<size_t>(((b * caps) + t * grid + g) * caps_dim + d)] =
              x.data()[((b * ch) + t * caps_dim + d) * grid + g];
  auto px = x.node();
  return ops::make_op({batch, caps, caps_dim}, std::move(out), {x},
                      [px, batch, types, grid, caps_dim, ch, caps](TensorNode& self) {
                        if (!px->requires_grad) return;
                        px->ensure_grad();
                        for (int b = 0; b < batch; ++b)
                          for (int t = 0; t < types; ++t)
                            for (int g = 0; g < grid; ++g)
                              for (int d = 0; d < caps_dim; ++d)
                                px->grad[static_cast<size_t>(
                                    ((b * ch) + t * caps_dim + d) * grid + g)] +=
                                    self.grad[static_cast<size_t>(
                                        ((b * caps) + t * grid + g) * caps_dim + d)];
                      });
}

}  // namespace ctcaps
