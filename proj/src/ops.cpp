#include "ctcaps/ops.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "ctcaps/errors.hpp"
#include "ctcaps/kernels.hpp"

namespace ctcaps::ops {

namespace {

thread_local int g_no_grad_depth = 0;

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

void add_into(const std::shared_ptr<TensorNode>& p, const std::vector<float>& g) {
  if (!p->requires_grad) return;
  p->ensure_grad();
  for (size_t i = 0; i < g.size(); ++i) p->grad[i] += g[i];
}

}  // namespace

bool grad_enabled() { return g_no_grad_depth == 0; }
NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

Tensor make_op(std::vector<int> shape, std::vector<float> data,
               const std::vector<Tensor>& inputs,
               std::function<void(TensorNode&)> backward_fn) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needs = false;
  if (grad_enabled())
    for (const auto& t : inputs)
      if (t.requires_grad()) {
        needs = true;
        break;
      }
  if (needs) {
    node->requires_grad = true;
    for (const auto& t : inputs) node->parents.push_back(t.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor::wrap(std::move(node));
}

void backward(const Tensor& root) {
  if (!root.defined()) throw UsageError("backward on an undefined tensor");
  if (!root.requires_grad())
    throw UsageError("backward needs a tensor that requires gradients");
  if (root.numel() != 1)
    throw UsageError("backward needs a scalar root, got " + shape_str(root.shape()));

  // Post-order DFS over grad-requiring nodes; reversed it yields a
  // topological order with the root first.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  struct Frame {
    TensorNode* node;
    size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({root.node().get(), 0});
  seen.insert(root.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.node->parents.size()) {
      TensorNode* p = f.node->parents[f.next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  // Gradients from earlier passes are set aside so this pass propagates
  // only its own contribution, then added back: repeated calls accumulate.
  std::vector<std::vector<float>> saved(order.size());
  for (size_t i = 0; i < order.size(); ++i)
    if (!order[i]->grad.empty()) {
      saved[i] = std::move(order[i]->grad);
      order[i]->grad.clear();
    }

  root.node()->ensure_grad();
  root.node()->grad[0] = 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }

  for (size_t i = 0; i < order.size(); ++i)
    if (!saved[i].empty()) {
      order[i]->ensure_grad();
      for (size_t k = 0; k < saved[i].size(); ++k) order[i]->grad[k] += saved[i][k];
    }
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<float> out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
  auto pa = a.node(), pb = b.node();
  return make_op(a.shape(), std::move(out), {a, b}, [pa, pb](TensorNode& self) {
    add_into(pa, self.grad);
    add_into(pb, self.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<float> out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] -= b.data()[i];
  auto pa = a.node(), pb = b.node();
  return make_op(a.shape(), std::move(out), {a, b}, [pa, pb](TensorNode& self) {
    add_into(pa, self.grad);
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<float> out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] *= b.data()[i];
  auto pa = a.node(), pb = b.node();
  return make_op(a.shape(), std::move(out), {a, b}, [pa, pb](TensorNode& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        pa->grad[i] += self.grad[i] * pb->data[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        pb->grad[i] += self.grad[i] * pa->data[i];
    }
  });
}

Tensor add_scalar(const Tensor& a, float s) {
  std::vector<float> out(a.values());
  for (float& v : out) v += s;
  auto pa = a.node();
  return make_op(a.shape(), std::move(out), {a},
                 [pa](TensorNode& self) { add_into(pa, self.grad); });
}

Tensor mul_scalar(const Tensor& a, float s) {
  std::vector<float> out(a.values());
  for (float& v : out) v *= s;
  auto pa = a.node();
  return make_op(a.shape(), std::move(out), {a}, [pa, s](TensorNode& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * s;
  });
}

Tensor relu(const Tensor& a) {
  std::vector<float> out(a.values());
  for (float& v : out) v = v > 0.0f ? v : 0.0f;
  auto pa = a.node();
  return make_op(a.shape(), std::move(out), {a}, [pa](TensorNode& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      if (pa->data[i] > 0.0f) pa->grad[i] += self.grad[i];
  });
}

Tensor square(const Tensor& a) {
  std::vector<float> out(a.values());
  for (float& v : out) v *= v;
  auto pa = a.node();
  return make_op(a.shape(), std::move(out), {a}, [pa](TensorNode& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      pa->grad[i] += 2.0f * pa->data[i] * self.grad[i];
  });
}

namespace {

// Decompose a shape around one axis: out[o, k, i] with k along the axis.
void axis_split(const std::vector<int>& shape, int axis, int& outer, int& n, int& inner) {
  if (axis < 0 || axis >= static_cast<int>(shape.size()))
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
  n = shape[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i)
    inner *= shape[i];
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
  int outer, n, inner;
  axis_split(a.shape(), axis, outer, n, inner);
  std::vector<float> out(static_cast<size_t>(a.numel()));
  const float* x = a.data();
  for (int o = 0; o < outer; ++o)
    for (int i = 0; i < inner; ++i) {
      float mx = x[(o * n + 0) * inner + i];
      for (int k = 1; k < n; ++k) mx = std::max(mx, x[(o * n + k) * inner + i]);
      double denom = 0.0;
      for (int k = 0; k < n; ++k)
        denom += std::exp(static_cast<double>(x[(o * n + k) * inner + i] - mx));
      for (int k = 0; k < n; ++k)
        out[(o * n + k) * inner + i] = static_cast<float>(
            std::exp(static_cast<double>(x[(o * n + k) * inner + i] - mx)) / denom);
    }
  auto pa = a.node();
  return make_op(a.shape(), std::move(out), {a},
                 [pa, outer, n, inner](TensorNode& self) {
                   if (!pa->requires_grad) return;
                   pa->ensure_grad();
                   const float* y = self.data.data();
                   const float* g = self.grad.data();
                   for (int o = 0; o < outer; ++o)
                     for (int i = 0; i < inner; ++i) {
                       double dot = 0.0;
                       for (int k = 0; k < n; ++k)
                         dot += static_cast<double>(g[(o * n + k) * inner + i]) *
                                y[(o * n + k) * inner + i];
                       for (int k = 0; k < n; ++k) {
                         size_t at = static_cast<size_t>((o * n + k) * inner + i);
                         pa->grad[at] += y[at] * (g[at] - static_cast<float>(dot));
                       }
                     }
                 });
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape " + shape_str(a.shape()) + " to " + shape_str(shape) +
                     " changes element count");
  auto pa = a.node();
  return make_op(std::move(shape), a.values(), {a},
                 [pa](TensorNode& self) { add_into(pa, self.grad); });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.values()) acc += v;
  auto pa = a.node();
  return make_op({1}, {static_cast<float>(acc)}, {a}, [pa](TensorNode& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (float& g : pa->grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.values()) acc += v;
  const float inv = 1.0f / static_cast<float>(a.numel());
  auto pa = a.node();
  return make_op({1}, {static_cast<float>(acc / static_cast<double>(a.numel()))}, {a},
                 [pa, inv](TensorNode& self) {
                   if (!pa->requires_grad) return;
                   pa->ensure_grad();
                   for (float& g : pa->grad) g += self.grad[0] * inv;
                 });
}

Tensor sum_axis(const Tensor& a, int axis) {
  int outer, n, inner;
  axis_split(a.shape(), axis, outer, n, inner);
  std::vector<int> out_shape;
  for (int i = 0; i < a.rank(); ++i)
    if (i != axis) out_shape.push_back(a.dim(i));
  if (out_shape.empty()) out_shape = {1};
  std::vector<float> out(static_cast<size_t>(outer) * inner, 0.0f);
  const float* x = a.data();
  for (int o = 0; o < outer; ++o)
    for (int k = 0; k < n; ++k)
      for (int i = 0; i < inner; ++i) out[o * inner + i] += x[(o * n + k) * inner + i];
  auto pa = a.node();
  return make_op(std::move(out_shape), std::move(out), {a},
                 [pa, outer, n, inner](TensorNode& self) {
                   if (!pa->requires_grad) return;
                   pa->ensure_grad();
                   for (int o = 0; o < outer; ++o)
                     for (int k = 0; k < n; ++k)
                       for (int i = 0; i < inner; ++i)
                         pa->grad[static_cast<size_t>((o * n + k) * inner + i)] +=
                             self.grad[static_cast<size_t>(o * inner + i)];
                 });
}

Tensor pick(const Tensor& a, std::vector<int> idx) {
  if (static_cast<int>(idx.size()) != a.rank())
    throw ShapeError("pick index rank " + std::to_string(idx.size()) +
                     " does not match tensor " + shape_str(a.shape()));
  size_t flat = 0;
  for (size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= a.dim(static_cast<int>(k)))
      throw ShapeError("pick index out of range for " + shape_str(a.shape()));
    flat = flat * static_cast<size_t>(a.dim(static_cast<int>(k))) +
           static_cast<size_t>(idx[k]);
  }
  auto pa = a.node();
  return make_op({1}, {a.data()[flat]}, {a}, [pa, flat](TensorNode& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    pa->grad[flat] += self.grad[0];
  });
}

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul needs rank-2 tensors, got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  const int m = trans_a ? a.dim(1) : a.dim(0);
  const int k = trans_a ? a.dim(0) : a.dim(1);
  const int k2 = trans_b ? b.dim(1) : b.dim(0);
  const int n = trans_b ? b.dim(0) : b.dim(1);
  if (k != k2)
    throw ShapeError("matmul inner dims disagree: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  std::vector<float> out(static_cast<size_t>(m) * n);
  kernels::matmul(a.data(), b.data(), out.data(), m, k, n, trans_a, trans_b);
  auto pa = a.node(), pb = b.node();
  return make_op({m, n}, std::move(out), {a, b},
                 [pa, pb, m, k, n, trans_a, trans_b](TensorNode& self) {
                   const float* dy = self.grad.data();
                   if (pa->requires_grad) {
                     std::vector<float> tmp(pa->data.size());
                     if (!trans_a) {
                       if (!trans_b)
                         kernels::matmul(dy, pb->data.data(), tmp.data(), m, n, k, false, true);
                       else
                         kernels::matmul(dy, pb->data.data(), tmp.data(), m, n, k, false, false);
                     } else {
                       if (!trans_b)
                         kernels::matmul(pb->data.data(), dy, tmp.data(), k, n, m, false, true);
                       else
                         kernels::matmul(pb->data.data(), dy, tmp.data(), k, n, m, true, true);
                     }
                     add_into(pa, tmp);
                   }
                   if (pb->requires_grad) {
                     std::vector<float> tmp(pb->data.size());
                     if (!trans_b) {
                       if (!trans_a)
                         kernels::matmul(pa->data.data(), dy, tmp.data(), k, m, n, true, false);
                       else
                         kernels::matmul(pa->data.data(), dy, tmp.data(), k, m, n, false, false);
                     } else {
                       if (!trans_a)
                         kernels::matmul(dy, pa->data.data(), tmp.data(), n, m, k, true, false);
                       else
                         kernels::matmul(dy, pa->data.data(), tmp.data(), n, m, k, true, true);
                     }
                     add_into(pb, tmp);
                   }
                 });
}

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() != 2 || w.rank() != 2 || bias.rank() != 1)
    throw ShapeError("dense expects x (B, in), w (in, out), bias (out)");
  if (x.dim(1) != w.dim(0) || bias.dim(0) != w.dim(1))
    throw ShapeError("dense dims disagree: x " + shape_str(x.shape()) + ", w " +
                     shape_str(w.shape()) + ", bias " + shape_str(bias.shape()));
  const int batch = x.dim(0), in = w.dim(0), out_dim = w.dim(1);
  std::vector<float> out(static_cast<size_t>(batch) * out_dim);
  kernels::matmul(x.data(), w.data(), out.data(), batch, in, out_dim, false, false);
  for (int b = 0; b < batch; ++b)
    for (int o = 0; o < out_dim; ++o) out[static_cast<size_t>(b) * out_dim + o] += bias.data()[o];
  auto px = x.node(), pw = w.node(), pb = bias.node();
  return make_op({batch, out_dim}, std::move(out), {x, w, bias},
                 [px, pw, pb, batch, in, out_dim](TensorNode& self) {
                   const float* dy = self.grad.data();
                   if (px->requires_grad) {
                     std::vector<float> tmp(px->data.size());
                     kernels::matmul(dy, pw->data.data(), tmp.data(), batch, out_dim, in, false, true);
                     add_into(px, tmp);
                   }
                   if (pw->requires_grad) {
                     std::vector<float> tmp(pw->data.size());
                     kernels::matmul(px->data.data(), dy, tmp.data(), in, batch, out_dim, true, false);
                     add_into(pw, tmp);
                   }
                   if (pb->requires_grad) {
                     pb->ensure_grad();
                     for (int o = 0; o < out_dim; ++o) {
                       float acc = 0.0f;
                       for (int b = 0; b < batch; ++b) acc += dy[static_cast<size_t>(b) * out_dim + o];
                       pb->grad[static_cast<size_t>(o)] += acc;
                     }
                   }
                 });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
  if (x.rank() != 4 || w.rank() != 4 || bias.rank() != 1)
    throw ShapeError("conv2d expects x (B, C, H, W), w (O, C, K, K), bias (O)");
  if (w.dim(2) != w.dim(3)) throw ShapeError("conv2d kernels must be square");
  if (x.dim(1) != w.dim(1))
    throw ShapeError("conv2d channels disagree: x " + shape_str(x.shape()) + ", w " +
                     shape_str(w.shape()));
  if (bias.dim(0) != w.dim(0)) throw ShapeError("conv2d bias must have one value per filter");
  if (stride < 1 || pad < 0) throw UsageError("conv2d needs stride >= 1 and pad >= 0");
  kernels::Conv2dDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3),
                        w.dim(0), w.dim(2), stride,   pad};
  if (d.h + 2 * pad < d.ksize || d.w + 2 * pad < d.ksize)
    throw ShapeError("conv2d input " + shape_str(x.shape()) + " smaller than kernel");
  const int oh = d.out_h(), ow = d.out_w();
  std::vector<float> out(static_cast<size_t>(d.batch) * d.cout * oh * ow);
  kernels::conv2d_forward(x.data(), w.data(), bias.data(), out.data(), d);
  auto px = x.node(), pw = w.node(), pb = bias.node();
  return make_op({d.batch, d.cout, oh, ow}, std::move(out), {x, w, bias},
                 [px, pw, pb, d](TensorNode& self) {
                   if (px->requires_grad) {
                     std::vector<float> tmp(px->data.size());
                     kernels::conv2d_backward_input(pw->data.data(), self.grad.data(),
                                                    tmp.data(), d);
                     add_into(px, tmp);
                   }
                   if (pw->requires_grad || pb->requires_grad) {
                     std::vector<float> dw(pw->data.size());
                     std::vector<float> db(pb->data.size());
                     kernels::conv2d_backward_filter(px->data.data(), self.grad.data(),
                                                     dw.data(), db.data(), d);
                     add_into(pw, dw);
                     add_into(pb, db);
                   }
                 });
}

MaxPoolResult maxpool2d(const Tensor& x, int window, int stride) {
  if (x.rank() != 4) throw ShapeError("maxpool2d expects x (B, C, H, W)");
  if (window < 1 || stride < 1) throw UsageError("maxpool2d needs window, stride >= 1");
  const int batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (window > h || window > w)
    throw ShapeError("maxpool2d window " + std::to_string(window) + " exceeds input " +
                     shape_str(x.shape()));
  const int oh = (h - window) / stride + 1;
  const int ow = (w - window) / stride + 1;
  std::vector<float> out(static_cast<size_t>(batch) * c * oh * ow);
  auto argmax = std::make_shared<std::vector<int32_t>>(out.size());
  kernels::maxpool_forward(x.data(), out.data(), argmax->data(), batch, c, h, w, window,
                           stride);
  auto px = x.node();
  Tensor t = make_op({batch, c, oh, ow}, std::move(out), {x},
                     [px, argmax, batch, c, h, w, window, stride](TensorNode& self) {
                       if (!px->requires_grad) return;
                       std::vector<float> tmp(px->data.size());
                       kernels::maxpool_backward(self.grad.data(), argmax->data(), tmp.data(),
                                                 batch, c, h, w, window, stride);
                       add_into(px, tmp);
                     });
  return {t, argmax};
}

BatchNormState BatchNormState::create(int channels) {
  BatchNormState s;
  s.running_mean = Tensor::zeros({channels});
  s.running_var = Tensor::full({channels}, 1.0f);
  return s;
}

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 BatchNormState& state, bool training) {
  if (x.rank() != 4) throw ShapeError("batchnorm expects x (B, C, H, W)");
  const int batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c)
    throw ShapeError("batchnorm gamma/beta must be (C)");
  if (state.running_mean.dim(0) != c)
    throw ShapeError("batchnorm state built for " + std::to_string(state.running_mean.dim(0)) +
                     " channels, input has " + std::to_string(c));
  const int plane = h * w;
  const int per_channel = batch * plane;
  const float eps = state.eps;

  std::vector<float> mean_v(static_cast<size_t>(c)), var_v(static_cast<size_t>(c));
  if (training) {
    for (int ch = 0; ch < c; ++ch) {
      double m = 0.0;
      for (int b = 0; b < batch; ++b) {
        const float* p = x.data() + (b * c + ch) * plane;
        for (int i = 0; i < plane; ++i) m += p[i];
      }
      m /= per_channel;
      double v = 0.0;
      for (int b = 0; b < batch; ++b) {
        const float* p = x.data() + (b * c + ch) * plane;
        for (int i = 0; i < plane; ++i) {
          double d = p[i] - m;
          v += d * d;
        }
      }
      v /= per_channel;
      mean_v[static_cast<size_t>(ch)] = static_cast<float>(m);
      var_v[static_cast<size_t>(ch)] = static_cast<float>(v);
    }
    if (!state.initialized) {
      for (int ch = 0; ch < c; ++ch) {
        state.running_mean.data()[ch] = mean_v[static_cast<size_t>(ch)];
        state.running_var.data()[ch] = var_v[static_cast<size_t>(ch)];
      }
      state.initialized = true;
    } else {
      const float mom = state.momentum;
      for (int ch = 0; ch < c; ++ch) {
        state.running_mean.data()[ch] =
            mom * state.running_mean.data()[ch] + (1.0f - mom) * mean_v[static_cast<size_t>(ch)];
        state.running_var.data()[ch] =
            mom * state.running_var.data()[ch] + (1.0f - mom) * var_v[static_cast<size_t>(ch)];
      }
    }
  } else {
    if (!state.initialized)
      throw StateError("batchnorm eval mode before any training batch set the running stats");
    for (int ch = 0; ch < c; ++ch) {
      mean_v[static_cast<size_t>(ch)] = state.running_mean.data()[ch];
      var_v[static_cast<size_t>(ch)] = state.running_var.data()[ch];
    }
  }

  std::vector<float> out(static_cast<size_t>(x.numel()));
  for (int b = 0; b < batch; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const float invstd = 1.0f / std::sqrt(var_v[static_cast<size_t>(ch)] + eps);
      const float g = gamma.data()[ch], bt = beta.data()[ch];
      const float mu = mean_v[static_cast<size_t>(ch)];
      const float* p = x.data() + (b * c + ch) * plane;
      float* q = out.data() + (b * c + ch) * plane;
      for (int i = 0; i < plane; ++i) q[i] = g * (p[i] - mu) * invstd + bt;
    }

  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  return make_op(
      x.shape(), std::move(out), {x, gamma, beta},
      [px, pg, pb, mean_v, var_v, batch, c, plane, per_channel, eps,
       training](TensorNode& self) {
        const float* g = self.grad.data();
        for (int ch = 0; ch < c; ++ch) {
          const double mu = mean_v[static_cast<size_t>(ch)];
          const double invstd = 1.0 / std::sqrt(static_cast<double>(var_v[static_cast<size_t>(ch)]) + eps);
          const double gam = pg->data[static_cast<size_t>(ch)];
          double sum_dy = 0.0, sum_dy_xhat = 0.0, sum_dx_centered = 0.0, sum_centered = 0.0;
          for (int b = 0; b < batch; ++b) {
            const float* xp = px->data.data() + (b * c + ch) * plane;
            const float* gp = g + (b * c + ch) * plane;
            for (int i = 0; i < plane; ++i) {
              const double centered = xp[i] - mu;
              sum_dy += gp[i];
              sum_dy_xhat += gp[i] * centered * invstd;
              sum_dx_centered += gp[i] * gam * centered;
              sum_centered += centered;
            }
          }
          if (pg->requires_grad) {
            pg->ensure_grad();
            pg->grad[static_cast<size_t>(ch)] += static_cast<float>(sum_dy_xhat);
          }
          if (pb->requires_grad) {
            pb->ensure_grad();
            pb->grad[static_cast<size_t>(ch)] += static_cast<float>(sum_dy);
          }
          if (!px->requires_grad) continue;
          px->ensure_grad();
          if (!training) {
            const double scale = gam * invstd;
            for (int b = 0; b < batch; ++b) {
              const float* gp = g + (b * c + ch) * plane;
              float* dxp = px->grad.data() + (b * c + ch) * plane;
              for (int i = 0; i < plane; ++i) dxp[i] += static_cast<float>(gp[i] * scale);
            }
            continue;
          }
          // Gradients flow through the batch statistics as well.
          const double dvar = sum_dx_centered * (-0.5) * invstd * invstd * invstd;
          const double dmean =
              -invstd * gam * sum_dy + dvar * (-2.0 / per_channel) * sum_centered;
          for (int b = 0; b < batch; ++b) {
            const float* xp = px->data.data() + (b * c + ch) * plane;
            const float* gp = g + (b * c + ch) * plane;
            float* dxp = px->grad.data() + (b * c + ch) * plane;
            for (int i = 0; i < plane; ++i) {
              const double centered = xp[i] - mu;
              dxp[i] += static_cast<float>(gp[i] * gam * invstd +
                                           dvar * 2.0 * centered / per_channel +
                                           dmean / per_channel);
            }
          }
        }
      });
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw ShapeError("softmax_cross_entropy expects logits (B, K)");
  const int batch = logits.dim(0), k = logits.dim(1);
  if (static_cast<int>(labels.size()) != batch)
    throw UsageError("softmax_cross_entropy got " + std::to_string(labels.size()) +
                     " labels for batch " + std::to_string(batch));
  for (int y : labels)
    if (y < 0 || y >= k) throw UsageError("label " + std::to_string(y) + " out of range");
  std::vector<float> probs(static_cast<size_t>(batch) * k);
  std::vector<float> out(static_cast<size_t>(batch));
  const float* x = logits.data();
  for (int b = 0; b < batch; ++b) {
    float mx = x[b * k];
    for (int j = 1; j < k; ++j) mx = std::max(mx, x[b * k + j]);
    double denom = 0.0;
    for (int j = 0; j < k; ++j) denom += std::exp(static_cast<double>(x[b * k + j] - mx));
    for (int j = 0; j < k; ++j)
      probs[static_cast<size_t>(b * k + j)] =
          static_cast<float>(std::exp(static_cast<double>(x[b * k + j] - mx)) / denom);
    out[static_cast<size_t>(b)] =
        static_cast<float>(mx + std::log(denom) - x[b * k + labels[static_cast<size_t>(b)]]);
  }
  auto pl = logits.node();
  return make_op({batch}, std::move(out), {logits},
                 [pl, probs = std::move(probs), labels, batch, k](TensorNode& self) {
                   if (!pl->requires_grad) return;
                   pl->ensure_grad();
                   for (int b = 0; b < batch; ++b)
                     for (int j = 0; j < k; ++j) {
                       float p = probs[static_cast<size_t>(b * k + j)];
                       if (j == labels[static_cast<size_t>(b)]) p -= 1.0f;
                       pl->grad[static_cast<size_t>(b * k + j)] +=
                           self.grad[static_cast<size_t>(b)] * p;
                     }
                 });
}

Tensor bilinear_resize(const Tensor& x, int oh, int ow) {
  if (x.rank() != 2) throw ShapeError("bilinear_resize expects a (H, W) plane");
  if (oh < 1 || ow < 1) throw UsageError("bilinear_resize needs positive output dims");
  std::vector<float> out(static_cast<size_t>(oh) * ow);
  kernels::bilinear_resize(x.data(), out.data(), x.dim(0), x.dim(1), oh, ow);
  return Tensor::from_data({oh, ow}, std::move(out));
}

}  // namespace ctcaps::ops
