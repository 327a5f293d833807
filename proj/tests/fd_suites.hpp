#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "ctcaps/capsnet.hpp"
#include "ctcaps/ops.hpp"
#include "ctcaps/rng.hpp"
#include "ctcaps/tensor.hpp"
#include "fd_check.hpp"

// One randomized finite-difference suite per differentiable op. Each
// instance pairs leaf tensors with a pure builder reducing the op's output
// to a scalar through a fixed random projection, keeping losses O(1).

namespace fdsuites {

struct Instance {
  std::vector<ctcaps::Tensor> leaves;
  fdcheck::Builder build;
};

struct Suite {
  std::string op;
  std::vector<Instance> instances;
};

namespace detail {

using ctcaps::Rng;
using ctcaps::Tensor;

inline std::vector<float> uniform_vec(Rng& rng, int64_t n, float lo, float hi) {
  std::vector<float> v(static_cast<size_t>(n));
  for (float& x : v) x = rng.uniform(lo, hi);
  return v;
}

inline Tensor rand_tensor(Rng& rng, std::vector<int> shape, float lo = -1.0f, float hi = 1.0f) {
  const int64_t n = ctcaps::shape_numel(shape);
  return Tensor::from_data(std::move(shape), uniform_vec(rng, n, lo, hi));
}

// Values bounded away from zero so relu/abs kinks sit farther than the FD
// step from every sample point.
inline Tensor rand_tensor_off_zero(Rng& rng, std::vector<int> shape, float margin = 0.05f) {
  const int64_t n = ctcaps::shape_numel(shape);
  std::vector<float> v(static_cast<size_t>(n));
  for (float& x : v) {
    const float mag = rng.uniform(margin, 1.0f);
    x = rng.uniform() < 0.5f ? -mag : mag;
  }
  return Tensor::from_data(std::move(shape), std::move(v));
}

// Fixed projection tensor used to reduce an op output to a scalar. Scaled
// by 1/numel to keep the loss O(1).
inline Tensor projection(Rng& rng, const std::vector<int>& shape) {
  const int64_t n = ctcaps::shape_numel(shape);
  std::vector<float> v(static_cast<size_t>(n));
  const float scale = 1.0f / static_cast<float>(n);
  for (float& x : v) x = rng.uniform(-1.0f, 1.0f) * scale;
  return Tensor::from_data(shape, std::move(v));
}

inline ctcaps::Tensor project(const ctcaps::Tensor& out, const ctcaps::Tensor& w) {
  return ctcaps::ops::sum(ctcaps::ops::mul(out, w));
}

}  // namespace detail

inline std::vector<Suite> make_suites(int per_op) {
  using namespace detail;
  using namespace ctcaps;
  std::vector<Suite> suites;

  auto add_suite = [&](const std::string& name, auto make_instance) {
    Suite s;
    s.op = name;
    for (int i = 0; i < per_op; ++i) {
      Rng rng(Rng::derive(0x5eedf00d + suites.size(), static_cast<uint64_t>(i)));
      s.instances.push_back(make_instance(rng));
    }
    suites.push_back(std::move(s));
  };

  auto rand_shape = [](Rng& rng) {
    return std::vector<int>{1 + rng.uniform_int(3), 1 + rng.uniform_int(4)};
  };

  add_suite("add", [&](Rng& rng) {
    auto shape = rand_shape(rng);
    Tensor w = projection(rng, shape);
    return Instance{{rand_tensor(rng, shape), rand_tensor(rng, shape)},
                    [w](const std::vector<Tensor>& in) {
                      return project(ops::add(in[0], in[1]), w);
                    }};
  });

  add_suite("sub", [&](Rng& rng) {
    auto shape = rand_shape(rng);
    Tensor w = projection(rng, shape);
    return Instance{{rand_tensor(rng, shape), rand_tensor(rng, shape)},
                    [w](const std::vector<Tensor>& in) {
                      return project(ops::sub(in[0], in[1]), w);
                    }};
  });

  add_suite("mul", [&](Rng& rng) {
    auto shape = rand_shape(rng);
    Tensor w = projection(rng, shape);
    return Instance{{rand_tensor(rng, shape), rand_tensor(rng, shape)},
                    [w](const std::vector<Tensor>& in) {
                      return project(ops::mul(in[0], in[1]), w);
                    }};
  });

  add_suite("add_scalar", [&](Rng& rng) {
    auto shape = rand_shape(rng);
    Tensor w = projection(rng, shape);
    const float s = rng.uniform(-2.0f, 2.0f);
    return Instance{{rand_tensor(rng, shape)},
                    [w, s](const std::vector<Tensor>& in) {
                      return project(ops::add_scalar(in[0], s), w);
                    }};
  });

  add_suite("mul_scalar", [&](Rng& rng) {
    auto shape = rand_shape(rng);
    Tensor w = projection(rng, shape);
    const float s = rng.uniform(-2.0f, 2.0f);
    return Instance{{rand_tensor(rng, shape)},
                    [w, s](const std::vector<Tensor>& in) {
                      return project(ops::mul_scalar(in[0], s), w);
                    }};
  });

  add_suite("relu", [&](Rng& rng) {
    auto shape = rand_shape(rng);
    Tensor w = projection(rng, shape);
    return Instance{{rand_tensor_off_zero(rng, shape)},
                    [w](const std::vector<Tensor>& in) {
                      return project(ops::relu(in[0]), w);
                    }};
  });

  add_suite("square", [&](Rng& rng) {
    auto shape = rand_shape(rng);
    Tensor w = projection(rng, shape);
    return Instance{{rand_tensor(rng, shape)},
                    [w](const std::vector<Tensor>& in) {
                      return project(ops::square(in[0]), w);
                    }};
  });

  add_suite("softmax", [&](Rng& rng) {
    std::vector<int> shape{1 + rng.uniform_int(3), 2 + rng.uniform_int(3), 1 + rng.uniform_int(2)};
    const int axis = rng.uniform_int(3);
    Tensor w = projection(rng, shape);
    return Instance{{rand_tensor(rng, shape, -2.0f, 2.0f)},
                    [w, axis](const std::vector<Tensor>& in) {
                      return project(ops::softmax(in[0], axis), w);
                    }};
  });

  add_suite("reshape", [&](Rng& rng) {
    std::vector<int> shape{2, 3};
    Tensor w = projection(rng, {3, 2});
    return Instance{{rand_tensor(rng, shape)},
                    [w](const std::vector<Tensor>& in) {
                      return project(ops::reshape(in[0], {3, 2}), w);
                    }};
  });

  add_suite("sum", [&](Rng& rng) {
    auto shape = rand_shape(rng);
    return Instance{{rand_tensor(rng, shape)}, [](const std::vector<Tensor>& in) {
                      return ops::mul_scalar(ops::sum(in[0]), 0.25f);
                    }};
  });

  add_suite("mean", [&](Rng& rng) {
    auto shape = rand_shape(rng);
    return Instance{{rand_tensor(rng, shape)}, [](const std::vector<Tensor>& in) {
                      return ops::mean(in[0]);
                    }};
  });

  add_suite("sum_axis", [&](Rng& rng) {
    std::vector<int> shape{2 + rng.uniform_int(2), 3, 2};
    const int axis = rng.uniform_int(3);
    std::vector<int> out_shape;
    for (int i = 0; i < 3; ++i)
      if (i != axis) out_shape.push_back(shape[static_cast<size_t>(i)]);
    Tensor w = projection(rng, out_shape);
    return Instance{{rand_tensor(rng, shape)},
                    [w, axis](const std::vector<Tensor>& in) {
                      return project(ops::sum_axis(in[0], axis), w);
                    }};
  });

  add_suite("pick", [&](Rng& rng) {
    std::vector<int> shape{3, 4};
    const int i0 = rng.uniform_int(3), i1 = rng.uniform_int(4);
    return Instance{{rand_tensor(rng, shape)},
                    [i0, i1](const std::vector<Tensor>& in) {
                      return ops::pick(in[0], {i0, i1});
                    }};
  });

  add_suite("matmul", [&](Rng& rng) {
    const int m = 1 + rng.uniform_int(3), k = 1 + rng.uniform_int(3), n = 1 + rng.uniform_int(3);
    const bool ta = rng.uniform_int(2) == 1, tb = rng.uniform_int(2) == 1;
    std::vector<int> sa = ta ? std::vector<int>{k, m} : std::vector<int>{m, k};
    std::vector<int> sb = tb ? std::vector<int>{n, k} : std::vector<int>{k, n};
    Tensor w = projection(rng, {m, n});
    return Instance{{rand_tensor(rng, sa), rand_tensor(rng, sb)},
                    [w, ta, tb](const std::vector<Tensor>& in) {
                      return project(ops::matmul(in[0], in[1], ta, tb), w);
                    }};
  });

  add_suite("dense", [&](Rng& rng) {
    const int b = 1 + rng.uniform_int(3), in_d = 1 + rng.uniform_int(4), out_d = 1 + rng.uniform_int(3);
    Tensor w = projection(rng, {b, out_d});
    return Instance{{rand_tensor(rng, {b, in_d}), rand_tensor(rng, {in_d, out_d}),
                     rand_tensor(rng, {out_d})},
                    [w](const std::vector<Tensor>& in) {
                      return project(ops::dense(in[0], in[1], in[2]), w);
                    }};
  });

  add_suite("conv2d", [&](Rng& rng) {
    const int b = 1 + rng.uniform_int(2), cin = 1 + rng.uniform_int(2), cout = 1 + rng.uniform_int(2);
    const int hw = 3 + rng.uniform_int(3);
    const int k = rng.uniform_int(2) == 0 ? 1 : 3;
    const int stride = 1 + rng.uniform_int(2);
    const int pad = (k == 3) ? rng.uniform_int(2) : 0;
    const int out = (hw + 2 * pad - k) / stride + 1;
    Tensor w = projection(rng, {b, cout, out, out});
    return Instance{{rand_tensor(rng, {b, cin, hw, hw}), rand_tensor(rng, {cout, cin, k, k}),
                     rand_tensor(rng, {cout})},
                    [w, stride, pad](const std::vector<Tensor>& in) {
                      return project(ops::conv2d(in[0], in[1], in[2], stride, pad), w);
                    }};
  });

  add_suite("maxpool2d", [&](Rng& rng) {
    const int b = 1 + rng.uniform_int(2), c = 1 + rng.uniform_int(2), hw = 4;
    const int stride = 1 + rng.uniform_int(2);
    const int out = (hw - 2) / stride + 1;
    // Strictly separated values: window winners stay winners under the FD
    // step, so the pooling pattern is locally constant.
    std::vector<int> order(static_cast<size_t>(b * c * hw * hw));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    std::vector<float> vals(order.size());
    for (size_t i = 0; i < order.size(); ++i)
      vals[i] = 0.05f * static_cast<float>(order[i]) + rng.uniform(-0.01f, 0.01f);
    Tensor x = Tensor::from_data({b, c, hw, hw}, std::move(vals));
    Tensor w = projection(rng, {b, c, out, out});
    return Instance{{x}, [w, stride](const std::vector<Tensor>& in) {
                      return project(ops::maxpool2d(in[0], 2, stride).out, w);
                    }};
  });

  add_suite("batchnorm", [&](Rng& rng) {
    const int b = 2, c = 1 + rng.uniform_int(2), hw = 2;
    Tensor x = rand_tensor(rng, {b, c, hw, hw}, -1.5f, 1.5f);
    // Guarantee per-channel spread so the batch variance stays O(1).
    for (int ch = 0; ch < c; ++ch) {
      x.set({0, ch, 0, 0}, -1.2f + 0.1f * static_cast<float>(ch));
      x.set({1, ch, 1, 1}, 1.3f - 0.1f * static_cast<float>(ch));
    }
    Tensor w = projection(rng, {b, c, hw, hw});
    return Instance{{x, rand_tensor_off_zero(rng, {c}, 0.3f), rand_tensor(rng, {c})},
                    [w](const std::vector<Tensor>& in) {
                      ops::BatchNormState st = ops::BatchNormState::create(in[1].dim(0));
                      return project(ops::batchnorm(in[0], in[1], in[2], st, true), w);
                    }};
  });

  add_suite("softmax_cross_entropy", [&](Rng& rng) {
    const int b = 1 + rng.uniform_int(3), k = 2 + rng.uniform_int(3);
    std::vector<int> labels(static_cast<size_t>(b));
    for (int& y : labels) y = rng.uniform_int(k);
    Tensor w = projection(rng, {b});
    return Instance{{rand_tensor(rng, {b, k}, -2.0f, 2.0f)},
                    [w, labels](const std::vector<Tensor>& in) {
                      return project(ops::softmax_cross_entropy(in[0], labels), w);
                    }};
  });

  add_suite("squash", [&](Rng& rng) {
    const int b = 1 + rng.uniform_int(2), j = 1 + rng.uniform_int(3), d = 2 + rng.uniform_int(3);
    Tensor w = projection(rng, {b, j, d});
    return Instance{{rand_tensor(rng, {b, j, d})},
                    [w](const std::vector<Tensor>& in) { return project(squash(in[0]), w); }};
  });

  add_suite("capsule_norms", [&](Rng& rng) {
    const int b = 1 + rng.uniform_int(2), j = 1 + rng.uniform_int(3), d = 2 + rng.uniform_int(3);
    // Norms bounded away from the |v| = 0 kink.
    Tensor v = rand_tensor_off_zero(rng, {b, j, d}, 0.3f);
    Tensor w = projection(rng, {b, j});
    return Instance{{v}, [w](const std::vector<Tensor>& in) {
                      return project(capsule_norms(in[0]), w);
                    }};
  });

  add_suite("capsule_predictions", [&](Rng& rng) {
    CapsuleLayerSpec spec;
    spec.types = 1 + rng.uniform_int(2);
    spec.in_caps = spec.types * (1 + rng.uniform_int(2));
    spec.in_dim = 2 + rng.uniform_int(2);
    spec.out_caps = 1 + rng.uniform_int(3);
    spec.out_dim = 2 + rng.uniform_int(2);
    const int b = 1 + rng.uniform_int(2);
    Tensor w = projection(rng, {b, spec.in_caps, spec.out_caps, spec.out_dim});
    return Instance{{rand_tensor(rng, {b, spec.in_caps, spec.in_dim}),
                     rand_tensor(rng, {spec.types, spec.out_caps, spec.in_dim, spec.out_dim})},
                    [w, spec](const std::vector<Tensor>& in) {
                      return project(capsule_predictions(in[0], in[1], spec), w);
                    }};
  });

  // One routing iteration keeps the coupling at its uniform initial value,
  // independent of the input, so the tape's frozen-coupling gradient is the
  // exact derivative. Later iterations deliberately treat the coupling as
  // constant, which finite differences would disagree with.
  add_suite("dynamic_routing", [&](Rng& rng) {
    const int b = 1 + rng.uniform_int(2), i = 1 + rng.uniform_int(3);
    const int j = 1 + rng.uniform_int(3), d = 2 + rng.uniform_int(2);
    Tensor w = projection(rng, {b, j, d});
    return Instance{{rand_tensor(rng, {b, i, j, d})},
                    [w](const std::vector<Tensor>& in) {
                      return project(dynamic_routing(in[0], 1), w);
                    }};
  });

  add_suite("capsule_layer", [&](Rng& rng) {
    CapsuleLayerSpec spec;
    spec.types = 1 + rng.uniform_int(2);
    spec.in_caps = spec.types * (1 + rng.uniform_int(2));
    spec.in_dim = 2 + rng.uniform_int(2);
    spec.out_caps = 1 + rng.uniform_int(2);
    spec.out_dim = 2 + rng.uniform_int(2);
    spec.routing_iters = 1;
    const int b = 1 + rng.uniform_int(2);
    Tensor w = projection(rng, {b, spec.out_caps, spec.out_dim});
    return Instance{{rand_tensor(rng, {b, spec.in_caps, spec.in_dim}),
                     rand_tensor(rng, {spec.types, spec.out_caps, spec.in_dim, spec.out_dim})},
                    [w, spec](const std::vector<Tensor>& in) {
                      return project(capsule_layer(in[0], in[1], spec), w);
                    }};
  });

  add_suite("margin_loss", [&](Rng& rng) {
    const int b = 1 + rng.uniform_int(3), k = 2 + rng.uniform_int(2);
    // Stay away from the hinge kinks at m_neg = 0.1 and m_pos = 0.9.
    Tensor norms = rand_tensor(rng, {b, k}, 0.15f, 0.85f);
    std::vector<int> labels(static_cast<size_t>(b));
    for (int& y : labels) y = rng.uniform_int(k);
    Tensor w = projection(rng, {b});
    return Instance{{norms}, [w, labels](const std::vector<Tensor>& in) {
                      return project(margin_loss(in[0], labels), w);
                    }};
  });

  add_suite("weighted_loss", [&](Rng& rng) {
    const int b = 2 + rng.uniform_int(4);
    std::vector<int> labels(static_cast<size_t>(b));
    labels[0] = 0;
    labels[1] = 1;  // both classes always present
    for (size_t i = 2; i < labels.size(); ++i) labels[i] = rng.uniform_int(2);
    ClassWeights cw;
    cw.n_pos = 7 + rng.uniform_int(50);
    cw.n_neg = 13 + rng.uniform_int(50);
    return Instance{{rand_tensor(rng, {b}, 0.0f, 2.0f)},
                    [labels, cw](const std::vector<Tensor>& in) {
                      return weighted_loss(in[0], labels, cw);
                    }};
  });

  add_suite("caps_from_conv", [&](Rng& rng) {
    const int b = 1 + rng.uniform_int(2), types = 1 + rng.uniform_int(2);
    const int d = 2 + rng.uniform_int(2), hw = 1 + rng.uniform_int(2);
    Tensor w = projection(rng, {b, types * hw * hw, d});
    return Instance{{rand_tensor(rng, {b, types * d, hw, hw})},
                    [w, d](const std::vector<Tensor>& in) {
                      return project(caps_from_conv(in[0], d), w);
                    }};
  });

  return suites;
}

}  // namespace fdsuites
