#include "doctest.h"

#include <cmath>
#include <vector>

#include "ctcaps/capsnet.hpp"
#include "ctcaps/errors.hpp"
#include "ctcaps/ops.hpp"
#include "ctcaps/rng.hpp"
#include "ctcaps/tensor.hpp"
#include "test_support.hpp"

using namespace ctcaps;

TEST_CASE("squash keeps direction and maps length to |s|^2 / (1 + |s|^2)") {
  Rng rng(101);
  const int dim = 8, rows = 1000;
  std::vector<float> data(static_cast<size_t>(rows) * dim);
  for (float& x : data) x = rng.uniform(-3.0f, 3.0f);
  Tensor s = Tensor::from_data({rows, dim}, data);
  Tensor v = squash(s);

  for (int r = 0; r < rows; ++r) {
    double s_nsq = 0.0, v_nsq = 0.0, dot = 0.0;
    for (int d = 0; d < dim; ++d) {
      const double sd = s.at({r, d}), vd = v.at({r, d});
      s_nsq += sd * sd;
      v_nsq += vd * vd;
      dot += sd * vd;
    }
    const double s_norm = std::sqrt(s_nsq), v_norm = std::sqrt(v_nsq);
    CHECK(v_norm < 1.0);
    // Same direction: the cosine between s and v is 1.
    CHECK(dot / (s_norm * v_norm) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(testsup::near_rel(v_norm, s_nsq / (1.0 + s_nsq), 1e-6));
  }
}

TEST_CASE("squash maps the zero vector to zero and rejects rank 1") {
  Tensor z = Tensor::zeros({2, 4});
  Tensor v = squash(z);
  for (int j = 0; j < 2; ++j)
    for (int d = 0; d < 4; ++d) CHECK(v.at({j, d}) == 0.0f);
  CHECK_THROWS_AS(squash(Tensor::zeros({4})), ShapeError);
}

TEST_CASE("capsule_norms matches a double-precision oracle") {
  Rng rng(102);
  const int b = 3, j = 5, d = 7;
  std::vector<float> data(static_cast<size_t>(b) * j * d);
  for (float& x : data) x = rng.uniform(-2.0f, 2.0f);
  Tensor v = Tensor::from_data({b, j, d}, data);
  Tensor n = capsule_norms(v);
  REQUIRE(n.shape() == std::vector<int>{b, j});
  for (int bi = 0; bi < b; ++bi)
    for (int ji = 0; ji < j; ++ji) {
      double nsq = 0.0;
      for (int di = 0; di < d; ++di) {
        const double x = v.at({bi, ji, di});
        nsq += x * x;
      }
      CHECK(testsup::near_rel(n.at({bi, ji}), std::sqrt(nsq), 1e-6));
    }
  CHECK_THROWS_AS(capsule_norms(Tensor::zeros({3, 4})), ShapeError);
}

TEST_CASE("capsule_predictions applies the per-type transform") {
  Rng rng(103);
  CapsuleLayerSpec spec;
  spec.types = 2;
  spec.in_caps = 4;  // two consecutive capsules per type
  spec.in_dim = 3;
  spec.out_caps = 2;
  spec.out_dim = 5;
  const int b = 2;
  std::vector<float> ud(static_cast<size_t>(b) * spec.in_caps * spec.in_dim);
  std::vector<float> wd(static_cast<size_t>(spec.types) * spec.out_caps * spec.in_dim * spec.out_dim);
  for (float& x : ud) x = rng.uniform(-1.0f, 1.0f);
  for (float& x : wd) x = rng.uniform(-1.0f, 1.0f);
  Tensor u = Tensor::from_data({b, spec.in_caps, spec.in_dim}, ud);
  Tensor w = Tensor::from_data({spec.types, spec.out_caps, spec.in_dim, spec.out_dim}, wd);
  Tensor uhat = capsule_predictions(u, w, spec);
  REQUIRE(uhat.shape() == std::vector<int>{b, spec.in_caps, spec.out_caps, spec.out_dim});

  const int group = spec.in_caps / spec.types;
  for (int bi = 0; bi < b; ++bi)
    for (int i = 0; i < spec.in_caps; ++i) {
      const int t = i / group;
      for (int j = 0; j < spec.out_caps; ++j)
        for (int od = 0; od < spec.out_dim; ++od) {
          double acc = 0.0;
          for (int id = 0; id < spec.in_dim; ++id)
            acc += static_cast<double>(u.at({bi, i, id})) * w.at({t, j, id, od});
          CHECK(testsup::near_rel(uhat.at({bi, i, j, od}), acc, 1e-5));
        }
    }

  // Capsules of the same type share the transform: equal inputs give equal
  // predictions within a type block.
  for (int id = 0; id < spec.in_dim; ++id) {
    u.set({0, 0, id}, u.at({0, 1, id}));
  }
  Tensor uhat2 = capsule_predictions(u, w, spec);
  for (int j = 0; j < spec.out_caps; ++j)
    for (int od = 0; od < spec.out_dim; ++od)
      CHECK(uhat2.at({0, 0, j, od}) == uhat2.at({0, 1, j, od}));

  CHECK_THROWS_AS(capsule_predictions(Tensor::zeros({2, 3}), w, spec), ShapeError);
  CHECK_THROWS_AS(capsule_predictions(Tensor::zeros({b, 5, spec.in_dim}), w, spec), ShapeError);
}

TEST_CASE("routing coupling sums to one for every capsule at every iteration") {
  Rng rng(104);
  const int b = 2, i = 6, j = 3, d = 4;
  std::vector<float> ud(static_cast<size_t>(b) * i * j * d);
  for (float& x : ud) x = rng.uniform(-1.5f, 1.5f);
  Tensor uhat = Tensor::from_data({b, i, j, d}, ud);

  for (int iters = 1; iters <= 3; ++iters) {
    RoutingDiagnostics diag;
    dynamic_routing(uhat, iters, &diag);
    REQUIRE(diag.coupling.size() == static_cast<size_t>(iters));
    for (const auto& c : diag.coupling) {
      REQUIRE(c.size() == static_cast<size_t>(b) * i * j);
      for (int row = 0; row < b * i; ++row) {
        double sum = 0.0;
        for (int jj = 0; jj < j; ++jj) sum += c[static_cast<size_t>(row * j + jj)];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
      }
    }
    // Zero logits make the first round exactly uniform.
    const float uniform = static_cast<float>(1.0 / j);
    for (float c : diag.coupling.front()) CHECK(c == uniform);
  }
}

TEST_CASE("routing to a single output capsule is exactly squash of the prediction sum") {
  Rng rng(105);
  const int b = 2, i = 5, d = 6;
  std::vector<float> ud(static_cast<size_t>(b) * i * 1 * d);
  for (float& x : ud) x = rng.uniform(-1.0f, 1.0f);
  Tensor uhat = Tensor::from_data({b, i, 1, d}, ud);

  // With one output capsule the coupling softmax is exactly 1, so the
  // weighted sum is a plain in-order sum.
  std::vector<float> s(static_cast<size_t>(b) * d, 0.0f);
  for (int bi = 0; bi < b; ++bi)
    for (int dd = 0; dd < d; ++dd) {
      float acc = 0.0f;
      for (int ii = 0; ii < i; ++ii)
        acc += 1.0f * uhat.at({bi, ii, 0, dd});
      s[static_cast<size_t>(bi * d + dd)] = acc;
    }
  Tensor expected = squash(Tensor::from_data({b, 1, d}, s));

  for (int iters = 1; iters <= 3; ++iters) {
    Tensor v = dynamic_routing(uhat, iters);
    REQUIRE(v.shape() == std::vector<int>{b, 1, d});
    for (int bi = 0; bi < b; ++bi)
      for (int dd = 0; dd < d; ++dd) CHECK(v.at({bi, 0, dd}) == expected.at({bi, 0, dd}));
  }
}

TEST_CASE("identical predictions across output capsules route symmetrically") {
  Rng rng(106);
  const int b = 2, i = 4, j = 2, d = 5;
  std::vector<float> row(static_cast<size_t>(b) * i * d);
  for (float& x : row) x = rng.uniform(-1.0f, 1.0f);
  std::vector<float> ud(static_cast<size_t>(b) * i * j * d);
  for (int bi = 0; bi < b; ++bi)
    for (int ii = 0; ii < i; ++ii)
      for (int jj = 0; jj < j; ++jj)
        for (int dd = 0; dd < d; ++dd)
          ud[static_cast<size_t>(((bi * i + ii) * j + jj) * d + dd)] =
              row[static_cast<size_t>((bi * i + ii) * d + dd)];
  Tensor uhat = Tensor::from_data({b, i, j, d}, ud);

  // j = 2 keeps the uniform coupling at exactly 0.5, and agreement updates
  // are identical across j, so every iteration count gives the same output:
  // squash of the half-sum, on both output capsules.
  std::vector<float> s(static_cast<size_t>(b) * d);
  for (int bi = 0; bi < b; ++bi)
    for (int dd = 0; dd < d; ++dd) {
      float acc = 0.0f;
      for (int ii = 0; ii < i; ++ii)
        acc += 0.5f * row[static_cast<size_t>((bi * i + ii) * d + dd)];
      s[static_cast<size_t>(bi * d + dd)] = acc;
    }
  Tensor expected = squash(Tensor::from_data({b, 1, d}, s));

  for (int iters = 1; iters <= 3; ++iters) {
    Tensor v = dynamic_routing(uhat, iters);
    for (int bi = 0; bi < b; ++bi)
      for (int jj = 0; jj < j; ++jj)
        for (int dd = 0; dd < d; ++dd)
          CHECK(v.at({bi, jj, dd}) == expected.at({bi, 0, dd}));
  }
}

TEST_CASE("dynamic_routing validates its arguments") {
  CHECK_THROWS_AS(dynamic_routing(Tensor::zeros({2, 3, 4}), 3), ShapeError);
  CHECK_THROWS_AS(dynamic_routing(Tensor::zeros({1, 2, 3, 4}), 0), UsageError);
}

TEST_CASE("loss_class_weights matches the global class shares") {
  ClassWeights w;
  w.n_pos = 4993;
  w.n_neg = 18416;
  const auto [w_pos, w_neg] = loss_class_weights(w);
  CHECK(std::abs(w_pos - 18416.0 / 23409.0) < 1e-9);
  CHECK(std::abs(w_neg - 4993.0 / 23409.0) < 1e-9);
  CHECK(std::abs(w_pos + w_neg - 1.0) < 1e-12);

  ClassWeights even;
  even.n_pos = 250;
  even.n_neg = 250;
  const auto [ep, en] = loss_class_weights(even);
  CHECK(ep == 0.5);
  CHECK(en == 0.5);

  Rng rng(107);
  for (int t = 0; t < 50; ++t) {
    ClassWeights r;
    r.n_pos = 1 + rng.uniform_int(100000);
    r.n_neg = 1 + rng.uniform_int(100000);
    const auto [rp, rn] = loss_class_weights(r);
    CHECK(std::abs(rp + rn - 1.0) < 1e-12);
    CHECK(rp > 0.0);
    CHECK(rn > 0.0);
  }

  CHECK_THROWS_AS(loss_class_weights(ClassWeights{}), UsageError);
}

TEST_CASE("count_classes tallies and validates labels") {
  const ClassWeights w = count_classes({1, 0, 1, 1, 0});
  CHECK(w.n_pos == 3);
  CHECK(w.n_neg == 2);
  CHECK_THROWS_AS(count_classes({0, 2}), UsageError);
  CHECK_THROWS_AS(count_classes({-1}), UsageError);
}

TEST_CASE("weighted_loss scales each class's batch mean by the opposite share") {
  Tensor per = Tensor::from_data({5}, {1.0f, 2.0f, 3.0f, 4.0f, 5.0f});
  const std::vector<int> labels{1, 0, 1, 0, 0};
  ClassWeights w;
  w.n_pos = 30;
  w.n_neg = 70;
  Tensor loss = weighted_loss(per, labels, w);
  // positives {1, 3} mean 2, negatives {2, 4, 5} mean 11/3; weights 0.7 / 0.3.
  const double expected = 0.7 * 2.0 + 0.3 * (11.0 / 3.0);
  CHECK(testsup::near_rel(loss.item(), expected, 1e-6));

  // Single-class batch: the absent class contributes nothing.
  Tensor pos_only = Tensor::from_data({2}, {1.0f, 3.0f});
  Tensor l2 = weighted_loss(pos_only, {1, 1}, w);
  CHECK(testsup::near_rel(l2.item(), 0.7 * 2.0, 1e-6));

  CHECK_THROWS_AS(weighted_loss(Tensor::zeros({2, 2}), labels, w), ShapeError);
  CHECK_THROWS_AS(weighted_loss(per, {1, 0}, w), UsageError);
  CHECK_THROWS_AS(weighted_loss(per, {1, 0, 1, 0, 2}, w), UsageError);
  CHECK_THROWS_AS(weighted_loss(per, labels, ClassWeights{}), UsageError);
}

TEST_CASE("margin_loss matches the hand-computed hinge terms") {
  Tensor norms = Tensor::from_data({2, 2}, {0.8f, 0.3f, 0.05f, 0.95f});
  Tensor loss = margin_loss(norms, {0, 1});
  REQUIRE(loss.shape() == std::vector<int>{2});
  // Example 0, label 0: (0.9 - 0.8)^2 + 0.5 * (0.3 - 0.1)^2 = 0.01 + 0.02.
  CHECK(loss.at({0}) == doctest::Approx(0.03).epsilon(1e-5));
  // Example 1, label 1: target 0.95 above margin, other 0.05 below margin.
  CHECK(loss.at({1}) == doctest::Approx(0.0));

  // Custom margins and lambda.
  Tensor n2 = Tensor::from_data({1, 2}, {0.5f, 0.5f});
  Tensor l3 = margin_loss(n2, {0}, 0.7f, 0.2f, 0.25f);
  CHECK(l3.at({0}) == doctest::Approx(0.2 * 0.2 + 0.25 * 0.3 * 0.3).epsilon(1e-5));

  CHECK_THROWS_AS(margin_loss(Tensor::zeros({4}), {0}), ShapeError);
  CHECK_THROWS_AS(margin_loss(norms, {0}), UsageError);
  CHECK_THROWS_AS(margin_loss(norms, {0, 2}), UsageError);
}

TEST_CASE("caps_from_conv is the documented channel-to-capsule permutation") {
  const int b = 2, types = 2, caps_dim = 3, h = 2, w = 2;
  const int ch = types * caps_dim;
  std::vector<float> data(static_cast<size_t>(b) * ch * h * w);
  for (size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(i) * 0.125f;
  Tensor x = Tensor::from_data({b, ch, h, w}, data);
  Tensor caps = caps_from_conv(x, caps_dim);
  REQUIRE(caps.shape() == std::vector<int>{b, types * h * w, caps_dim});

  for (int bi = 0; bi < b; ++bi)
    for (int t = 0; t < types; ++t)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
          for (int d = 0; d < caps_dim; ++d)
            CHECK(caps.at({bi, t * h * w + y * w + xx, d}) ==
                  x.at({bi, t * caps_dim + d, y, xx}));

  CHECK_THROWS_AS(caps_from_conv(Tensor::zeros({2, 3, 4}), 2), ShapeError);
  CHECK_THROWS_AS(caps_from_conv(Tensor::zeros({1, 5, 2, 2}), 2), ShapeError);
}

TEST_CASE("capsule_layer composes predictions and routing") {
  Rng rng(108);
  CapsuleLayerSpec spec;
  spec.types = 2;
  spec.in_caps = 4;
  spec.in_dim = 3;
  spec.out_caps = 2;
  spec.out_dim = 4;
  spec.routing_iters = 3;
  std::vector<float> ud(static_cast<size_t>(2) * spec.in_caps * spec.in_dim);
  std::vector<float> wd(static_cast<size_t>(spec.types) * spec.out_caps * spec.in_dim * spec.out_dim);
  for (float& x : ud) x = rng.uniform(-1.0f, 1.0f);
  for (float& x : wd) x = rng.uniform(-1.0f, 1.0f);
  Tensor u = Tensor::from_data({2, spec.in_caps, spec.in_dim}, ud);
  Tensor w = Tensor::from_data({spec.types, spec.out_caps, spec.in_dim, spec.out_dim}, wd);

  RoutingDiagnostics diag;
  Tensor v = capsule_layer(u, w, spec, &diag);
  REQUIRE(v.shape() == std::vector<int>{2, spec.out_caps, spec.out_dim});
  CHECK(diag.coupling.size() == 3);

  Tensor direct = dynamic_routing(capsule_predictions(u, w, spec), spec.routing_iters);
  for (int bi = 0; bi < 2; ++bi)
    for (int j = 0; j < spec.out_caps; ++j)
      for (int d = 0; d < spec.out_dim; ++d)
        CHECK(v.at({bi, j, d}) == direct.at({bi, j, d}));
}
