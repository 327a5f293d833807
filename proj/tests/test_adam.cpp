#include "doctest.h"

#include <cmath>
#include <limits>
#include <vector>

#include "ctcaps/adam.hpp"
#include "ctcaps/errors.hpp"
#include "ctcaps/tensor.hpp"

using namespace ctcaps;

namespace {

Tensor param(std::vector<float> vals) {
  const int n = static_cast<int>(vals.size());
  return Tensor::from_data({n}, std::move(vals), true);
}

void set_grad(Tensor& p, const std::vector<float>& g) {
  p.grad_vec() = g;
}

}  // namespace

TEST_CASE("first Adam step with power-of-two gradient matches the closed form exactly") {
  // Bias correction cancels the moment decay factors on step one, so the
  // update is -lr * g / (|g| + eps). Powers of two keep every intermediate
  // product exact in float, making the comparison bitwise.
  const float lr = 0.0625f;
  for (float g : {0.5f, -2.0f, 1.0f, 0.03125f, -8.0f}) {
    Tensor p = param({1.0f, -3.0f});
    set_grad(p, {g, g});
    Adam opt({p}, lr);
    opt.step();
    const double gd = static_cast<double>(g);
    const float delta =
        static_cast<float>(static_cast<double>(lr) * gd / (std::abs(gd) + static_cast<double>(1e-8f)));
    CHECK(p.at({0}) == 1.0f - delta);
    CHECK(p.at({1}) == -3.0f - delta);
    CHECK(opt.steps() == 1);
  }
}

TEST_CASE("first Adam step approximates -lr * sign(g) for generic gradients") {
  Tensor p = param({0.0f, 0.0f, 0.0f});
  set_grad(p, {0.37f, -1.234f, 5.5f});
  Adam opt({p}, 0.01f);
  opt.step();
  CHECK(p.at({0}) == doctest::Approx(-0.01).epsilon(1e-4));
  CHECK(p.at({1}) == doctest::Approx(0.01).epsilon(1e-4));
  CHECK(p.at({2}) == doctest::Approx(-0.01).epsilon(1e-4));
}

TEST_CASE("constant gradient keeps stepping at roughly -lr per step") {
  Tensor p = param({0.0f});
  Adam opt({p}, 0.1f);
  for (int t = 0; t < 2; ++t) {
    set_grad(p, {2.0f});
    opt.step();
  }
  CHECK(opt.steps() == 2);
  // Bias-corrected moments stay at g and g^2 for a constant gradient, so
  // both steps move by lr.
  CHECK(p.at({0}) == doctest::Approx(-0.2).epsilon(1e-4));
}

TEST_CASE("non-finite gradient refuses the step and mutates nothing") {
  Tensor a = param({1.0f, 2.0f});
  Tensor b = param({-1.0f});
  Adam opt({a, b}, 0.1f);
  set_grad(a, {0.5f, 0.5f});
  set_grad(b, {0.25f});
  opt.step();
  const float a0 = a.at({0}), a1 = a.at({1}), b0 = b.at({0});
  const auto m_before = opt.state()[0].m;
  const auto v_before = opt.state()[0].v;

  set_grad(a, {1.0f, std::numeric_limits<float>::quiet_NaN()});
  set_grad(b, {1.0f});
  CHECK_THROWS_AS(opt.step(), OptimizerError);
  CHECK(a.at({0}) == a0);
  CHECK(a.at({1}) == a1);
  CHECK(b.at({0}) == b0);
  CHECK(opt.steps() == 1);
  CHECK(opt.state()[0].m == m_before);
  CHECK(opt.state()[0].v == v_before);

  set_grad(b, {std::numeric_limits<float>::infinity()});
  set_grad(a, {0.0f, 0.0f});
  CHECK_THROWS_AS(opt.step(), OptimizerError);
  CHECK(opt.steps() == 1);
}

TEST_CASE("zero_grad clears gradients and a missing buffer counts as zero") {
  Tensor p = param({4.0f});
  Adam opt({p}, 0.5f);
  set_grad(p, {3.0f});
  opt.zero_grad();
  CHECK(p.grad() == std::vector<float>{0.0f});
  opt.step();  // zero gradient: moments stay zero, update is exactly zero
  CHECK(p.at({0}) == 4.0f);

  Tensor q = param({7.0f});
  Adam opt2({q}, 0.5f);
  opt2.step();  // no grad buffer was ever created
  CHECK(q.at({0}) == 7.0f);
  CHECK(opt2.steps() == 1);
}

TEST_CASE("constructor validates parameters and learning rate") {
  CHECK_THROWS_AS(Adam({}, 0.1f), UsageError);
  Tensor p = param({1.0f});
  CHECK_THROWS_AS(Adam({p}, 0.0f), UsageError);
  CHECK_THROWS_AS(Adam({p}, -0.5f), UsageError);
  Tensor frozen = Tensor::from_data({1}, {1.0f}, false);
  CHECK_THROWS_AS(Adam({frozen}, 0.1f), UsageError);
}
