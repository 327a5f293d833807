#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <vector>

#include "ctcaps/kernels.hpp"
#include "ctcaps/rng.hpp"

// Times each kernel in its serial reference form against the OpenMP form
// and reports the worst absolute difference, which must be exactly zero:
// both forms reduce in the same element order.

using namespace ctcaps;

namespace {

std::vector<float> random_vec(size_t n, Rng& rng) {
  std::vector<float> v(n);
  for (float& x : v) x = rng.uniform(-1.0f, 1.0f);
  return v;
}

double time_ms(const std::function<void()>& fn, int reps) {
  fn();  // warm up
  const auto start = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  const auto stop = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(stop - start).count() / reps;
}

float max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
  float worst = 0.0f;
  for (size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::fabs(a[i] - b[i]));
  return worst;
}

void report(const char* name, double serial_ms, double parallel_ms, float diff) {
  std::printf("%-24s serial %8.3f ms   parallel %8.3f ms   speedup %5.2fx   max|diff| %g\n",
              name, serial_ms, parallel_ms, serial_ms / parallel_ms, diff);
}

}  // namespace

int main() {
  Rng rng(7);
  const int reps = 5;

  {
    const int m = 256, k = 512, n = 256;
    auto a = random_vec(static_cast<size_t>(m) * k, rng);
    auto b = random_vec(static_cast<size_t>(k) * n, rng);
    std::vector<float> cs(static_cast<size_t>(m) * n), cp(cs.size());
    const double ts = time_ms([&] { kernels::serial::matmul(a.data(), b.data(), cs.data(), m, k, n, false, false); }, reps);
    const double tp = time_ms([&] { kernels::parallel::matmul(a.data(), b.data(), cp.data(), m, k, n, false, false); }, reps);
    report("matmul 256x512x256", ts, tp, max_abs_diff(cs, cp));
  }

  {
    kernels::Conv2dDims d{8, 32, 64, 64, 64, 3, 2, 1};
    auto in = random_vec(static_cast<size_t>(d.batch) * d.cin * d.h * d.w, rng);
    auto w = random_vec(static_cast<size_t>(d.cout) * d.cin * d.ksize * d.ksize, rng);
    auto bias = random_vec(static_cast<size_t>(d.cout), rng);
    const size_t out_n =
        static_cast<size_t>(d.batch) * d.cout * d.out_h() * d.out_w();
    std::vector<float> outs(out_n), outp(out_n);
    const double ts = time_ms([&] { kernels::serial::conv2d_forward(in.data(), w.data(), bias.data(), outs.data(), d); }, reps);
    const double tp = time_ms([&] { kernels::parallel::conv2d_forward(in.data(), w.data(), bias.data(), outp.data(), d); }, reps);
    report("conv2d fwd 8x32x64x64", ts, tp, max_abs_diff(outs, outp));

    auto dout = random_vec(out_n, rng);
    std::vector<float> dins(in.size()), dinp(in.size());
    const double ts2 = time_ms([&] { kernels::serial::conv2d_backward_input(w.data(), dout.data(), dins.data(), d); }, reps);
    const double tp2 = time_ms([&] { kernels::parallel::conv2d_backward_input(w.data(), dout.data(), dinp.data(), d); }, reps);
    report("conv2d bwd input", ts2, tp2, max_abs_diff(dins, dinp));

    std::vector<float> dws(w.size()), dwp(w.size()), dbs(bias.size()), dbp(bias.size());
    const double ts3 = time_ms([&] { kernels::serial::conv2d_backward_filter(in.data(), dout.data(), dws.data(), dbs.data(), d); }, reps);
    const double tp3 = time_ms([&] { kernels::parallel::conv2d_backward_filter(in.data(), dout.data(), dwp.data(), dbp.data(), d); }, reps);
    report("conv2d bwd filter", ts3, tp3, std::max(max_abs_diff(dws, dwp), max_abs_diff(dbs, dbp)));
  }

  {
    kernels::CapsDims d{16, 128, 32, 8, 16, 8};
    auto u = random_vec(static_cast<size_t>(d.batch) * d.in_caps * d.in_dim, rng);
    auto w = random_vec(static_cast<size_t>(d.types) * d.out_caps * d.in_dim * d.out_dim, rng);
    const size_t uhat_n =
        static_cast<size_t>(d.batch) * d.in_caps * d.out_caps * d.out_dim;
    std::vector<float> us(uhat_n), up(uhat_n);
    const double ts = time_ms([&] { kernels::serial::caps_transform_forward(u.data(), w.data(), us.data(), d); }, reps);
    const double tp = time_ms([&] { kernels::parallel::caps_transform_forward(u.data(), w.data(), up.data(), d); }, reps);
    report("caps transform fwd", ts, tp, max_abs_diff(us, up));

    auto c = random_vec(static_cast<size_t>(d.batch) * d.in_caps * d.out_caps, rng);
    std::vector<float> ss(static_cast<size_t>(d.batch) * d.out_caps * d.out_dim), sp(ss.size());
    const double ts2 = time_ms([&] { kernels::serial::routing_weighted_sum(us.data(), c.data(), ss.data(), d.batch, d.in_caps, d.out_caps, d.out_dim); }, reps);
    const double tp2 = time_ms([&] { kernels::parallel::routing_weighted_sum(us.data(), c.data(), sp.data(), d.batch, d.in_caps, d.out_caps, d.out_dim); }, reps);
    report("routing weighted sum", ts2, tp2, max_abs_diff(ss, sp));
  }

  {
    const int b = 16, c = 64, h = 64, w = 64, window = 2, stride = 2;
    auto in = random_vec(static_cast<size_t>(b) * c * h * w, rng);
    const int oh = (h - window) / stride + 1, ow = (w - window) / stride + 1;
    std::vector<float> outs(static_cast<size_t>(b) * c * oh * ow), outp(outs.size());
    std::vector<int32_t> args(outs.size()), argp(outs.size());
    const double ts = time_ms([&] { kernels::serial::maxpool_forward(in.data(), outs.data(), args.data(), b, c, h, w, window, stride); }, reps);
    const double tp = time_ms([&] { kernels::parallel::maxpool_forward(in.data(), outp.data(), argp.data(), b, c, h, w, window, stride); }, reps);
    report("maxpool fwd 16x64x64x64", ts, tp, max_abs_diff(outs, outp));
  }

  return 0;
}
