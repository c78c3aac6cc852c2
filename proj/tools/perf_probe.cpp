// Scratch throughput probe for the conv kernels; not part of the deliverable API.

#include <chrono>
#include <cstdio>
#include <random>

#include "spirdet/ops.hpp"

using namespace spirdet;

template <class F>
double time_ms(F&& f, int iters) {
  auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < iters; ++i) f();
  auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / iters;
}

int main() {
  std::mt19937_64 rng(42);
  auto randt = [&](int n, int c, int h, int w) {
    Tensor<float> t(n, c, h, w);
    std::uniform_real_distribution<float> d(-1, 1);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data[i] = d(rng);
    return t;
  };

  struct Case {
    const char* name;
    int n, cin, cout, h, w, k, stride, pad, groups;
  };
  const Case cases[] = {
      {"full3x3 16->32 s1 64x64", 8, 16, 32, 64, 64, 3, 1, 1, 1},
      {"full3x3 32->64 s2 32x32in", 8, 32, 64, 32, 32, 3, 2, 1, 1},
      {"pw1x1 32->32 64x64", 8, 32, 32, 64, 64, 1, 1, 0, 1},
      {"dw3x3 32 64x64", 8, 32, 32, 64, 64, 3, 1, 1, 32},
      {"full3x3 96->128 16x16", 8, 96, 128, 16, 16, 3, 1, 1, 1},
      {"full3x3 32->32 512x512", 1, 32, 32, 512, 512, 3, 1, 1, 1},
  };
  for (const auto& c : cases) {
    auto x = randt(c.n, c.cin, c.h, c.w);
    auto w = randt(c.cout, c.cin / c.groups, c.k, c.k);
    VecX<float> bias = VecX<float>::Zero(c.cout);
    ConvSpec sp{c.k, c.k, c.stride, c.pad, c.groups};
    auto y = conv2d(x, w, bias, sp);  // warmup + shape
    const double macs = double(c.n) * c.cout * (double(c.cin) / c.groups) * c.k * c.k * y.h() * y.w();
    int iters = std::max(1, int(2e9 / macs / 4));
    double fwd = time_ms([&] { y = conv2d(x, w, bias, sp); }, iters);
    double gi = time_ms([&] { auto dx = conv2d_grad_input(y, w, sp, x.shape); }, iters);
    double gw = time_ms([&] { auto dw = conv2d_grad_weights(x, y, sp, w.shape); }, iters);
    std::printf("%-28s fwd %7.3f ms (%6.2f GMAC/s)  dX %7.3f ms (%6.2f)  dW %7.3f ms (%6.2f)\n",
                c.name, fwd, macs / fwd / 1e6, gi, macs / gi / 1e6, gw, macs / gw / 1e6);
  }
  return 0;
}
