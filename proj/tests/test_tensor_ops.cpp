#include <doctest.h>

#include "spirdet/ops.hpp"
#include "test_util.hpp"

using namespace spirdet;
using spirdet::testing::Rng;

TEST_SUITE_BEGIN("tensor_ops");

TEST_CASE("tensor invariants") {
  Tensor<float> t(2, 3, 4, 5);
  CHECK(t.size() == 2 * 3 * 4 * 5);
  CHECK_THROWS_AS(Tensor<float>(0, 1, 1, 1), InvalidInput);
  CHECK_THROWS_AS(Tensor<float>(1, 1, -2, 1), InvalidInput);
}

TEST_CASE("conv2d: depthwise identity kernel is a no-op") {
  Rng rng(1);
  auto x = testing::random_tensor<float>(1, 1, 3, 3, rng);
  Tensor<float> w(1, 1, 3, 3);
  w.at(0, 0, 1, 1) = 1.0f;
  auto y = conv2d(x, w, VecX<float>(), conv_spec(3, 1, 1, /*groups=*/1));
  CHECK(max_abs_diff(x, y) == 0.0f);
}

TEST_CASE("conv2d: 1x1 kernel scales") {
  auto x = Tensor<float>::full(1, 1, 2, 2, 1.0f);
  Tensor<float> w(1, 1, 1, 1);
  w.data[0] = 2.0f;
  VecX<float> bias = VecX<float>::Zero(1);
  auto y = conv2d(x, w, bias, conv_spec(1));
  CHECK(y.shape == std::array<int, 4>{1, 1, 2, 2});
  for (Eigen::Index i = 0; i < y.size(); ++i) CHECK(y.data[i] == doctest::Approx(2.0f));
}

TEST_CASE("conv2d: random depthwise matches sliding-window oracle") {
  Rng rng(7);
  auto x = testing::random_tensor<float>(1, 4, 8, 8, rng);
  auto w = testing::random_tensor<float>(4, 1, 3, 3, rng);
  VecX<float> bias(4);
  testing::fill_uniform_vec(bias, rng, -0.5f, 0.5f);
  const auto sp = conv_spec(3, 1, 1, 4);
  auto y = conv2d(x, w, bias, sp);
  auto ref = testing::conv2d_oracle(x, w, bias, sp);
  CHECK(max_abs_diff(y, ref) < 1e-6f);
}

TEST_CASE("conv2d: strided and grouped cases match oracle") {
  Rng rng(11);
  struct Case {
    int cin, cout, groups, k, stride, pad, h, w;
  };
  const Case cases[] = {
      {4, 6, 1, 3, 2, 1, 9, 9},   {4, 6, 2, 3, 1, 1, 8, 6},  {3, 5, 1, 1, 1, 0, 5, 7},
      {6, 6, 6, 3, 2, 1, 8, 8},   {2, 4, 1, 3, 1, 0, 7, 7},  {4, 4, 1, 3, 2, 1, 8, 8},
      {3, 3, 3, 3, 1, 1, 11, 13}, {2, 8, 1, 1, 2, 0, 6, 6},  {2, 3, 1, 5, 1, 2, 9, 9},
      {2, 3, 1, 3, 3, 1, 9, 9},   {1, 2, 1, 1, 2, 0, 7, 7},
  };
  for (const auto& c : cases) {
    auto x = testing::random_tensor<float>(2, c.cin, c.h, c.w, rng);
    auto w = testing::random_tensor<float>(c.cout, c.cin / c.groups, c.k, c.k, rng);
    VecX<float> bias(c.cout);
    testing::fill_uniform_vec(bias, rng, -0.2f, 0.2f);
    ConvSpec sp{c.k, c.k, c.stride, c.pad, c.groups};
    CHECK(max_abs_diff(conv2d(x, w, bias, sp), testing::conv2d_oracle(x, w, bias, sp)) < 1e-5f);
  }
}

TEST_CASE("conv2d gradients: adjoint identity <dy, conv(dx_dir)> == <grad, dir>") {
  // For a linear op, the adjoint is exact: sum(dy * conv(e)) must equal
  // sum(grad_input(dy) * e) for any direction e, and likewise for weights.
  Rng rng(41);
  struct Case {
    int cin, cout, groups, k, stride, pad, h, w;
  };
  const Case cases[] = {
      {3, 4, 1, 3, 1, 1, 8, 8},  {4, 4, 4, 3, 1, 1, 8, 8}, {3, 5, 1, 1, 1, 0, 6, 6},
      {3, 4, 1, 3, 2, 1, 9, 9},  {2, 6, 2, 3, 2, 1, 8, 8}, {2, 3, 1, 3, 3, 0, 9, 9},
  };
  for (const auto& c : cases) {
    auto x = testing::random_tensor<double>(2, c.cin, c.h, c.w, rng);
    auto w = testing::random_tensor<double>(c.cout, c.cin / c.groups, c.k, c.k, rng);
    ConvSpec sp{c.k, c.k, c.stride, c.pad, c.groups};
    auto y = conv2d(x, w, VecX<double>(), sp);
    auto dy = testing::random_tensor<double>(y.n(), y.c(), y.h(), y.w(), rng);

    auto ex = testing::random_tensor<double>(2, c.cin, c.h, c.w, rng);
    auto dx = conv2d_grad_input(dy, w, sp, x.shape);
    const double lhs_x = (dy.data * conv2d(ex, w, VecX<double>(), sp).data).sum();
    const double rhs_x = (dx.data * ex.data).sum();
    CHECK(lhs_x == doctest::Approx(rhs_x).epsilon(1e-10));

    auto ew = testing::random_tensor<double>(c.cout, c.cin / c.groups, c.k, c.k, rng);
    auto dw = conv2d_grad_weights(x, dy, sp, w.shape);
    const double lhs_w = (dy.data * conv2d(x, ew, VecX<double>(), sp).data).sum();
    const double rhs_w = (dw.data * ew.data).sum();
    CHECK(lhs_w == doctest::Approx(rhs_w).epsilon(1e-10));

    auto db = conv2d_grad_bias(dy);
    VecX<double> ones = VecX<double>::Ones(c.cout);
    VecX<double> eb(c.cout);
    testing::fill_uniform_vec(eb, rng, -1.0, 1.0);
    const double lhs_b = (dy.data * conv2d(Tensor<double>::zeros(2, c.cin, c.h, c.w), w, eb, sp).data).sum();
    CHECK(lhs_b == doctest::Approx((db * eb).sum()).epsilon(1e-10));
  }
}

TEST_CASE("conv2d: linearity") {
  Rng rng(3);
  auto x = testing::random_tensor<float>(1, 3, 6, 6, rng);
  auto y = testing::random_tensor<float>(1, 3, 6, 6, rng);
  auto w = testing::random_tensor<float>(4, 3, 3, 3, rng);
  const float a = 0.37f, b = -1.21f;
  const auto sp = conv_spec(3, 1, 1);
  Tensor<float> mix = x.like_zeros();
  mix.data = a * x.data + b * y.data;
  auto lhs = conv2d(mix, w, VecX<float>(), sp);
  auto cx = conv2d(x, w, VecX<float>(), sp);
  auto cy = conv2d(y, w, VecX<float>(), sp);
  Tensor<float> rhs = cx.like_zeros();
  rhs.data = a * cx.data + b * cy.data;
  CHECK(max_abs_diff(lhs, rhs) < 1e-5f);
}

TEST_CASE("conv2d: depthwise channels are independent") {
  Rng rng(5);
  auto x = testing::random_tensor<float>(1, 3, 6, 6, rng);
  auto w = testing::random_tensor<float>(3, 1, 3, 3, rng);
  const auto sp = conv_spec(3, 1, 1, 3);
  auto base = conv2d(x, w, VecX<float>(), sp);
  Tensor<float> x2 = x;
  x2.plane_map(0, 1) += 0.5f;  // perturb channel 1 only
  auto mod = conv2d(x2, w, VecX<float>(), sp);
  CHECK(max_abs_diff(slice_channels(base, 0, 1), slice_channels(mod, 0, 1)) == 0.0f);
  CHECK(max_abs_diff(slice_channels(base, 2, 1), slice_channels(mod, 2, 1)) == 0.0f);
  CHECK(max_abs_diff(slice_channels(base, 1, 1), slice_channels(mod, 1, 1)) > 0.0f);
}

TEST_CASE("conv2d: rejects inconsistent shapes") {
  Rng rng(2);
  auto x = testing::random_tensor<float>(1, 3, 4, 4, rng);
  auto w = testing::random_tensor<float>(4, 2, 3, 3, rng);  // expects 2 in-channels
  CHECK_THROWS_AS(conv2d(x, w, VecX<float>(), conv_spec(3, 1, 1)), InvalidInput);
  auto w2 = testing::random_tensor<float>(4, 3, 3, 3, rng);
  VecX<float> bad_bias = VecX<float>::Zero(3);  // 4 out-channels expected
  CHECK_THROWS_AS(conv2d(x, w2, bad_bias, conv_spec(3, 1, 1)), InvalidInput);
  CHECK_THROWS_AS(conv2d(x, w2, VecX<float>(), conv_spec(3, 1, 1, /*groups=*/2)), InvalidInput);
}

TEST_CASE("conv2d: output dims must stay positive") {
  Rng rng(2);
  auto x = testing::random_tensor<float>(1, 1, 2, 2, rng);
  auto w = testing::random_tensor<float>(1, 1, 3, 3, rng);
  CHECK_THROWS_AS(conv2d(x, w, VecX<float>(), conv_spec(3, 1, 0)), InvalidInput);
}

TEST_CASE("batch_norm_inference: identity and affine") {
  Rng rng(13);
  auto x = testing::random_tensor<float>(2, 3, 4, 4, rng);
  auto bn = BnParams<float>::identity(3);
  bn.running_var.setConstant(1.0f - bn.eps);
  CHECK(max_abs_diff(batch_norm_inference(x, bn), x) < 1e-6f);

  auto one = Tensor<float>::full(1, 1, 1, 1, 2.0f);
  auto bn2 = BnParams<float>::identity(1);
  bn2.gamma[0] = 3.0f;
  bn2.beta[0] = 1.0f;
  bn2.running_var[0] = 1.0f - bn2.eps;
  CHECK(batch_norm_inference(one, bn2).data[0] == doctest::Approx(7.0f));
}

TEST_CASE("batch_norm_inference: random vs elementwise oracle") {
  Rng rng(17);
  auto x = testing::random_tensor<double>(2, 5, 3, 3, rng);
  BnParams<double> bn;
  bn.gamma = VecX<double>(5);
  bn.beta = VecX<double>(5);
  bn.running_mean = VecX<double>(5);
  bn.running_var = VecX<double>(5);
  testing::fill_uniform_vec(bn.gamma, rng, 0.5, 2.0);
  testing::fill_uniform_vec(bn.beta, rng, -1.0, 1.0);
  testing::fill_uniform_vec(bn.running_mean, rng, -1.0, 1.0);
  testing::fill_uniform_vec(bn.running_var, rng, 0.25, 2.0);
  auto y = batch_norm_inference(x, bn);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 5; ++c)
      for (int h = 0; h < 3; ++h)
        for (int w = 0; w < 3; ++w) {
          const double want = bn.gamma[c] * (x.at(n, c, h, w) - bn.running_mean[c]) /
                                  std::sqrt(bn.running_var[c] + bn.eps) +
                              bn.beta[c];
          CHECK(y.at(n, c, h, w) == doctest::Approx(want).epsilon(1e-7));
        }
}

TEST_CASE("batch_norm: rejects non-positive variance") {
  auto x = Tensor<float>::full(1, 1, 2, 2, 1.0f);
  auto bn = BnParams<float>::identity(1);
  bn.running_var[0] = -1.0f;
  CHECK_THROWS_AS(batch_norm_inference(x, bn), InvalidParameter);
}

TEST_CASE("activation: relu and sigmoid basics") {
  Tensor<float> x(1, 1, 1, 3);
  x.data << -1.0f, 0.0f, 2.0f;
  auto r = activation(x, Act::relu);
  CHECK(r.data[0] == 0.0f);
  CHECK(r.data[1] == 0.0f);
  CHECK(r.data[2] == 2.0f);

  auto z = Tensor<float>::full(1, 1, 1, 1, 0.0f);
  CHECK(activation(z, Act::sigmoid).data[0] == doctest::Approx(0.5f));

  Tensor<float> big(1, 1, 1, 3);
  big.data << -200.0f, -30.0f, -1.0f;
  auto s = activation(big, Act::sigmoid);
  for (int i = 0; i < 3; ++i) {
    CHECK(s.data[i] >= 0.0f);
    CHECK(s.data[i] < 0.5f);
  }
  CHECK(s.data[0] <= s.data[1]);
  CHECK(s.data[1] <= s.data[2]);
}

TEST_CASE("maxpool2d: single positive and empty mask") {
  Tensor<float> m(1, 1, 8, 8);
  m.at(0, 0, 3, 5) = 1.0f;
  auto y = maxpool2d(m, 8, 8);
  CHECK(y.shape == std::array<int, 4>{1, 1, 1, 1});
  CHECK(y.data[0] == 1.0f);

  auto zero = Tensor<float>::zeros(1, 1, 8, 8);
  CHECK(maxpool2d(zero, 4, 4).data.abs().maxCoeff() == 0.0f);
}

TEST_CASE("maxpool2d: random binary matches window-max oracle exactly") {
  Rng rng(23);
  auto m = testing::random_binary<float>(1, 2, 16, 16, rng, 0.3);
  auto y = maxpool2d(m, 4, 4);
  CHECK(bit_equal(y, testing::maxpool_oracle(m, 4)));
  // binary in, binary out
  for (Eigen::Index i = 0; i < y.size(); ++i) CHECK((y.data[i] == 0.0f || y.data[i] == 1.0f));
  // kernel-1 pooling is the identity
  CHECK(bit_equal(maxpool2d(y, 1, 1), y));
}

TEST_CASE("maxpool2d: rejects bad geometry") {
  auto x = Tensor<float>::zeros(1, 1, 6, 6);
  CHECK_THROWS_AS(maxpool2d(x, 4, 4), InvalidInput);
  CHECK_THROWS_AS(maxpool2d(x, 2, 3), InvalidInput);
}

TEST_CASE("bilinear_upsample: constants and factor 1") {
  auto c = Tensor<float>::full(1, 2, 3, 3, 0.7f);
  auto up = bilinear_upsample(c, 4);
  CHECK(up.shape == std::array<int, 4>{1, 2, 12, 12});
  CHECK((up.data - 0.7f).abs().maxCoeff() < 1e-7f);
  Rng rng(29);
  auto x = testing::random_tensor<float>(1, 1, 4, 4, rng);
  CHECK(bit_equal(bilinear_upsample(x, 1), x));
}

TEST_CASE("bilinear_upsample: 2x2 factor 2 matches closed form") {
  Tensor<double> x(1, 1, 2, 2);
  x.data << 1.0, 2.0, 3.0, 4.0;
  auto y = bilinear_upsample(x, 2);
  // Per-axis source positions (o+0.5)/2-0.5 = {-0.25, 0.25, 0.75, 1.25};
  // edge taps clamp, interior mixes 0.75/0.25.
  const double r0[4] = {1.0, 1.25, 1.75, 2.0};
  const double r3[4] = {3.0, 3.25, 3.75, 4.0};
  for (int j = 0; j < 4; ++j) {
    CHECK(y.at(0, 0, 0, j) == doctest::Approx(r0[j]).epsilon(1e-7));
    CHECK(y.at(0, 0, 3, j) == doctest::Approx(r3[j]).epsilon(1e-7));
    CHECK(y.at(0, 0, 1, j) == doctest::Approx(0.75 * r0[j] + 0.25 * r3[j]).epsilon(1e-7));
    CHECK(y.at(0, 0, 2, j) == doctest::Approx(0.25 * r0[j] + 0.75 * r3[j]).epsilon(1e-7));
  }
}

TEST_CASE("bilinear_upsample: preserves range for constant and ramp inputs") {
  Tensor<float> ramp(1, 1, 5, 5);
  for (int h = 0; h < 5; ++h)
    for (int w = 0; w < 5; ++w) ramp.at(0, 0, h, w) = 0.1f * h + 0.05f * w;
  auto up = bilinear_upsample(ramp, 3);
  CHECK(up.data.minCoeff() >= ramp.data.minCoeff() - 1e-7f);
  CHECK(up.data.maxCoeff() <= ramp.data.maxCoeff() + 1e-7f);
}

TEST_CASE("combine: add and concat") {
  Rng rng(31);
  auto x = testing::random_tensor<float>(1, 2, 3, 3, rng);
  auto z = x.like_zeros();
  CHECK(bit_equal(add(x, z), x));

  Tensor<float> neg = x.like_zeros();
  neg.data = -x.data;
  CHECK(add(x, neg).data.abs().maxCoeff() == 0.0f);

  auto a = testing::random_tensor<float>(1, 1, 3, 3, rng);
  auto b = testing::random_tensor<float>(1, 2, 3, 3, rng);
  auto cat = concat_channels(a, b);
  CHECK(cat.c() == 3);
  CHECK(bit_equal(slice_channels(cat, 0, 1), a));
  CHECK(bit_equal(slice_channels(cat, 1, 2), b));

  auto bad = testing::random_tensor<float>(1, 1, 4, 4, rng);
  CHECK_THROWS_AS(concat_channels(a, bad), InvalidInput);
  CHECK_THROWS_AS(add(a, b), InvalidInput);
}

TEST_CASE("ops are pure: identical inputs give bit-identical outputs") {
  Rng rng(37);
  auto x = testing::random_tensor<float>(2, 3, 8, 8, rng);
  auto w = testing::random_tensor<float>(5, 3, 3, 3, rng);
  VecX<float> bias(5);
  testing::fill_uniform_vec(bias, rng, -1.0f, 1.0f);
  const auto sp = conv_spec(3, 2, 1);
  CHECK(bit_equal(conv2d(x, w, bias, sp), conv2d(x, w, bias, sp)));
  CHECK(bit_equal(bilinear_upsample(x, 2), bilinear_upsample(x, 2)));
  CHECK(bit_equal(activation(x, Act::sigmoid), activation(x, Act::sigmoid)));
}

TEST_SUITE_END();
