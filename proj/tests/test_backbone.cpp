#include <doctest.h>

#include "spirdet/model.hpp"
#include "test_util.hpp"

using namespace spirdet;
using spirdet::testing::Rng;

namespace {

// Desk-scale config used across the suites.
ModelConfig tiny_config() {
  ModelConfig c;
  c.variant = "lr";
  c.blocks_per_stage = {1, 1, 1, 1};
  c.channels_per_stage = {6, 8, 10, 12};
  c.K = 2;
  c.alpha = 0.125;
  c.sparse_convs = 2;
  c.input_h = c.input_w = 32;
  return c;
}

}  // namespace

TEST_SUITE_BEGIN("backbone");

TEST_CASE("make_config: Table-2 presets") {
  auto m = make_config("m");
  CHECK(m.blocks_per_stage == std::vector<int>{2, 6, 8, 1});
  CHECK(m.sparse_convs == 4);
  CHECK(m.input_h == 512);
  auto lr = make_config("lr");
  CHECK(lr.blocks_per_stage == std::vector<int>{4, 2, 2, 1});
  CHECK(lr.sparse_convs == 2);
  CHECK(lr.input_h == 256);
  auto t = make_config("t");
  CHECK(t.blocks_per_stage == std::vector<int>{1, 2, 2, 1});
  auto s = make_config("s");
  CHECK(s.blocks_per_stage == std::vector<int>{1, 4, 4, 1});
  CHECK_THROWS_AS(make_config("xl"), InvalidConfig);
}

TEST_CASE("validate_config: rejects bad fields by name") {
  auto c = tiny_config();
  c.K = 0;
  try {
    validate_config(c);
    FAIL("expected InvalidConfig");
  } catch (const InvalidConfig& e) {
    CHECK(e.field == "K");
  }
  c = tiny_config();
  c.alpha = 0.0;
  CHECK_THROWS_AS(validate_config(c), InvalidConfig);
  c = tiny_config();
  c.input_h = 33;
  try {
    validate_config(c);
    FAIL("expected InvalidConfig");
  } catch (const InvalidConfig& e) {
    CHECK(e.field == "input_size");
  }
  c = tiny_config();
  c.coarse_ratio = 6;
  CHECK_THROWS_AS(validate_config(c), InvalidConfig);
  c = tiny_config();
  c.alpha = 0.01;  // 0.01 * 16 coarse cells < 1
  try {
    validate_config(c);
    FAIL("expected InvalidConfig");
  } catch (const InvalidConfig& e) {
    CHECK(e.field == "alpha");
  }
}

TEST_CASE("build_model: deterministic from seed") {
  auto c = tiny_config();
  auto a = build_model<float>(c, 42);
  auto b = build_model<float>(c, 42);
  auto d = build_model<float>(c, 43);
  CHECK(bit_equal(a.stem.w, b.stem.w));
  CHECK(bit_equal(a.stages[2][0].depthwise[0].kernel, b.stages[2][0].depthwise[0].kernel));
  CHECK(bit_equal(a.up1.w, b.up1.w));
  CHECK(!bit_equal(a.stem.w, d.stem.w));
}

TEST_CASE("input_stem: shape contract, zero propagation, composition oracle") {
  auto c = tiny_config();
  auto m = build_model<float>(c, 7);
  Rng rng(1);
  auto x = testing::random_tensor<float>(1, 1, 32, 32, rng, 0.0f, 1.0f);
  auto y = input_stem(x, m);
  CHECK(y.shape == std::array<int, 4>{1, 6, 32, 32});

  auto zero = Tensor<float>::zeros(1, 1, 32, 32);
  CHECK(input_stem(zero, m).data.abs().maxCoeff() == 0.0f);  // fresh BN: beta = mean = 0

  auto want = activation(
      batch_norm_inference(conv2d(x, m.stem.w, VecX<float>(), conv_spec(3, 1, 1)), m.stem.bn),
      Act::relu);
  CHECK(max_abs_diff(y, want) == 0.0f);

  CHECK_THROWS_AS(input_stem(testing::random_tensor<float>(1, 2, 32, 32, rng), m), InvalidInput);
}

TEST_CASE("encoder_forward: resolutions halve after stage 1; batch independent") {
  auto c = tiny_config();
  auto m = build_model<float>(c, 9);
  Rng rng(2);
  auto x = testing::random_tensor<float>(1, 1, 32, 32, rng, 0.0f, 1.0f);
  auto pyr = encoder_forward(x, m);
  REQUIRE(pyr.maps.size() == 4);
  CHECK(pyr.maps[0].shape == std::array<int, 4>{1, 6, 32, 32});
  CHECK(pyr.maps[1].shape == std::array<int, 4>{1, 8, 16, 16});
  CHECK(pyr.maps[2].shape == std::array<int, 4>{1, 10, 8, 8});
  CHECK(pyr.maps[3].shape == std::array<int, 4>{1, 12, 4, 4});

  // duplicated image in a batch of 2 gives identical per-image outputs
  std::vector<const Tensor<float>*> two{&x, &x};
  auto x2 = stack_batch(two);
  auto pyr2 = encoder_forward(x2, m);
  for (int l = 0; l < 4; ++l) {
    CHECK(max_abs_diff(slice_batch(pyr2.maps[l], 0), pyr.maps[l]) == 0.0f);
    CHECK(max_abs_diff(slice_batch(pyr2.maps[l], 1), pyr.maps[l]) == 0.0f);
  }

  CHECK_THROWS_AS(encoder_forward(testing::random_tensor<float>(1, 1, 36, 36, rng), m),
                  InvalidInput);
}

TEST_CASE("neck_forward: zero fusion convs leave the pyramid unchanged") {
  auto c = tiny_config();
  auto m = build_model<float>(c, 11);
  for (auto& n : m.neck) n.w.data.setZero();  // beta = mean = 0 after init
  Rng rng(3);
  auto x = testing::random_tensor<float>(1, 1, 32, 32, rng, 0.0f, 1.0f);
  auto pyr = encoder_forward(x, m);
  auto fused = neck_forward(pyr, m);
  for (size_t l = 0; l < pyr.maps.size(); ++l) CHECK(max_abs_diff(fused.maps[l], pyr.maps[l]) == 0.0f);
}

TEST_CASE("neck_forward: matches the step-by-step composition oracle") {
  auto c = tiny_config();
  auto m = build_model<float>(c, 13);
  Rng rng(4);
  auto x = testing::random_tensor<float>(1, 1, 32, 32, rng, 0.0f, 1.0f);
  auto pyr = encoder_forward(x, m);
  auto fused = neck_forward(pyr, m);
  // independent recomposition from tested ops
  std::vector<Tensor<float>> q = pyr.maps;
  for (int l = 2; l >= 0; --l) {
    auto up = bilinear_upsample(q[l + 1], 2);
    auto cat = concat_channels(up, q[l]);
    auto mixed = activation(
        batch_norm_inference(conv2d(cat, m.neck[l].w, VecX<float>(), conv_spec(3, 1, 1)),
                             m.neck[l].bn),
        Act::relu);
    q[l] = add(q[l], mixed);
  }
  for (int l = 0; l < 4; ++l) {
    CHECK(max_abs_diff(fused.maps[l], q[l]) < 1e-6f);
    CHECK(fused.maps[l].shape == pyr.maps[l].shape);
  }
}

TEST_CASE("full trunk: train-form vs fused within 1e-4 on random weights") {
  auto c = tiny_config();
  c.K = 4;
  auto m = build_model<float>(c, 17);
  // randomize BN stats so folding is non-trivial
  Rng rng(5);
  ParameterStore<float> ps;
  register_params(m, ps);
  for (auto& e : ps.entries()) {
    if (e.kind == ParamKind::bn_running_mean) {
      VecX<float> v(e.size);
      testing::fill_uniform_vec(v, rng, -0.3f, 0.3f);
      e.view() = v;
    } else if (e.kind == ParamKind::bn_running_var) {
      VecX<float> v(e.size);
      testing::fill_uniform_vec(v, rng, 0.5f, 1.5f);
      e.view() = v;
    } else if (e.kind == ParamKind::bn_gamma) {
      VecX<float> v(e.size);
      testing::fill_uniform_vec(v, rng, 0.7f, 1.3f);
      e.view() = v;
    } else if (e.kind == ParamKind::bn_beta) {
      VecX<float> v(e.size);
      testing::fill_uniform_vec(v, rng, -0.2f, 0.2f);
      e.view() = v;
    }
  }
  auto f = fuse_model(m);
  float worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    auto x = testing::random_tensor<float>(1, 1, 32, 32, rng, 0.0f, 1.0f);
    auto a = neck_forward(encoder_forward(x, m), m);
    auto b = fused_neck_forward(fused_encoder_forward(x, f), f);
    for (int l = 0; l < 4; ++l) worst = std::max(worst, max_abs_diff(a.maps[l], b.maps[l]));
  }
  CHECK(worst <= 1e-4f);
}

TEST_CASE("parameter counts: fused is less than half of train form at K=4") {
  for (const char* variant : {"lr", "t", "s", "m"}) {
    auto c = make_config(variant);
    c.input_h = c.input_w = 64;  // widths don't depend on input size
    auto m = build_model<float>(c, 1);
    auto f = fuse_model(m);
    const long long train = model_train_param_count(m);
    const long long fused = model_fused_param_count(f);
    INFO(variant, ": train=", train, " fused=", fused, " ratio=", double(fused) / train);
    CHECK(fused * 2 <= train);
    // fused totals land in the published band
    CHECK(fused >= 230000);
    CHECK(fused <= 480000);
  }
}

TEST_CASE("receptive field: P4 perturbation window bounded by kernel/stride algebra") {
  auto c = tiny_config();
  auto m = build_model<float>(c, 19);
  Rng rng(6);
  auto x = testing::random_tensor<float>(1, 1, 32, 32, rng, 0.0f, 1.0f);
  auto base = encoder_forward(x, m);

  // Receptive-field recursion: conv k stride s maps (r, j) -> (r + (k-1)/2 * j, j * s).
  // Trunk at P4: stem 3x3 + per stage (3x3 dw + 1x1) with stride 2 at stages 2..4.
  double r = 1.0, j = 1.0;  // radius in input pixels, jump of current map
  auto conv_step = [&](int k, int s) {
    r += (k - 1) / 2 * j;
    j *= s;
  };
  conv_step(3, 1);  // stem
  for (int stage = 0; stage < 4; ++stage) {
    conv_step(3, stage == 0 ? 1 : 2);  // depthwise part of the single block
    conv_step(1, 1);                   // pointwise part
  }
  Tensor<float> x2 = x;
  const int py = 17, px = 9;
  x2.at(0, 0, py, px) += 0.5f;
  auto mod = encoder_forward(x2, m);
  // allowed output window: centers y with |y * j - p| <= r (+1 cell slack for rounding)
  const auto& a = base.maps[3];
  const auto& b = mod.maps[3];
  for (int yy = 0; yy < a.h(); ++yy)
    for (int xx = 0; xx < a.w(); ++xx) {
      float diff = 0;
      for (int ch = 0; ch < a.c(); ++ch) diff = std::max(diff, std::abs(a.at(0, ch, yy, xx) - b.at(0, ch, yy, xx)));
      if (diff > 0) {
        CHECK(std::abs(yy * j + (j - 1) / 2 - py) <= r + j);
        CHECK(std::abs(xx * j + (j - 1) / 2 - px) <= r + j);
      }
    }
}

TEST_SUITE_END();
