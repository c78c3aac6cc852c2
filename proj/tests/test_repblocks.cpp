#include <doctest.h>

#include "spirdet/repblock.hpp"
#include "test_util.hpp"

using namespace spirdet;
using spirdet::testing::Rng;

namespace {

BranchConv<float> random_branch(BranchKind kind, int in_c, int out_c, Rng& rng) {
  BranchConv<float> b;
  b.kind = kind;
  switch (kind) {
    case BranchKind::dw3x3:
      b.kernel = testing::random_tensor<float>(out_c, 1, 3, 3, rng);
      break;
    case BranchKind::dw1x1:
      b.kernel = testing::random_tensor<float>(out_c, 1, 1, 1, rng);
      break;
    case BranchKind::full3x3:
      b.kernel = testing::random_tensor<float>(out_c, in_c, 3, 3, rng);
      break;
    case BranchKind::pw1x1:
      b.kernel = testing::random_tensor<float>(out_c, in_c, 1, 1, rng);
      break;
    case BranchKind::identity:
      break;
  }
  b.bn = testing::random_bn<float>(out_c, rng);
  return b;
}

RepBlockTrainParams<float> random_block(int in_c, int out_c, int stride, int K, Rng& rng) {
  RepBlockTrainParams<float> p;
  p.in_channels = in_c;
  p.out_channels = out_c;
  p.stride = stride;
  p.K = K;
  const bool dw = stride == 1;
  for (int k = 0; k < K; ++k)
    p.depthwise.push_back(
        random_branch(dw ? BranchKind::dw3x3 : BranchKind::full3x3, in_c, out_c, rng));
  p.depthwise.push_back(
      random_branch(dw ? BranchKind::dw1x1 : BranchKind::pw1x1, in_c, out_c, rng));
  if (p.has_identity()) {
    p.depthwise.push_back(random_branch(BranchKind::identity, in_c, out_c, rng));
  }
  for (int k = 0; k < K; ++k)
    p.pointwise.push_back(random_branch(BranchKind::pw1x1, out_c, out_c, rng));
  if (p.has_identity()) p.pointwise.push_back(random_branch(BranchKind::identity, out_c, out_c, rng));
  return p;
}

}  // namespace

TEST_SUITE_BEGIN("repblocks");

TEST_CASE("fold_bn: identity BN leaves kernel, zero bias") {
  Rng rng(1);
  BranchConv<float> b = random_branch(BranchKind::dw3x3, 4, 4, rng);
  b.bn = BnParams<float>::identity(4);
  b.bn.running_var.setConstant(1.0f - b.bn.eps);
  auto [k, bias] = fold_bn(b);
  CHECK(max_abs_diff(k, b.kernel) < 1e-6f);
  CHECK(bias.abs().maxCoeff() < 1e-7f);
}

TEST_CASE("fold_bn: pure scale doubles the kernel") {
  Rng rng(2);
  BranchConv<float> b = random_branch(BranchKind::full3x3, 3, 5, rng);
  b.bn = BnParams<float>::identity(5);
  b.bn.gamma.setConstant(2.0f);
  b.bn.running_var.setConstant(1.0f - b.bn.eps);
  auto [k, bias] = fold_bn(b);
  Tensor<float> want = b.kernel;
  want.data *= 2.0f;
  CHECK(max_abs_diff(k, want) < 1e-6f);
  CHECK(bias.abs().maxCoeff() < 1e-7f);
}

TEST_CASE("fold_bn: folded path equals conv-then-bn") {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    BranchConv<float> b = random_branch(BranchKind::full3x3, 3, 4, rng);
    auto x = testing::random_tensor<float>(1, 3, 7, 7, rng);
    const auto sp = conv_spec(3, 1, 1);
    auto unfolded = batch_norm_inference(conv2d(x, b.kernel, VecX<float>(), sp), b.bn);
    auto [k, bias] = fold_bn(b);
    auto folded = conv2d(x, k, bias, sp);
    CHECK(max_abs_diff(unfolded, folded) < 1e-5f);
  }
}

TEST_CASE("fold_bn: rejects non-positive variance") {
  Rng rng(4);
  BranchConv<float> b = random_branch(BranchKind::dw3x3, 2, 2, rng);
  b.bn.running_var[1] = -2.0f;
  CHECK_THROWS_AS(fold_bn(b), InvalidParameter);
}

TEST_CASE("canonicalize_branch: dw1x1 moves to center tap") {
  Rng rng(5);
  BranchConv<float> b = random_branch(BranchKind::dw1x1, 3, 3, rng);
  auto c = canonicalize_branch(b);
  CHECK(c.kind == BranchKind::dw3x3);
  for (int ch = 0; ch < 3; ++ch)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        const float want = (i == 1 && j == 1) ? b.kernel.at(ch, 0, 0, 0) : 0.0f;
        CHECK(c.kernel.at(ch, 0, i, j) == want);
      }
}

TEST_CASE("canonicalize_branch: identity becomes center-one depthwise") {
  Rng rng(6);
  BranchConv<float> b = random_branch(BranchKind::identity, 4, 4, rng);
  auto c = canonicalize_branch(b);
  CHECK(c.kind == BranchKind::dw3x3);
  CHECK(c.kernel.shape == std::array<int, 4>{4, 1, 3, 3});
  for (int ch = 0; ch < 4; ++ch) {
    CHECK(c.kernel.at(ch, 0, 1, 1) == 1.0f);
    CHECK(c.kernel.plane_map(ch, 0).sum() == 1.0f);
  }
}

TEST_CASE("canonicalize_branch: canonical form computes the same function") {
  Rng rng(7);
  for (int trial = 0; trial < 8; ++trial) {
    BranchConv<float> b = random_branch(BranchKind::dw1x1, 4, 4, rng);
    auto x = testing::random_tensor<float>(1, 4, 6, 6, rng);
    auto y0 = conv2d(x, b.kernel, VecX<float>(), ConvSpec{1, 1, 1, 0, 4});
    auto c = canonicalize_branch(b);
    auto y1 = conv2d(x, c.kernel, VecX<float>(), ConvSpec{3, 3, 1, 1, 4});
    CHECK(max_abs_diff(y0, y1) < 1e-6f);
  }
  // stride-2 pw1x1 embedding must agree with the padded 3x3 form as well
  BranchConv<float> b2 = random_branch(BranchKind::pw1x1, 3, 6, rng);
  auto x2 = testing::random_tensor<float>(1, 3, 8, 8, rng);
  auto y0 = conv2d(x2, b2.kernel, VecX<float>(), ConvSpec{1, 1, 2, 0, 1});
  auto c2 = canonicalize_branch(b2);
  auto y1 = conv2d(x2, c2.kernel, VecX<float>(), ConvSpec{3, 3, 2, 1, 1});
  CHECK(max_abs_diff(y0, y1) < 1e-6f);
}

TEST_CASE("fuse_depthwise: single branch with identity BN is unchanged") {
  Rng rng(8);
  BranchConv<float> b = random_branch(BranchKind::dw3x3, 4, 4, rng);
  b.bn = BnParams<float>::identity(4);
  b.bn.running_var.setConstant(1.0f - b.bn.eps);
  auto [k, bias] = fuse_depthwise<float>({b});
  CHECK(max_abs_diff(k, b.kernel) < 1e-6f);
  CHECK(bias.abs().maxCoeff() < 1e-7f);
}

TEST_CASE("fuse_depthwise: two identical branches double the kernel") {
  Rng rng(9);
  BranchConv<float> b = random_branch(BranchKind::dw3x3, 4, 4, rng);
  b.bn = BnParams<float>::identity(4);
  b.bn.running_var.setConstant(1.0f - b.bn.eps);
  auto [k, bias] = fuse_depthwise<float>({b, b});
  Tensor<float> want = b.kernel;
  want.data *= 2.0f;
  CHECK(max_abs_diff(k, want) < 1e-6f);
}

TEST_CASE("fuse_depthwise: rejects disagreeing branch shapes") {
  Rng rng(10);
  BranchConv<float> a = random_branch(BranchKind::dw3x3, 4, 4, rng);
  BranchConv<float> b = random_branch(BranchKind::dw3x3, 3, 3, rng);
  CHECK_THROWS_AS((fuse_depthwise<float>({a, b})), InvalidStructure);
}

TEST_CASE("fuse_pointwise: identity branch alone gives the channel delta") {
  Rng rng(11);
  BranchConv<float> b = random_branch(BranchKind::identity, 3, 3, rng);
  b.bn = BnParams<float>::identity(3);
  b.bn.running_var.setConstant(1.0f - b.bn.eps);
  auto [k, bias] = fuse_pointwise<float>({b});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(k.at(i, j, 0, 0) == doctest::Approx(i == j ? 1.0f : 0.0f));
}

TEST_CASE("repblock: train and fused forms agree on random blocks") {
  Rng rng(12);
  // stride-1 (depthwise) and stride-2 (full, channel-changing) blocks
  auto p1 = random_block(6, 6, 1, 4, rng);
  auto f1 = fuse_block(p1);
  auto p2 = random_block(6, 12, 2, 4, rng);
  auto f2 = fuse_block(p2);
  float worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto x = testing::random_tensor<float>(1, 6, 16, 16, rng);
    worst = std::max(worst, max_abs_diff(repblock_train_forward(x, p1), repblock_fused_forward(x, f1)));
    worst = std::max(worst, max_abs_diff(repblock_train_forward(x, p2), repblock_fused_forward(x, f2)));
  }
  CHECK(worst <= 1e-4f);
}

TEST_CASE("repblock: zero input with neutral BN gives zero output") {
  Rng rng(13);
  auto p = random_block(4, 4, 1, 3, rng);
  for (auto* part : {&p.depthwise, &p.pointwise})
    for (auto& b : *part) {
      b.bn.beta.setZero();
      b.bn.running_mean.setZero();
    }
  auto x = Tensor<float>::zeros(1, 4, 8, 8);
  CHECK(repblock_train_forward(x, p).data.abs().maxCoeff() == 0.0f);
  CHECK(repblock_fused_forward(x, fuse_block(p)).data.abs().maxCoeff() == 0.0f);
}

TEST_CASE("repblock: stride-2 halves spatial dims") {
  Rng rng(14);
  auto p = random_block(4, 8, 2, 2, rng);
  auto x = testing::random_tensor<float>(1, 4, 16, 16, rng);
  auto y = repblock_train_forward(x, p);
  CHECK(y.shape == std::array<int, 4>{1, 8, 8, 8});
}

TEST_CASE("repblock: fusion is idempotent and parameter counts shrink") {
  Rng rng(15);
  for (int K : {2, 4}) {
    auto p = random_block(5, 5, 1, K, rng);
    auto f1 = fuse_block(p);
    auto f2 = fuse_block(p);
    CHECK(bit_equal(f1.dw_kernel, f2.dw_kernel));
    CHECK(bit_equal(f1.pw_kernel, f2.pw_kernel));
    CHECK((f1.dw_bias == f2.dw_bias).all());
    CHECK((f1.pw_bias == f2.pw_bias).all());

    CHECK(repblock_fused_param_count(f1) < repblock_train_param_count(p));
    // canonical depthwise kernel ratio: 1 / (K + 1 + identity)
    const long long train_k = depthwise_canonical_kernel_params(p, false);
    const long long fused_k = depthwise_canonical_kernel_params(p, true);
    CHECK(train_k == fused_k * (K + 2));
  }
  auto pd = random_block(4, 8, 2, 4, rng);
  const long long train_k = depthwise_canonical_kernel_params(pd, false);
  CHECK(train_k == depthwise_canonical_kernel_params(pd, true) * (4 + 1));
}

TEST_CASE("repblock: structure validation catches malformed blocks") {
  Rng rng(16);
  auto p = random_block(4, 4, 1, 2, rng);
  auto broken = p;
  broken.depthwise.pop_back();  // drop mandatory identity
  CHECK_THROWS_AS(validate_repblock(broken), InvalidStructure);
  auto wrong = p;
  wrong.in_channels = 5;
  CHECK_THROWS_AS(repblock_train_forward(testing::random_tensor<float>(1, 5, 8, 8, rng), p),
                  InvalidInput);
  CHECK_THROWS_AS(validate_repblock(wrong), InvalidStructure);
}

TEST_SUITE_END();
