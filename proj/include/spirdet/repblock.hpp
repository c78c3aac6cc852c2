#pragma once

// RepBlock: multi-branch training form and the algebra that collapses it to
// a single 3x3 + 1x1 conv pair for inference.
//
// A stride-1 block's depthwise part runs K parallel depthwise 3x3 branches
// plus a depthwise 1x1 branch plus a BN-only identity branch, each behind
// its own BN; the pointwise part mirrors this with K 1x1 convs plus identity.
// Downsampling blocks (stride 2, channel-changing) use K full 3x3 kernels
// plus a full 1x1 branch and no identity. Fusion folds every BN into its
// kernel, embeds 1x1 kernels at the center of a 3x3, materializes identity
// as a center-one kernel, and sums the branches.

#include <utility>
#include <vector>

#include "spirdet/ops.hpp"

namespace spirdet {

enum class BranchKind { dw3x3, dw1x1, full3x3, pw1x1, identity };

template <std::floating_point S>
struct BranchConv {
  BranchKind kind = BranchKind::identity;
  Tensor<S> kernel;  // empty for identity
  BnParams<S> bn;

  template <std::floating_point T>
  BranchConv<T> cast() const {
    BranchConv<T> o;
    o.kind = kind;
    if (kernel.size()) o.kernel = kernel.template cast<T>();
    o.bn = bn.template cast<T>();
    return o;
  }
};

template <std::floating_point S>
struct RepBlockTrainParams {
  int in_channels = 0, out_channels = 0;
  int stride = 1;
  int K = 1;
  std::vector<BranchConv<S>> depthwise;  // K main branches, then 1x1, then optional identity
  std::vector<BranchConv<S>> pointwise;  // K pw1x1, then optional identity

  bool has_identity() const { return stride == 1 && in_channels == out_channels; }

  template <std::floating_point T>
  RepBlockTrainParams<T> cast() const {
    RepBlockTrainParams<T> o;
    o.in_channels = in_channels;
    o.out_channels = out_channels;
    o.stride = stride;
    o.K = K;
    for (const auto& b : depthwise) o.depthwise.push_back(b.template cast<T>());
    for (const auto& b : pointwise) o.pointwise.push_back(b.template cast<T>());
    return o;
  }
};

template <std::floating_point S>
struct FusedBlockParams {
  int in_channels = 0, out_channels = 0;
  int stride = 1;
  bool dw_full = false;  // downsampling blocks carry a full (groups=1) 3x3
  Tensor<S> dw_kernel;
  VecX<S> dw_bias;
  Tensor<S> pw_kernel;
  VecX<S> pw_bias;
};

template <std::floating_point S>
void validate_repblock(const RepBlockTrainParams<S>& p) {
  if (p.stride != 1 && p.stride != 2) throw InvalidStructure("repblock: stride must be 1 or 2");
  if (p.K < 1) throw InvalidStructure("repblock: K must be >= 1");
  if (p.stride == 1 && p.in_channels != p.out_channels)
    throw InvalidStructure("repblock: stride-1 blocks must preserve channel count");
  const bool id = p.has_identity();
  const size_t want_dw = static_cast<size_t>(p.K) + 1 + (id ? 1 : 0);
  const size_t want_pw = static_cast<size_t>(p.K) + (id ? 1 : 0);
  if (p.depthwise.size() != want_dw)
    throw InvalidStructure("repblock: depthwise part expects " + std::to_string(want_dw) +
                           " branches, has " + std::to_string(p.depthwise.size()));
  if (p.pointwise.size() != want_pw)
    throw InvalidStructure("repblock: pointwise part expects " + std::to_string(want_pw) +
                           " branches, has " + std::to_string(p.pointwise.size()));
  const BranchKind main_kind = p.stride == 2 ? BranchKind::full3x3 : BranchKind::dw3x3;
  const BranchKind one_kind = p.stride == 2 ? BranchKind::pw1x1 : BranchKind::dw1x1;
  for (int k = 0; k < p.K; ++k)
    if (p.depthwise[k].kind != main_kind)
      throw InvalidStructure("repblock: depthwise branch kind mismatch");
  if (p.depthwise[p.K].kind != one_kind)
    throw InvalidStructure("repblock: depthwise 1x1 branch kind mismatch");
  if (id && p.depthwise.back().kind != BranchKind::identity)
    throw InvalidStructure("repblock: missing depthwise identity branch");
  for (int k = 0; k < p.K; ++k)
    if (p.pointwise[k].kind != BranchKind::pw1x1)
      throw InvalidStructure("repblock: pointwise branch kind mismatch");
  if (id && p.pointwise.back().kind != BranchKind::identity)
    throw InvalidStructure("repblock: missing pointwise identity branch");
}

namespace detail {

template <std::floating_point S>
ConvSpec branch_spec(const BranchConv<S>& b, int stride) {
  switch (b.kind) {
    case BranchKind::dw3x3:
      return ConvSpec{3, 3, stride, 1, b.kernel.n()};
    case BranchKind::dw1x1:
      return ConvSpec{1, 1, stride, 0, b.kernel.n()};
    case BranchKind::full3x3:
      return ConvSpec{3, 3, stride, 1, 1};
    case BranchKind::pw1x1:
      return ConvSpec{1, 1, stride, 0, 1};
    case BranchKind::identity:
      break;
  }
  throw InvalidStructure("identity branch has no conv spec");
}

}  // namespace detail

// Folds a branch's BN into its kernel:
//   kernel' = kernel * gamma / sqrt(var + eps)
//   bias'   = beta - mean * gamma / sqrt(var + eps)
template <std::floating_point S>
std::pair<Tensor<S>, VecX<S>> fold_bn(const BranchConv<S>& b) {
  if (b.kind == BranchKind::identity)
    throw InvalidStructure("fold_bn: canonicalize identity branches first");
  for (int c = 0; c < b.bn.channels(); ++c)
    if (!(b.bn.running_var[c] + b.bn.eps > S(0)))
      throw InvalidParameter("fold_bn: running_var + eps must be positive");
  if (b.bn.channels() != b.kernel.n())
    throw InvalidStructure("fold_bn: BN channels disagree with kernel output channels");
  Tensor<S> k = b.kernel;
  VecX<S> bias(b.bn.channels());
  const Eigen::Index per_oc = k.size() / k.n();
  for (int oc = 0; oc < k.n(); ++oc) {
    const S scale = b.bn.gamma[oc] / std::sqrt(b.bn.running_var[oc] + b.bn.eps);
    k.data.segment(oc * per_oc, per_oc) *= scale;
    bias[oc] = b.bn.beta[oc] - b.bn.running_mean[oc] * scale;
  }
  return {std::move(k), std::move(bias)};
}

// Rewrites a branch as an equivalent 3x3 branch: 1x1 kernels move to the
// center tap, identity becomes a center-one depthwise kernel.
template <std::floating_point S>
BranchConv<S> canonicalize_branch(const BranchConv<S>& b) {
  BranchConv<S> out;
  out.bn = b.bn;
  switch (b.kind) {
    case BranchKind::dw3x3:
    case BranchKind::full3x3:
      return b;
    case BranchKind::dw1x1: {
      out.kind = BranchKind::dw3x3;
      out.kernel = Tensor<S>(b.kernel.n(), 1, 3, 3);
      for (int c = 0; c < b.kernel.n(); ++c) out.kernel.at(c, 0, 1, 1) = b.kernel.at(c, 0, 0, 0);
      return out;
    }
    case BranchKind::pw1x1: {
      out.kind = BranchKind::full3x3;
      out.kernel = Tensor<S>(b.kernel.n(), b.kernel.c(), 3, 3);
      for (int oc = 0; oc < b.kernel.n(); ++oc)
        for (int ic = 0; ic < b.kernel.c(); ++ic)
          out.kernel.at(oc, ic, 1, 1) = b.kernel.at(oc, ic, 0, 0);
      return out;
    }
    case BranchKind::identity: {
      const int c = b.bn.channels();
      if (c < 1) throw InvalidStructure("canonicalize_branch: identity needs BN channels");
      out.kind = BranchKind::dw3x3;
      out.kernel = Tensor<S>(c, 1, 3, 3);
      for (int i = 0; i < c; ++i) out.kernel.at(i, 0, 1, 1) = S(1);
      return out;
    }
  }
  throw InvalidStructure("canonicalize_branch: unknown kind");
}

// Sums canonicalized, BN-folded depthwise-part branches into one 3x3 kernel.
template <std::floating_point S>
std::pair<Tensor<S>, VecX<S>> fuse_depthwise(const std::vector<BranchConv<S>>& branches) {
  if (branches.empty()) throw InvalidStructure("fuse_depthwise: no branches");
  Tensor<S> kernel;
  VecX<S> bias;
  for (const auto& b : branches) {
    auto [k, bs] = fold_bn(canonicalize_branch(b));
    if (kernel.size() == 0) {
      kernel = std::move(k);
      bias = std::move(bs);
    } else {
      if (!kernel.same_shape(k))
        throw InvalidStructure("fuse_depthwise: branch kernel shapes disagree: " +
                               kernel.shape_str() + " vs " + k.shape_str());
      kernel.data += k.data;
      bias += bs;
    }
  }
  return {std::move(kernel), std::move(bias)};
}

namespace detail {

// Pointwise-part branch as a plain 1x1 kernel (identity -> channel delta).
template <std::floating_point S>
BranchConv<S> materialize_pointwise(const BranchConv<S>& b) {
  if (b.kind == BranchKind::pw1x1) return b;
  if (b.kind != BranchKind::identity)
    throw InvalidStructure("pointwise part accepts pw1x1 or identity branches");
  const int c = b.bn.channels();
  BranchConv<S> out;
  out.kind = BranchKind::pw1x1;
  out.bn = b.bn;
  out.kernel = Tensor<S>(c, c, 1, 1);
  for (int i = 0; i < c; ++i) out.kernel.at(i, i, 0, 0) = S(1);
  return out;
}

}  // namespace detail

// Sums BN-folded pointwise-part branches into one 1x1 kernel.
template <std::floating_point S>
std::pair<Tensor<S>, VecX<S>> fuse_pointwise(const std::vector<BranchConv<S>>& branches) {
  if (branches.empty()) throw InvalidStructure("fuse_pointwise: no branches");
  Tensor<S> kernel;
  VecX<S> bias;
  for (const auto& b : branches) {
    auto [k, bs] = fold_bn(detail::materialize_pointwise(b));
    if (kernel.size() == 0) {
      kernel = std::move(k);
      bias = std::move(bs);
    } else {
      if (!kernel.same_shape(k)) throw InvalidStructure("fuse_pointwise: kernel shapes disagree");
      kernel.data += k.data;
      bias += bs;
    }
  }
  return {std::move(kernel), std::move(bias)};
}

template <std::floating_point S>
FusedBlockParams<S> fuse_block(const RepBlockTrainParams<S>& p) {
  validate_repblock(p);
  FusedBlockParams<S> f;
  f.in_channels = p.in_channels;
  f.out_channels = p.out_channels;
  f.stride = p.stride;
  f.dw_full = p.stride == 2;
  std::tie(f.dw_kernel, f.dw_bias) = fuse_depthwise(p.depthwise);
  std::tie(f.pw_kernel, f.pw_bias) = fuse_pointwise(p.pointwise);
  return f;
}

// Training-form forward with inference BN (running statistics); each part ends
// in ReLU.
template <std::floating_point S>
Tensor<S> repblock_train_forward(const Tensor<S>& x, const RepBlockTrainParams<S>& p) {
  validate_repblock(p);
  if (x.c() != p.in_channels)
    throw InvalidInput("repblock: input has " + std::to_string(x.c()) + " channels, expected " +
                       std::to_string(p.in_channels));
  auto part = [&](const Tensor<S>& in, const std::vector<BranchConv<S>>& branches, int stride) {
    Tensor<S> acc;
    for (const auto& b : branches) {
      Tensor<S> y = b.kind == BranchKind::identity
                        ? batch_norm_inference(in, b.bn)
                        : batch_norm_inference(
                              conv2d(in, b.kernel, VecX<S>(), detail::branch_spec(b, stride)), b.bn);
      if (acc.size() == 0)
        acc = std::move(y);
      else
        acc.data += y.data;
    }
    return activation(acc, Act::relu);
  };
  Tensor<S> mid = part(x, p.depthwise, p.stride);
  return part(mid, p.pointwise, 1);
}

// Inference-form forward (Eq-5 style single branches).
template <std::floating_point S>
Tensor<S> repblock_fused_forward(const Tensor<S>& x, const FusedBlockParams<S>& f) {
  if (x.c() != f.in_channels)
    throw InvalidInput("repblock(fused): input has " + std::to_string(x.c()) +
                       " channels, expected " + std::to_string(f.in_channels));
  const ConvSpec dw_spec{3, 3, f.stride, 1, f.dw_full ? 1 : f.in_channels};
  Tensor<S> mid = activation(conv2d(x, f.dw_kernel, f.dw_bias, dw_spec), Act::relu);
  const ConvSpec pw_spec{1, 1, 1, 0, 1};
  return activation(conv2d(mid, f.pw_kernel, f.pw_bias, pw_spec), Act::relu);
}

// ---------------------------------------------------------------------------
// Parameter accounting

// Learnable scalars of the training form: raw kernels plus gamma/beta per BN.
template <std::floating_point S>
long long repblock_train_param_count(const RepBlockTrainParams<S>& p) {
  long long total = 0;
  for (const auto* part : {&p.depthwise, &p.pointwise})
    for (const auto& b : *part) total += b.kernel.size() + 2 * b.bn.channels();
  return total;
}

template <std::floating_point S>
long long repblock_fused_param_count(const FusedBlockParams<S>& f) {
  return f.dw_kernel.size() + f.dw_bias.size() + f.pw_kernel.size() + f.pw_bias.size();
}

// Kernel parameters of the depthwise part with every branch materialized at
// its canonical 3x3 shape; the fused/unfused ratio is exactly
// 1 / (K + 1 + [identity]).
template <std::floating_point S>
long long depthwise_canonical_kernel_params(const RepBlockTrainParams<S>& p, bool fused) {
  const long long canon = static_cast<long long>(p.out_channels) *
                          (p.stride == 2 ? p.in_channels : 1) * 9;
  return fused ? canon : canon * static_cast<long long>(p.depthwise.size());
}

}  // namespace spirdet
