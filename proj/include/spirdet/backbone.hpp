#pragma once

// Model assembly: configuration presets, the parameter structures for the
// stem / four-stage encoder / top-down fusion neck / dual-branch decoder
// heads, deterministic seeded initialization, whole-model fusion, and the
// context-generic trunk forward shared by tracing and plain inference.

#include <random>
#include <string>
#include <vector>

#include "spirdet/autodiff.hpp"
#include "spirdet/repblock.hpp"

namespace spirdet {

struct ModelConfig {
  std::string variant = "lr";  // lr | t | s | m
  std::vector<int> blocks_per_stage;
  std::vector<int> channels_per_stage;
  int K = 4;
  double alpha = 0.005;
  int sparse_convs = 2;
  int input_h = 256, input_w = 256;
  int coarse_ratio = 8;
  int fine_ratio = 4;

  int stages() const { return static_cast<int>(blocks_per_stage.size()); }
  int deepest_ratio() const { return 1 << (stages() - 1); }
};

inline ModelConfig make_config(const std::string& variant) {
  ModelConfig c;
  c.variant = variant;
  if (variant == "lr") {
    c.blocks_per_stage = {4, 2, 2, 1};
    c.channels_per_stage = {16, 32, 64, 128};
    c.sparse_convs = 2;
    c.input_h = c.input_w = 256;
  } else if (variant == "t") {
    c.blocks_per_stage = {1, 2, 2, 1};
    c.channels_per_stage = {16, 32, 64, 96};
    c.sparse_convs = 4;
    c.input_h = c.input_w = 512;
  } else if (variant == "s") {
    c.blocks_per_stage = {1, 4, 4, 1};
    c.channels_per_stage = {16, 32, 64, 128};
    c.sparse_convs = 4;
    c.input_h = c.input_w = 512;
  } else if (variant == "m") {
    c.blocks_per_stage = {2, 6, 8, 1};
    c.channels_per_stage = {16, 32, 64, 128};
    c.sparse_convs = 4;
    c.input_h = c.input_w = 512;
  } else {
    throw InvalidConfig("variant", "unknown variant '" + variant + "'");
  }
  return c;
}

inline void validate_config(const ModelConfig& c) {
  if (c.variant != "lr" && c.variant != "t" && c.variant != "s" && c.variant != "m")
    throw InvalidConfig("variant", "unknown variant '" + c.variant + "'");
  const int stages = c.stages();
  if (stages < 2 || stages > 5) throw InvalidConfig("blocks_per_stage", "expect 2..5 stages");
  for (int b : c.blocks_per_stage)
    if (b < 1) throw InvalidConfig("blocks_per_stage", "block counts must be >= 1");
  if (static_cast<int>(c.channels_per_stage.size()) != stages)
    throw InvalidConfig("channels_per_stage", "must match blocks_per_stage length");
  for (int ch : c.channels_per_stage)
    if (ch < 1) throw InvalidConfig("channels_per_stage", "channel counts must be >= 1");
  if (c.K < 1) throw InvalidConfig("K", "branch count must be >= 1");
  if (!(c.alpha > 0.0) || c.alpha > 1.0) throw InvalidConfig("alpha", "must be in (0, 1]");
  if (c.sparse_convs < 1) throw InvalidConfig("sparse_convs", "must be >= 1");
  if (c.coarse_ratio != 2 * c.fine_ratio)
    throw InvalidConfig("coarse_ratio", "must equal 2 * fine_ratio");
  auto is_pow2 = [](int v) { return v >= 1 && (v & (v - 1)) == 0; };
  if (!is_pow2(c.fine_ratio) || c.fine_ratio > c.deepest_ratio())
    throw InvalidConfig("fine_ratio", "must be a pyramid level (power of two <= deepest)");
  if (c.coarse_ratio > 2 * c.deepest_ratio())
    throw InvalidConfig("coarse_ratio", "exceeds the deepest pyramid level by more than 2x");
  const int div = std::max(c.deepest_ratio(), c.coarse_ratio);
  if (c.input_h < 32 || c.input_w < 32 || c.input_h % div != 0 || c.input_w % div != 0)
    throw InvalidConfig("input_size", "input dims must be >= 32 and divisible by " +
                                          std::to_string(div));
  const double cells = double(c.input_h / c.coarse_ratio) * double(c.input_w / c.coarse_ratio);
  if (c.alpha * cells < 1.0)
    throw InvalidConfig("alpha", "alpha * coarse cells must be >= 1");
}

// ---------------------------------------------------------------------------
// Parameter structures

template <std::floating_point S>
struct ConvBnParams {
  Tensor<S> w;
  BnParams<S> bn;
};

template <std::floating_point S>
struct ConvParams {
  Tensor<S> w;
  VecX<S> b;
};

enum class SparseKind { dw3x3, pw1x1, full3x3 };

inline ConvSpec sparse_kind_spec(SparseKind k, int channels) {
  switch (k) {
    case SparseKind::dw3x3:
      return ConvSpec{3, 3, 1, 1, channels};
    case SparseKind::pw1x1:
      return ConvSpec{1, 1, 1, 0, 1};
    case SparseKind::full3x3:
      return ConvSpec{3, 3, 1, 1, 1};
  }
  throw InvalidStructure("bad sparse kind");
}

template <std::floating_point S>
struct SparseHeadLayer {
  SparseKind kind = SparseKind::dw3x3;
  Tensor<S> w;
  bool has_bn = true;  // final layer carries a bias instead
  BnParams<S> bn;
  VecX<S> b;
};

template <std::floating_point S>
struct Model {
  ModelConfig config;
  ConvBnParams<S> stem;
  std::vector<std::vector<RepBlockTrainParams<S>>> stages;
  std::vector<ConvBnParams<S>> neck;  // index l fuses level l with upsampled level l+1
  ConvBnParams<S> coarse3;
  ConvParams<S> coarse1;
  std::vector<SparseHeadLayer<S>> sparse_layers;  // M alternating + final full 3x3
  ConvParams<S> up1;

  int coarse_channels() const {
    const int lvl = std::min(levels_log2(config.coarse_ratio), config.stages() - 1);
    return config.channels_per_stage[lvl];
  }
  int fine_channels() const {
    return config.channels_per_stage[levels_log2(config.fine_ratio)];
  }
  static int levels_log2(int ratio) {
    int l = 0;
    while ((1 << l) < ratio) ++l;
    return l;
  }
};

// ---------------------------------------------------------------------------
// Deterministic initialization

namespace detail {

template <std::floating_point S>
class ParamInit {
 public:
  explicit ParamInit(uint64_t seed) : rng_(seed) {}

  void kernel(Tensor<S>& t, int fan_in) {
    const S s = S(1) / std::sqrt(static_cast<S>(fan_in));
    std::uniform_real_distribution<S> d(-s, s);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data[i] = d(rng_);
  }

  BnParams<S> bn(int channels) { return BnParams<S>::identity(channels); }

 private:
  std::mt19937_64 rng_;
};

template <std::floating_point S>
BranchConv<S> init_branch(ParamInit<S>& init, BranchKind kind, int in_c, int out_c) {
  BranchConv<S> b;
  b.kind = kind;
  switch (kind) {
    case BranchKind::dw3x3:
      b.kernel = Tensor<S>(out_c, 1, 3, 3);
      init.kernel(b.kernel, 9);
      break;
    case BranchKind::dw1x1:
      b.kernel = Tensor<S>(out_c, 1, 1, 1);
      init.kernel(b.kernel, 1);
      break;
    case BranchKind::full3x3:
      b.kernel = Tensor<S>(out_c, in_c, 3, 3);
      init.kernel(b.kernel, in_c * 9);
      break;
    case BranchKind::pw1x1:
      b.kernel = Tensor<S>(out_c, in_c, 1, 1);
      init.kernel(b.kernel, in_c);
      break;
    case BranchKind::identity:
      break;
  }
  b.bn = init.bn(out_c);
  return b;
}

template <std::floating_point S>
RepBlockTrainParams<S> init_block(ParamInit<S>& init, int in_c, int out_c, int stride, int K) {
  RepBlockTrainParams<S> p;
  p.in_channels = in_c;
  p.out_channels = out_c;
  p.stride = stride;
  p.K = K;
  const bool dw = stride == 1;
  for (int k = 0; k < K; ++k)
    p.depthwise.push_back(
        init_branch(init, dw ? BranchKind::dw3x3 : BranchKind::full3x3, in_c, out_c));
  p.depthwise.push_back(init_branch(init, dw ? BranchKind::dw1x1 : BranchKind::pw1x1, in_c, out_c));
  if (p.has_identity()) p.depthwise.push_back(init_branch(init, BranchKind::identity, in_c, out_c));
  for (int k = 0; k < K; ++k) p.pointwise.push_back(init_branch(init, BranchKind::pw1x1, out_c, out_c));
  if (p.has_identity()) p.pointwise.push_back(init_branch(init, BranchKind::identity, out_c, out_c));
  validate_repblock(p);
  return p;
}

inline int coarse_mid_channels(int coarse_c) { return std::max(8, coarse_c / 4); }

}  // namespace detail

// Builds the training-form model with deterministic seeded initialization.
// Stage 1 keeps full resolution; each later stage downsamples in its first
// block. Output-layer biases start at -4 so the untrained detector predicts
// near-zero probability everywhere.
template <std::floating_point S>
Model<S> build_model(const ModelConfig& config, uint64_t seed) {
  validate_config(config);
  Model<S> m;
  m.config = config;
  detail::ParamInit<S> init(seed);
  const auto& ch = config.channels_per_stage;

  m.stem.w = Tensor<S>(ch[0], 1, 3, 3);
  init.kernel(m.stem.w, 9);
  m.stem.bn = init.bn(ch[0]);

  for (int s = 0; s < config.stages(); ++s) {
    std::vector<RepBlockTrainParams<S>> blocks;
    const int in_c = s == 0 ? ch[0] : ch[s - 1];
    const int stride = s == 0 ? 1 : 2;
    blocks.push_back(detail::init_block(init, in_c, ch[s], stride, config.K));
    for (int b = 1; b < config.blocks_per_stage[s]; ++b)
      blocks.push_back(detail::init_block(init, ch[s], ch[s], 1, config.K));
    m.stages.push_back(std::move(blocks));
  }

  for (int l = 0; l + 1 < config.stages(); ++l) {
    ConvBnParams<S> f;
    f.w = Tensor<S>(ch[l], ch[l + 1] + ch[l], 3, 3);
    init.kernel(f.w, (ch[l + 1] + ch[l]) * 9);
    f.bn = init.bn(ch[l]);
    m.neck.push_back(std::move(f));
  }

  const int cc = m.coarse_channels();
  const int mid = detail::coarse_mid_channels(cc);
  m.coarse3.w = Tensor<S>(mid, cc, 3, 3);
  init.kernel(m.coarse3.w, cc * 9);
  m.coarse3.bn = init.bn(mid);
  m.coarse1.w = Tensor<S>(1, mid, 1, 1);
  init.kernel(m.coarse1.w, mid);
  m.coarse1.b = VecX<S>::Constant(1, S(-4));

  const int fc = m.fine_channels();
  for (int i = 0; i < config.sparse_convs; ++i) {
    SparseHeadLayer<S> layer;
    layer.kind = (i % 2 == 0) ? SparseKind::dw3x3 : SparseKind::pw1x1;
    if (layer.kind == SparseKind::dw3x3) {
      layer.w = Tensor<S>(fc, 1, 3, 3);
      init.kernel(layer.w, 9);
    } else {
      layer.w = Tensor<S>(fc, fc, 1, 1);
      init.kernel(layer.w, fc);
    }
    layer.has_bn = true;
    layer.bn = init.bn(fc);
    m.sparse_layers.push_back(std::move(layer));
  }
  SparseHeadLayer<S> last;
  last.kind = SparseKind::full3x3;
  last.w = Tensor<S>(fc, fc, 3, 3);
  init.kernel(last.w, fc * 9);
  last.has_bn = false;
  last.b = VecX<S>::Zero(fc);
  m.sparse_layers.push_back(std::move(last));

  m.up1.w = Tensor<S>(1, fc, 1, 1);
  init.kernel(m.up1.w, fc);
  m.up1.b = VecX<S>::Constant(1, S(-4));
  return m;
}

// ---------------------------------------------------------------------------
// Parameter registry (fixed walk order; used by the optimizer and weight IO)

template <std::floating_point S>
void register_bn(ParameterStore<S>& ps, const std::string& prefix, BnParams<S>& bn) {
  ps.add(prefix + ".gamma", bn.gamma, ParamKind::bn_gamma);
  ps.add(prefix + ".beta", bn.beta, ParamKind::bn_beta);
  ps.add(prefix + ".mean", bn.running_mean, ParamKind::bn_running_mean);
  ps.add(prefix + ".var", bn.running_var, ParamKind::bn_running_var);
}

template <std::floating_point S>
void register_params(Model<S>& m, ParameterStore<S>& ps) {
  ps.add("stem.w", m.stem.w, ParamKind::kernel);
  register_bn(ps, "stem.bn", m.stem.bn);
  for (size_t s = 0; s < m.stages.size(); ++s) {
    for (size_t b = 0; b < m.stages[s].size(); ++b) {
      auto& blk = m.stages[s][b];
      const std::string base = "enc.s" + std::to_string(s) + ".b" + std::to_string(b);
      for (size_t i = 0; i < blk.depthwise.size(); ++i) {
        auto& br = blk.depthwise[i];
        const std::string bb = base + ".dw" + std::to_string(i);
        if (br.kind != BranchKind::identity) ps.add(bb + ".w", br.kernel, ParamKind::kernel);
        register_bn(ps, bb + ".bn", br.bn);
      }
      for (size_t i = 0; i < blk.pointwise.size(); ++i) {
        auto& br = blk.pointwise[i];
        const std::string bb = base + ".pw" + std::to_string(i);
        if (br.kind != BranchKind::identity) ps.add(bb + ".w", br.kernel, ParamKind::kernel);
        register_bn(ps, bb + ".bn", br.bn);
      }
    }
  }
  for (size_t l = 0; l < m.neck.size(); ++l) {
    ps.add("neck." + std::to_string(l) + ".w", m.neck[l].w, ParamKind::kernel);
    register_bn(ps, "neck." + std::to_string(l) + ".bn", m.neck[l].bn);
  }
  ps.add("coarse.c3.w", m.coarse3.w, ParamKind::kernel);
  register_bn(ps, "coarse.c3.bn", m.coarse3.bn);
  ps.add("coarse.c1.w", m.coarse1.w, ParamKind::kernel);
  ps.add("coarse.c1.b", m.coarse1.b, ParamKind::bias);
  for (size_t i = 0; i < m.sparse_layers.size(); ++i) {
    auto& layer = m.sparse_layers[i];
    const std::string base = "sparse." + std::to_string(i);
    ps.add(base + ".w", layer.w, ParamKind::kernel);
    if (layer.has_bn)
      register_bn(ps, base + ".bn", layer.bn);
    else
      ps.add(base + ".b", layer.b, ParamKind::bias);
  }
  ps.add("up.w", m.up1.w, ParamKind::kernel);
  ps.add("up.b", m.up1.b, ParamKind::bias);
}

// ---------------------------------------------------------------------------
// Fused (inference) model

template <std::floating_point S>
struct FusedSparseLayer {
  SparseKind kind = SparseKind::dw3x3;
  Tensor<S> w;
  VecX<S> b;
  bool relu_after = true;
};

template <std::floating_point S>
struct FusedModel {
  ModelConfig config;
  ConvParams<S> stem;
  std::vector<std::vector<FusedBlockParams<S>>> stages;
  std::vector<ConvParams<S>> neck;
  ConvParams<S> coarse3, coarse1;
  std::vector<FusedSparseLayer<S>> sparse_layers;
  ConvParams<S> up1;
};

template <std::floating_point S>
ConvParams<S> fold_conv_bn(const Tensor<S>& w, const BnParams<S>& bn) {
  BranchConv<S> b;
  b.kind = BranchKind::full3x3;  // kind is irrelevant to the folding algebra
  b.kernel = w;
  b.bn = bn;
  auto [k, bias] = fold_bn(b);
  return ConvParams<S>{std::move(k), std::move(bias)};
}

template <std::floating_point S>
FusedModel<S> fuse_model(const Model<S>& m) {
  FusedModel<S> f;
  f.config = m.config;
  f.stem = fold_conv_bn(m.stem.w, m.stem.bn);
  for (const auto& stage : m.stages) {
    std::vector<FusedBlockParams<S>> blocks;
    for (const auto& blk : stage) blocks.push_back(fuse_block(blk));
    f.stages.push_back(std::move(blocks));
  }
  for (const auto& neck : m.neck) f.neck.push_back(fold_conv_bn(neck.w, neck.bn));
  f.coarse3 = fold_conv_bn(m.coarse3.w, m.coarse3.bn);
  f.coarse1 = ConvParams<S>{m.coarse1.w, m.coarse1.b};
  for (size_t i = 0; i < m.sparse_layers.size(); ++i) {
    const auto& layer = m.sparse_layers[i];
    FusedSparseLayer<S> out;
    out.kind = layer.kind;
    out.relu_after = layer.has_bn;
    if (layer.has_bn) {
      auto folded = fold_conv_bn(layer.w, layer.bn);
      out.w = std::move(folded.w);
      out.b = std::move(folded.b);
    } else {
      out.w = layer.w;
      out.b = layer.b;
    }
    f.sparse_layers.push_back(std::move(out));
  }
  f.up1 = ConvParams<S>{m.up1.w, m.up1.b};
  return f;
}

// ---------------------------------------------------------------------------
// Pyramid features and the trunk forward

template <std::floating_point S>
struct PyramidFeatures {
  std::vector<Tensor<S>> maps;  // index l is at 1/2^l of input resolution
};

// Stem + encoder over any context; returns one ref per stage (last block).
template <class Ctx, std::floating_point S>
std::vector<typename Ctx::Ref> encoder_fwd(Ctx& cx, Model<S>& m, typename Ctx::Ref x) {
  auto stem = cx.relu(cx.bn(cx.conv(x, m.stem.w, nullptr, conv_spec(3, 1, 1)), m.stem.bn));
  std::vector<typename Ctx::Ref> pyramid;
  auto cur = stem;
  for (auto& stage : m.stages) {
    for (auto& blk : stage) cur = repblock_fwd(cx, blk, cur);
    pyramid.push_back(cur);
  }
  return pyramid;
}

template <class Ctx, std::floating_point S>
typename Ctx::Ref repblock_fwd(Ctx& cx, RepBlockTrainParams<S>& p, typename Ctx::Ref x) {
  auto part = [&cx](typename Ctx::Ref in, std::vector<BranchConv<S>>& branches, int stride) {
    typename Ctx::Ref acc{};
    bool first = true;
    for (auto& b : branches) {
      typename Ctx::Ref y =
          b.kind == BranchKind::identity
              ? cx.bn(in, b.bn)
              : cx.bn(cx.conv(in, b.kernel, nullptr, detail::branch_spec(b, stride)), b.bn);
      acc = first ? y : cx.add(acc, y);
      first = false;
    }
    return cx.relu(acc);
  };
  auto mid = part(x, p.depthwise, p.stride);
  return part(mid, p.pointwise, 1);
}

// Top-down lightweight fusion: deepest passes through; every shallower level
// gets upsample(next) ++ self -> 3x3 conv/BN/ReLU -> added back onto itself.
template <class Ctx, std::floating_point S>
std::vector<typename Ctx::Ref> neck_fwd(Ctx& cx, Model<S>& m,
                                        std::vector<typename Ctx::Ref> pyramid) {
  for (int l = static_cast<int>(pyramid.size()) - 2; l >= 0; --l) {
    auto up = cx.bilinear(pyramid[l + 1], 2);
    auto cat = cx.concat(up, pyramid[l]);
    auto mixed = cx.relu(cx.bn(cx.conv(cat, m.neck[l].w, nullptr, conv_spec(3, 1, 1)), m.neck[l].bn));
    pyramid[l] = cx.add(pyramid[l], mixed);
  }
  return pyramid;
}

// --- eager public wrappers -------------------------------------------------

template <std::floating_point S>
Tensor<S> input_stem(const Tensor<S>& x, Model<S>& m) {
  if (x.c() != 1) throw InvalidInput("input_stem: expects a single-channel image");
  return activation(
      batch_norm_inference(conv2d(x, m.stem.w, VecX<S>(), conv_spec(3, 1, 1)), m.stem.bn),
      Act::relu);
}

template <std::floating_point S>
PyramidFeatures<S> encoder_forward(const Tensor<S>& x, Model<S>& m) {
  const int div = m.config.deepest_ratio();
  if (x.h() % div != 0 || x.w() % div != 0)
    throw InvalidInput("encoder_forward: input dims must be divisible by " + std::to_string(div));
  EagerCtx<S> cx;
  auto maps = encoder_fwd(cx, m, x);
  return PyramidFeatures<S>{std::move(maps)};
}

template <std::floating_point S>
PyramidFeatures<S> neck_forward(const PyramidFeatures<S>& pyramid, Model<S>& m) {
  if (pyramid.maps.size() != m.neck.size() + 1)
    throw InvalidStructure("neck_forward: pyramid levels disagree with neck parameters");
  for (size_t l = 0; l + 1 < pyramid.maps.size(); ++l)
    if (pyramid.maps[l].c() != m.config.channels_per_stage[l])
      throw InvalidStructure("neck_forward: channel mismatch at level " + std::to_string(l));
  EagerCtx<S> cx;
  return PyramidFeatures<S>{neck_fwd(cx, m, pyramid.maps)};
}

// --- fused eager trunk -------------------------------------------------------

template <std::floating_point S>
PyramidFeatures<S> fused_encoder_forward(const Tensor<S>& x, const FusedModel<S>& m) {
  Tensor<S> cur = activation(conv2d(x, m.stem.w, m.stem.b, conv_spec(3, 1, 1)), Act::relu);
  PyramidFeatures<S> out;
  for (const auto& stage : m.stages) {
    for (const auto& blk : stage) cur = repblock_fused_forward(cur, blk);
    out.maps.push_back(cur);
  }
  return out;
}

template <std::floating_point S>
PyramidFeatures<S> fused_neck_forward(const PyramidFeatures<S>& pyramid, const FusedModel<S>& m) {
  std::vector<Tensor<S>> maps = pyramid.maps;
  for (int l = static_cast<int>(maps.size()) - 2; l >= 0; --l) {
    Tensor<S> up = bilinear_upsample(maps[l + 1], 2);
    Tensor<S> cat = concat_channels(up, maps[l]);
    Tensor<S> mixed = activation(conv2d(cat, m.neck[l].w, m.neck[l].b, conv_spec(3, 1, 1)), Act::relu);
    maps[l] = add(maps[l], mixed);
  }
  return PyramidFeatures<S>{std::move(maps)};
}

// ---------------------------------------------------------------------------
// Parameter accounting (learnable scalars)

template <std::floating_point S>
long long model_train_param_count(const Model<S>& m) {
  long long total = m.stem.w.size() + 2 * m.stem.bn.channels();
  for (const auto& stage : m.stages)
    for (const auto& blk : stage) total += repblock_train_param_count(blk);
  for (const auto& n : m.neck) total += n.w.size() + 2 * n.bn.channels();
  total += m.coarse3.w.size() + 2 * m.coarse3.bn.channels();
  total += m.coarse1.w.size() + m.coarse1.b.size();
  for (const auto& l : m.sparse_layers)
    total += l.w.size() + (l.has_bn ? 2 * l.bn.channels() : l.b.size());
  total += m.up1.w.size() + m.up1.b.size();
  return total;
}

template <std::floating_point S>
long long model_fused_param_count(const FusedModel<S>& m) {
  auto conv_count = [](const ConvParams<S>& c) { return c.w.size() + c.b.size(); };
  long long total = conv_count(m.stem);
  for (const auto& stage : m.stages)
    for (const auto& blk : stage) total += repblock_fused_param_count(blk);
  for (const auto& n : m.neck) total += conv_count(n);
  total += conv_count(m.coarse3) + conv_count(m.coarse1);
  for (const auto& l : m.sparse_layers) total += l.w.size() + l.b.size();
  total += conv_count(m.up1);
  return total;
}

}  // namespace spirdet
