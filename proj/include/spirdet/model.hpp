#pragma once

// Whole-model forward passes: the eager training-form path (inference BN),
// the fused path, and the traced path used for optimization. The decoder
// runs per image since every image owns its TOP-K active set; TOP-K itself
// is a gradient barrier, so the coarse branch learns only from its own loss.

#include <memory>

#include "spirdet/dbsd.hpp"

namespace spirdet {

template <std::floating_point S>
struct ModelOutputs {
  Tensor<S> coarse;  // V: (N, 1, H/coarse_ratio, W/coarse_ratio)
  Tensor<S> output;  // O: (N, 1, H, W)
};

namespace detail {

// Decoder inputs from the fused pyramid: the fine map is the pyramid level at
// 1/fine_ratio; the coarse map is the level at 1/coarse_ratio, or a stride-2
// maxpool of the deepest level when the ratio reaches past the pyramid.
template <std::floating_point S>
std::pair<Tensor<S>, Tensor<S>> decoder_inputs(const std::vector<Tensor<S>>& maps,
                                               const ModelConfig& cfg) {
  const int fine_lvl = Model<S>::levels_log2(cfg.fine_ratio);
  const int coarse_lvl = Model<S>::levels_log2(cfg.coarse_ratio);
  Tensor<S> fine = maps.at(fine_lvl);
  Tensor<S> coarse = coarse_lvl < static_cast<int>(maps.size())
                         ? maps.at(coarse_lvl)
                         : maxpool2d(maps.back(), 2, 2);
  return {std::move(coarse), std::move(fine)};
}

}  // namespace detail

// Dual-branch decode of one image: coarse head -> TOP-K -> active index ->
// sparse head -> upsample block. Returns (V, O).
template <std::floating_point S>
std::pair<Tensor<S>, Tensor<S>> dbsd_forward(const Tensor<S>& p_coarse, const Tensor<S>& p_fine,
                                             double alpha, const Model<S>& m) {
  if (p_coarse.n() != 1 || p_fine.n() != 1)
    throw InvalidInput("dbsd_forward: expects batch-1 feature maps");
  if (p_fine.h() != 2 * p_coarse.h() || p_fine.w() != 2 * p_coarse.w())
    throw InvalidInput("dbsd_forward: fine map must be 2x the coarse map");
  Tensor<S> v = coarse_head(p_coarse, m.coarse3, m.coarse1);
  SparseMask<S> mask = sparse_sample(v, alpha);
  ActiveSiteIndex idx = build_active_index(mask, m.config.coarse_ratio / m.config.fine_ratio);
  SparseFeature<S> feat = sparse_head(p_fine, idx, m.sparse_layers);
  Tensor<S> o = upsample_block(feat, idx, m.up1, m.config.fine_ratio);
  return {std::move(v), std::move(o)};
}

template <std::floating_point S>
std::pair<Tensor<S>, Tensor<S>> dbsd_forward(const Tensor<S>& p_coarse, const Tensor<S>& p_fine,
                                             double alpha, const FusedModel<S>& m) {
  if (p_coarse.n() != 1 || p_fine.n() != 1)
    throw InvalidInput("dbsd_forward: expects batch-1 feature maps");
  if (p_fine.h() != 2 * p_coarse.h() || p_fine.w() != 2 * p_coarse.w())
    throw InvalidInput("dbsd_forward: fine map must be 2x the coarse map");
  Tensor<S> v = coarse_head(p_coarse, m.coarse3, m.coarse1);
  SparseMask<S> mask = sparse_sample(v, alpha);
  ActiveSiteIndex idx = build_active_index(mask, m.config.coarse_ratio / m.config.fine_ratio);
  SparseFeature<S> feat = sparse_head(p_fine, idx, m.sparse_layers);
  Tensor<S> o = upsample_block(feat, idx, m.up1, m.config.fine_ratio);
  return {std::move(v), std::move(o)};
}

// Training-form inference (running-statistics BN) over a batch.
template <std::floating_point S>
ModelOutputs<S> model_forward(const Tensor<S>& x, Model<S>& m, double alpha_override = -1.0) {
  const double alpha = alpha_override > 0 ? alpha_override : m.config.alpha;
  EagerCtx<S> cx;
  auto pyramid = neck_fwd(cx, m, encoder_fwd(cx, m, x));
  ModelOutputs<S> out;
  std::vector<Tensor<S>> vs, os;
  for (int n = 0; n < x.n(); ++n) {
    std::vector<Tensor<S>> maps;
    for (auto& p : pyramid) maps.push_back(slice_batch(p, n));
    auto [pc, pf] = detail::decoder_inputs(maps, m.config);
    auto [v, o] = dbsd_forward(pc, pf, alpha, m);
    vs.push_back(std::move(v));
    os.push_back(std::move(o));
  }
  std::vector<const Tensor<S>*> vp, op;
  for (auto& t : vs) vp.push_back(&t);
  for (auto& t : os) op.push_back(&t);
  out.coarse = stack_batch(vp);
  out.output = stack_batch(op);
  return out;
}

template <std::floating_point S>
ModelOutputs<S> fused_model_forward(const Tensor<S>& x, const FusedModel<S>& m,
                                    double alpha_override = -1.0) {
  const double alpha = alpha_override > 0 ? alpha_override : m.config.alpha;
  PyramidFeatures<S> pyr = fused_neck_forward(fused_encoder_forward(x, m), m);
  ModelOutputs<S> out;
  std::vector<Tensor<S>> vs, os;
  for (int n = 0; n < x.n(); ++n) {
    std::vector<Tensor<S>> maps;
    for (auto& p : pyr.maps) maps.push_back(slice_batch(p, n));
    auto [pc, pf] = detail::decoder_inputs(maps, m.config);
    auto [v, o] = dbsd_forward(pc, pf, alpha, m);
    vs.push_back(std::move(v));
    os.push_back(std::move(o));
  }
  std::vector<const Tensor<S>*> vp, op;
  for (auto& t : vs) vp.push_back(&t);
  for (auto& t : os) op.push_back(&t);
  out.coarse = stack_batch(vp);
  out.output = stack_batch(op);
  return out;
}

// ---------------------------------------------------------------------------
// Traced decoder ops (site tensors are carried as (1, C, 1, S) nodes)

namespace traced {

template <std::floating_point S>
Tensor<S> feature_to_node(const SparseFeature<S>& f) {
  Tensor<S> t(1, f.channels, 1, f.n_sites);
  t.data = f.data;
  return t;
}

template <std::floating_point S>
SparseFeature<S> node_to_feature(const Tensor<S>& t) {
  SparseFeature<S> f;
  f.channels = t.c();
  f.n_sites = t.w();
  f.data = t.data;
  return f;
}

// First sparse layer inside the tape: dense input parent, weight parameter.
template <std::floating_point S>
typename Tape<S>::Ref sparse_first_op(Tape<S>& t, typename Tape<S>::Ref x, Tensor<S>& w,
                                      VecX<S>* bias, const ConvSpec& sp,
                                      std::shared_ptr<const ActiveSiteIndex> idx) {
  auto wr = t.param(w);
  typename Tape<S>::Ref br;
  if (bias && bias->size()) br = t.param_vec(*bias);
  static const VecX<S> no_bias;
  SparseFeature<S> y =
      sparse_conv(t.value(x), t.val(wr), br.valid() ? t.value(br).data : no_bias, sp, *idx);
  std::vector<typename Tape<S>::Ref> parents{x, wr};
  if (br.valid()) parents.push_back(br);
  const auto xshape = t.value(x).shape;
  auto back = [x, wr, br, sp, idx, xshape](Tape<S>& tt, const Tensor<S>& g) {
    const Tensor<S>& xv = tt.val(x);
    const Tensor<S>& wv = tt.val(wr);
    const int cout = wv.n(), cin_g = wv.c(), cout_g = cout / sp.groups;
    const int S_n = static_cast<int>(idx->sites.size());
    Tensor<S> dx(xshape[0], xshape[1], xshape[2], xshape[3]);
    Tensor<S> dw(wv.shape[0], wv.shape[1], wv.shape[2], wv.shape[3]);
    for (int s = 0; s < S_n; ++s) {
      const auto [i, j] = idx->sites[s];
      for (int oc = 0; oc < cout; ++oc) {
        const S gv = g.data[static_cast<Eigen::Index>(oc) * S_n + s];
        const int grp = oc / cout_g;
        for (int icl = 0; icl < cin_g; ++icl) {
          const int ic = grp * cin_g + icl;
          for (int kh = 0; kh < sp.kh; ++kh) {
            const int y2 = i + kh - sp.pad;
            if (y2 < 0 || y2 >= idx->height) continue;
            for (int kw = 0; kw < sp.kw; ++kw) {
              const int x2 = j + kw - sp.pad;
              if (x2 < 0 || x2 >= idx->width) continue;
              dx.at(0, ic, y2, x2) += wv.at(oc, icl, kh, kw) * gv;
              dw.at(oc, icl, kh, kw) += xv.at(0, ic, y2, x2) * gv;
            }
          }
        }
      }
    }
    if (tt.needs(x)) tt.accum(x.id, std::move(dx));
    if (tt.needs(wr)) tt.accum(wr.id, std::move(dw));
    if (br.valid() && tt.needs(br)) {
      Tensor<S> db(1, cout, 1, 1);
      for (int oc = 0; oc < cout; ++oc)
        db.data[oc] = g.data.segment(static_cast<Eigen::Index>(oc) * S_n, S_n).sum();
      tt.accum(br.id, std::move(db));
    }
  };
  return t.custom(feature_to_node(y), parents, "sparse_conv(first)", back);
}

// Interior sparse layer inside the tape.
template <std::floating_point S>
typename Tape<S>::Ref sparse_interior_op(Tape<S>& t, typename Tape<S>::Ref x, Tensor<S>& w,
                                         VecX<S>* bias, const ConvSpec& sp,
                                         std::shared_ptr<const ActiveSiteIndex> idx) {
  auto wr = t.param(w);
  typename Tape<S>::Ref br;
  if (bias && bias->size()) br = t.param_vec(*bias);
  static const VecX<S> no_bias;
  SparseFeature<S> in = node_to_feature(t.value(x));
  SparseFeature<S> y = sparse_conv(in, t.val(wr), br.valid() ? t.value(br).data : no_bias, sp, *idx);
  std::vector<typename Tape<S>::Ref> parents{x, wr};
  if (br.valid()) parents.push_back(br);
  auto back = [x, wr, br, sp, idx](Tape<S>& tt, const Tensor<S>& g) {
    const Tensor<S>& xv = tt.val(x);
    const Tensor<S>& wv = tt.val(wr);
    const int cout = wv.n(), cin_g = wv.c(), cout_g = cout / sp.groups;
    const int S_n = static_cast<int>(idx->sites.size());
    Tensor<S> dx = xv.like_zeros();
    Tensor<S> dw(wv.shape[0], wv.shape[1], wv.shape[2], wv.shape[3]);
    auto xval = [&](int c, int r) { return xv.data[static_cast<Eigen::Index>(c) * S_n + r]; };
    for (int s = 0; s < S_n; ++s) {
      const auto [i, j] = idx->sites[s];
      for (int oc = 0; oc < cout; ++oc) {
        const S gv = g.data[static_cast<Eigen::Index>(oc) * S_n + s];
        const int grp = oc / cout_g;
        for (int icl = 0; icl < cin_g; ++icl) {
          const int ic = grp * cin_g + icl;
          for (int kh = 0; kh < sp.kh; ++kh) {
            const int y2 = i + kh - sp.pad;
            if (y2 < 0 || y2 >= idx->height) continue;
            for (int kw = 0; kw < sp.kw; ++kw) {
              const int x2 = j + kw - sp.pad;
              if (x2 < 0 || x2 >= idx->width) continue;
              const int r = idx->rank_at(y2, x2);
              if (r < 0) continue;
              dx.data[static_cast<Eigen::Index>(ic) * S_n + r] += wv.at(oc, icl, kh, kw) * gv;
              dw.at(oc, icl, kh, kw) += xval(ic, r) * gv;
            }
          }
        }
      }
    }
    if (tt.needs(x)) tt.accum(x.id, std::move(dx));
    if (tt.needs(wr)) tt.accum(wr.id, std::move(dw));
    if (br.valid() && tt.needs(br)) {
      Tensor<S> db(1, cout, 1, 1);
      for (int oc = 0; oc < cout; ++oc)
        db.data[oc] = g.data.segment(static_cast<Eigen::Index>(oc) * S_n, S_n).sum();
      tt.accum(br.id, std::move(db));
    }
  };
  return t.custom(feature_to_node(y), parents, "sparse_conv(interior)", back);
}

// Scatter site values to a dense map; adjoint gathers at the sites.
template <std::floating_point S>
typename Tape<S>::Ref scatter_op(Tape<S>& t, typename Tape<S>::Ref x,
                                 std::shared_ptr<const ActiveSiteIndex> idx) {
  SparseFeature<S> f = node_to_feature(t.value(x));
  Tensor<S> dense = scatter_sites(f, *idx);
  auto back = [x, idx](Tape<S>& tt, const Tensor<S>& g) {
    if (!tt.needs(x)) return;
    const Tensor<S>& xv = tt.val(x);
    const int S_n = xv.w();
    Tensor<S> dx = xv.like_zeros();
    for (int c = 0; c < xv.c(); ++c) {
      const S* plane = g.plane(0, c);
      for (int s = 0; s < S_n; ++s) {
        const auto [i, j] = idx->sites[s];
        dx.data[static_cast<Eigen::Index>(c) * S_n + s] =
            plane[static_cast<Eigen::Index>(i) * idx->width + j];
      }
    }
    tt.accum(x.id, std::move(dx));
  };
  return t.custom(std::move(dense), {x}, "scatter_sites", back);
}

}  // namespace traced

// Traced full-model forward for training and gradient checks.
template <std::floating_point S>
struct TracedOutputs {
  typename Tape<S>::Ref coarse;
  typename Tape<S>::Ref output;
  std::vector<std::shared_ptr<const ActiveSiteIndex>> indices;  // per image
};

template <std::floating_point S>
TracedOutputs<S> trace_model(Tape<S>& t, Model<S>& m, typename Tape<S>::Ref x,
                             double alpha_override = -1.0) {
  const double alpha = alpha_override > 0 ? alpha_override : m.config.alpha;
  auto pyramid = neck_fwd(t, m, encoder_fwd(t, m, x));
  const int batch = t.value(x).n();
  const int fine_lvl = Model<S>::levels_log2(m.config.fine_ratio);
  const int coarse_lvl = Model<S>::levels_log2(m.config.coarse_ratio);
  const int up_factor = m.config.coarse_ratio / m.config.fine_ratio;

  TracedOutputs<S> out;
  std::vector<typename Tape<S>::Ref> vs, os;
  for (int n = 0; n < batch; ++n) {
    auto pf = t.slice_batch_op(pyramid[fine_lvl], n);
    typename Tape<S>::Ref pc;
    if (coarse_lvl < static_cast<int>(pyramid.size())) {
      pc = t.slice_batch_op(pyramid[coarse_lvl], n);
    } else {
      // maxpool of the deepest level; adjoint routes to the window max
      auto deep = t.slice_batch_op(pyramid.back(), n);
      Tensor<S> pooled = maxpool2d(t.value(deep), 2, 2);
      auto back = [deep](Tape<S>& tt, const Tensor<S>& g) {
        if (tt.needs(deep)) tt.accum(deep.id, maxpool2d_backward(tt.val(deep), g, 2));
      };
      pc = t.custom(std::move(pooled), {deep}, "maxpool2d", back);
    }
    // coarse head
    auto mid = t.relu(t.bn(t.conv(pc, m.coarse3.w, nullptr, conv_spec(3, 1, 1)), m.coarse3.bn));
    auto v = t.sigmoid(t.conv(mid, m.coarse1.w, &m.coarse1.b, conv_spec(1)));
    // TOP-K barrier: the mask is host data, no gradient flows through it
    SparseMask<S> mask = sparse_sample(t.value(v), alpha);
    auto idx = std::make_shared<const ActiveSiteIndex>(build_active_index(mask, up_factor));
    out.indices.push_back(idx);
    // sparse head
    typename Tape<S>::Ref cur;
    for (size_t i = 0; i < m.sparse_layers.size(); ++i) {
      auto& l = m.sparse_layers[i];
      const ConvSpec sp = sparse_kind_spec(l.kind, l.w.n());
      VecX<S>* bias = l.has_bn ? nullptr : &l.b;
      cur = i == 0 ? traced::sparse_first_op(t, pf, l.w, bias, sp, idx)
                   : traced::sparse_interior_op(t, cur, l.w, bias, sp, idx);
      if (l.has_bn) cur = t.relu(t.bn(cur, l.bn));
    }
    auto dense = traced::scatter_op(t, cur, idx);
    auto one = t.conv(dense, m.up1.w, &m.up1.b, conv_spec(1));
    auto o = t.sigmoid(t.bilinear(one, m.config.fine_ratio));
    vs.push_back(v);
    os.push_back(o);
  }
  out.coarse = t.stack_batch_op(vs);
  out.output = t.stack_batch_op(os);
  return out;
}

}  // namespace spirdet
