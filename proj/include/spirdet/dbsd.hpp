#pragma once

// Dual-branch sparse decoder machinery: TOP-K sparse sampling of the coarse
// probability map, the active-site index mapping fine coordinates to dense
// ranks, submanifold sparse convolution (fixed active set; inactive
// neighbors read as zero), the dense masked oracle used by tests and the
// benchmark, and the upsample block producing the full-resolution output.
//
// Sparse kernels accumulate each output element in the same order as the
// dense conv2d (bias, in-channel, kernel row, kernel column), so agreement
// with the dense oracle at active sites is exact.

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "spirdet/backbone.hpp"

namespace spirdet {

template <std::floating_point S>
struct SparseMask {
  Tensor<S> bits;  // (1, 1, Hc, Wc), entries {0,1}
  int k = 0;
};

// Exactly ceil(alpha * cells) ones at the largest values; ties prefer the
// smaller row-major index.
template <std::floating_point S>
SparseMask<S> sparse_sample(const Tensor<S>& v, double alpha) {
  if (!(alpha > 0.0) || alpha > 1.0) throw InvalidInput("sparse_sample: alpha must be in (0,1]");
  if (v.n() != 1 || v.c() != 1) throw InvalidInput("sparse_sample: expects a (1,1,H,W) map");
  const Eigen::Index cells = v.plane_size();
  const int k = static_cast<int>(std::ceil(alpha * static_cast<double>(cells)));
  std::vector<int> order(cells);
  for (Eigen::Index i = 0; i < cells; ++i) order[i] = static_cast<int>(i);
  const S* data = v.data.data();
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [data](int a, int b) {
    if (data[a] != data[b]) return data[a] > data[b];
    return a < b;
  });
  SparseMask<S> m;
  m.bits = Tensor<S>(1, 1, v.h(), v.w());
  m.k = k;
  for (int i = 0; i < k; ++i) m.bits.data[order[i]] = S(1);
  return m;
}

// Fine-resolution active coordinates with a dense rank lookup.
struct ActiveSiteIndex {
  int height = 0, width = 0;  // fine map dims
  int upsample_factor = 1;
  std::vector<std::pair<int, int>> sites;  // sorted row-major
  std::vector<int> rank;                   // height*width, -1 where inactive

  int n_sites() const { return static_cast<int>(sites.size()); }
  bool active(int i, int j) const { return rank[static_cast<size_t>(i) * width + j] >= 0; }
  int rank_at(int i, int j) const { return rank[static_cast<size_t>(i) * width + j]; }

  // Builds the lookup from an arbitrary coordinate list (sorts and dedupes).
  static ActiveSiteIndex from_sites(std::vector<std::pair<int, int>> coords, int height, int width,
                                    int upsample_factor) {
    ActiveSiteIndex idx;
    idx.height = height;
    idx.width = width;
    idx.upsample_factor = upsample_factor;
    for (const auto& [i, j] : coords)
      if (i < 0 || i >= height || j < 0 || j >= width)
        throw InvalidInput("active site (" + std::to_string(i) + "," + std::to_string(j) +
                           ") out of map bounds");
    std::sort(coords.begin(), coords.end());
    coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    idx.sites = std::move(coords);
    idx.rank.assign(static_cast<size_t>(height) * width, -1);
    for (size_t r = 0; r < idx.sites.size(); ++r)
      idx.rank[static_cast<size_t>(idx.sites[r].first) * width + idx.sites[r].second] =
          static_cast<int>(r);
    return idx;
  }
};

// Expands each set coarse cell (i, j) to the fine block
// [f*i, f*i+f) x [f*j, f*j+f).
template <std::floating_point S>
ActiveSiteIndex build_active_index(const SparseMask<S>& mask, int upsample_factor) {
  if (upsample_factor < 1) throw InvalidInput("build_active_index: factor must be >= 1");
  const int hc = mask.bits.h(), wc = mask.bits.w();
  std::vector<std::pair<int, int>> coords;
  coords.reserve(static_cast<size_t>(mask.k) * upsample_factor * upsample_factor);
  for (int i = 0; i < hc; ++i)
    for (int j = 0; j < wc; ++j)
      if (mask.bits.at(0, 0, i, j) != S(0))
        for (int di = 0; di < upsample_factor; ++di)
          for (int dj = 0; dj < upsample_factor; ++dj)
            coords.emplace_back(i * upsample_factor + di, j * upsample_factor + dj);
  return ActiveSiteIndex::from_sites(std::move(coords), hc * upsample_factor, wc * upsample_factor,
                                     upsample_factor);
}

// Values at active sites only; data is channels x n_sites row-major.
template <std::floating_point S>
struct SparseFeature {
  int channels = 0;
  int n_sites = 0;
  VecX<S> data;

  static SparseFeature zeros(int channels, int n_sites) {
    SparseFeature f;
    f.channels = channels;
    f.n_sites = n_sites;
    f.data = VecX<S>::Zero(static_cast<Eigen::Index>(channels) * n_sites);
    return f;
  }
  S& at(int c, int s) { return data[static_cast<Eigen::Index>(c) * n_sites + s]; }
  S at(int c, int s) const { return data[static_cast<Eigen::Index>(c) * n_sites + s]; }
};

namespace detail {

inline void check_sparse_spec(const ConvSpec& sp) {
  if (sp.stride != 1) throw InvalidInput("sparse_conv: stride must be 1");
  if (!((sp.kh == 3 && sp.kw == 3 && sp.pad == 1) || (sp.kh == 1 && sp.kw == 1 && sp.pad == 0)))
    throw InvalidInput("sparse_conv: kernel must be 3x3 (pad 1) or 1x1 (pad 0)");
}

}  // namespace detail

// First sparse layer: gathers dense neighborhoods from the dense input map.
template <std::floating_point S>
SparseFeature<S> sparse_conv(const Tensor<S>& dense, const Tensor<S>& w, const VecX<S>& bias,
                             const ConvSpec& sp, const ActiveSiteIndex& idx) {
  detail::check_sparse_spec(sp);
  if (dense.n() != 1) throw InvalidInput("sparse_conv: expects a batch-1 input");
  if (dense.h() != idx.height || dense.w() != idx.width)
    throw InvalidInput("sparse_conv: index size disagrees with the input map");
  const int cin = dense.c(), cout = w.n();
  const int cin_g = cin / sp.groups, cout_g = cout / sp.groups;
  if (w.c() != cin_g) throw InvalidInput("sparse_conv: weight channel mismatch");
  SparseFeature<S> out = SparseFeature<S>::zeros(cout, idx.n_sites());
  for (int s = 0; s < idx.n_sites(); ++s) {
    const auto [i, j] = idx.sites[s];
    for (int oc = 0; oc < cout; ++oc) {
      const int g = oc / cout_g;
      S acc = bias.size() ? bias[oc] : S(0);
      for (int icl = 0; icl < cin_g; ++icl) {
        const int ic = g * cin_g + icl;
        for (int kh = 0; kh < sp.kh; ++kh) {
          const int y = i + kh - sp.pad;
          if (y < 0 || y >= idx.height) continue;
          for (int kw = 0; kw < sp.kw; ++kw) {
            const int x = j + kw - sp.pad;
            if (x < 0 || x >= idx.width) continue;
            acc += w.at(oc, icl, kh, kw) * dense.at(0, ic, y, x);
          }
        }
      }
      out.at(oc, s) = acc;
    }
  }
  return out;
}

// Interior sparse layer: submanifold semantics over a fixed active set;
// inactive neighbors read as zero.
template <std::floating_point S>
SparseFeature<S> sparse_conv(const SparseFeature<S>& in, const Tensor<S>& w, const VecX<S>& bias,
                             const ConvSpec& sp, const ActiveSiteIndex& idx) {
  detail::check_sparse_spec(sp);
  if (in.n_sites != idx.n_sites())
    throw InvalidInput("sparse_conv: feature sites disagree with the index");
  const int cin = in.channels, cout = w.n();
  const int cin_g = cin / sp.groups, cout_g = cout / sp.groups;
  if (w.c() != cin_g) throw InvalidInput("sparse_conv: weight channel mismatch");
  SparseFeature<S> out = SparseFeature<S>::zeros(cout, idx.n_sites());
  for (int s = 0; s < idx.n_sites(); ++s) {
    const auto [i, j] = idx.sites[s];
    for (int oc = 0; oc < cout; ++oc) {
      const int g = oc / cout_g;
      S acc = bias.size() ? bias[oc] : S(0);
      for (int icl = 0; icl < cin_g; ++icl) {
        const int ic = g * cin_g + icl;
        for (int kh = 0; kh < sp.kh; ++kh) {
          const int y = i + kh - sp.pad;
          if (y < 0 || y >= idx.height) continue;
          for (int kw = 0; kw < sp.kw; ++kw) {
            const int x = j + kw - sp.pad;
            if (x < 0 || x >= idx.width) continue;
            const int r = idx.rank_at(y, x);
            if (r < 0) continue;
            acc += w.at(oc, icl, kh, kw) * in.at(ic, r);
          }
        }
      }
      out.at(oc, s) = acc;
    }
  }
  return out;
}

// Per-site inference BN followed by optional ReLU.
template <std::floating_point S>
void sparse_bn_relu_inplace(SparseFeature<S>& f, const BnParams<S>& bn, bool relu) {
  if (bn.channels() != f.channels) throw InvalidInput("sparse bn: channel mismatch");
  for (int c = 0; c < f.channels; ++c) {
    const S inv = S(1) / std::sqrt(bn.running_var[c] + bn.eps);
    const S a = bn.gamma[c] * inv;
    const S b = bn.beta[c] - bn.running_mean[c] * bn.gamma[c] * inv;
    auto seg = f.data.segment(static_cast<Eigen::Index>(c) * f.n_sites, f.n_sites);
    seg = a * seg + b;
    if (relu) seg = seg.max(S(0));
  }
}

template <std::floating_point S>
void sparse_relu_inplace(SparseFeature<S>& f) {
  f.data = f.data.max(S(0));
}

// Nominal multiply-accumulate count per output element (boundary taps are
// counted; the convention matches the dense figures below).
inline unsigned long long taps_per_element(const ConvSpec& sp, int cin) {
  return static_cast<unsigned long long>(sp.kh) * sp.kw * (cin / sp.groups);
}

// Training-form sparse head (inference BN): the M alternating layers then the
// final full 3x3, ReLU after every BN layer, none after the final.
template <std::floating_point S>
SparseFeature<S> sparse_head(const Tensor<S>& p_fine, const ActiveSiteIndex& idx,
                             const std::vector<SparseHeadLayer<S>>& layers,
                             unsigned long long* macs = nullptr) {
  if (layers.empty()) throw InvalidStructure("sparse_head: no layers");
  SparseFeature<S> cur;
  static const VecX<S> no_bias;
  for (size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const ConvSpec sp = sparse_kind_spec(l.kind, l.w.n());
    const int cin = i == 0 ? p_fine.c() : cur.channels;
    if (macs) *macs += taps_per_element(sp, cin) * static_cast<unsigned long long>(l.w.n()) *
                       static_cast<unsigned long long>(idx.n_sites());
    cur = i == 0 ? sparse_conv(p_fine, l.w, l.has_bn ? no_bias : l.b, sp, idx)
                 : sparse_conv(cur, l.w, l.has_bn ? no_bias : l.b, sp, idx);
    if (l.has_bn) sparse_bn_relu_inplace(cur, l.bn, /*relu=*/true);
  }
  return cur;
}

// Fused-form sparse head.
template <std::floating_point S>
SparseFeature<S> sparse_head(const Tensor<S>& p_fine, const ActiveSiteIndex& idx,
                             const std::vector<FusedSparseLayer<S>>& layers,
                             unsigned long long* macs = nullptr) {
  if (layers.empty()) throw InvalidStructure("sparse_head: no layers");
  SparseFeature<S> cur;
  for (size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const ConvSpec sp = sparse_kind_spec(l.kind, l.w.n());
    const int cin = i == 0 ? p_fine.c() : cur.channels;
    if (macs) *macs += taps_per_element(sp, cin) * static_cast<unsigned long long>(l.w.n()) *
                       static_cast<unsigned long long>(idx.n_sites());
    cur = i == 0 ? sparse_conv(p_fine, l.w, l.b, sp, idx) : sparse_conv(cur, l.w, l.b, sp, idx);
    if (l.relu_after) sparse_relu_inplace(cur);
  }
  return cur;
}

// Dense execution of the same layers with inactive positions zeroed after
// every layer; test/benchmark oracle only.
template <std::floating_point S>
void mask_inactive_inplace(Tensor<S>& t, const ActiveSiteIndex& idx) {
  for (int c = 0; c < t.c(); ++c) {
    S* plane = t.plane(0, c);
    for (Eigen::Index p = 0; p < t.plane_size(); ++p)
      if (idx.rank[p] < 0) plane[p] = S(0);
  }
}

template <std::floating_point S>
Tensor<S> dense_oracle(const Tensor<S>& p_fine, const ActiveSiteIndex& idx,
                       const std::vector<SparseHeadLayer<S>>& layers,
                       unsigned long long* macs = nullptr) {
  Tensor<S> cur = p_fine;
  static const VecX<S> no_bias;
  for (const auto& l : layers) {
    const ConvSpec sp = sparse_kind_spec(l.kind, l.w.n());
    if (macs) *macs += taps_per_element(sp, cur.c()) * static_cast<unsigned long long>(l.w.n()) *
                       static_cast<unsigned long long>(cur.plane_size());
    cur = conv2d(cur, l.w, l.has_bn ? no_bias : l.b, sp);
    if (l.has_bn) cur = activation(batch_norm_inference(cur, l.bn), Act::relu);
    mask_inactive_inplace(cur, idx);
  }
  return cur;
}

template <std::floating_point S>
Tensor<S> dense_oracle(const Tensor<S>& p_fine, const ActiveSiteIndex& idx,
                       const std::vector<FusedSparseLayer<S>>& layers,
                       unsigned long long* macs = nullptr) {
  Tensor<S> cur = p_fine;
  for (const auto& l : layers) {
    const ConvSpec sp = sparse_kind_spec(l.kind, l.w.n());
    if (macs) *macs += taps_per_element(sp, cur.c()) * static_cast<unsigned long long>(l.w.n()) *
                       static_cast<unsigned long long>(cur.plane_size());
    cur = conv2d(cur, l.w, l.b, sp);
    if (l.relu_after) cur = activation(cur, Act::relu);
    mask_inactive_inplace(cur, idx);
  }
  return cur;
}

// Scatters site values onto a dense zero map.
template <std::floating_point S>
Tensor<S> scatter_sites(const SparseFeature<S>& f, const ActiveSiteIndex& idx) {
  Tensor<S> out(1, std::max(f.channels, 1), idx.height, idx.width);
  for (int c = 0; c < f.channels; ++c) {
    S* plane = out.plane(0, c);
    for (int s = 0; s < f.n_sites; ++s) {
      const auto [i, j] = idx.sites[s];
      plane[static_cast<Eigen::Index>(i) * idx.width + j] = f.at(c, s);
    }
  }
  return out;
}

// Scatter -> 1x1 conv to one channel -> bilinear x fine_ratio -> sigmoid.
template <std::floating_point S>
Tensor<S> upsample_block(const SparseFeature<S>& f, const ActiveSiteIndex& idx,
                         const ConvParams<S>& up1, int fine_ratio) {
  Tensor<S> dense = scatter_sites(f, idx);
  Tensor<S> one = conv2d(dense, up1.w, up1.b, conv_spec(1));
  return activation(bilinear_upsample(one, fine_ratio), Act::sigmoid);
}

// Coarse head: 3x3 conv + BN + ReLU, 1x1 conv, sigmoid.
template <std::floating_point S>
Tensor<S> coarse_head(const Tensor<S>& p_coarse, const ConvBnParams<S>& c3,
                      const ConvParams<S>& c1) {
  Tensor<S> mid = activation(
      batch_norm_inference(conv2d(p_coarse, c3.w, VecX<S>(), conv_spec(3, 1, 1)), c3.bn),
      Act::relu);
  return activation(conv2d(mid, c1.w, c1.b, conv_spec(1)), Act::sigmoid);
}

template <std::floating_point S>
Tensor<S> coarse_head(const Tensor<S>& p_coarse, const ConvParams<S>& c3_folded,
                      const ConvParams<S>& c1) {
  Tensor<S> mid = activation(conv2d(p_coarse, c3_folded.w, c3_folded.b, conv_spec(3, 1, 1)),
                             Act::relu);
  return activation(conv2d(mid, c1.w, c1.b, conv_spec(1)), Act::sigmoid);
}

}  // namespace spirdet
