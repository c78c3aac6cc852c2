#pragma once

// SoftIoU losses, the three-term composite objective, 8-connected component
// labeling and the IRSTD detection metrics (MIoU / Pd / Fa).

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "spirdet/model.hpp"

namespace spirdet {

// loss = 1 - (sum(p*g) + eps) / (sum(p) + sum(g) - sum(p*g) + eps)
template <std::floating_point S>
S soft_iou_loss(const Tensor<S>& pred, const Tensor<S>& target, S eps = S(1e-6)) {
  if (!pred.same_shape(target))
    throw InvalidInput("soft_iou_loss: shapes " + pred.shape_str() + " vs " + target.shape_str());
  const S inter = (pred.data * target.data).sum();
  const S uni = pred.data.sum() + target.data.sum() - inter;
  return S(1) - (inter + eps) / (uni + eps);
}

// Coarse ground truth by non-overlapping max pooling.
template <std::floating_point S>
Tensor<S> coarse_gt(const Tensor<S>& gt, int ratio) {
  return maxpool2d(gt, ratio, ratio);
}

template <std::floating_point S>
struct LossBreakdown {
  S output_loss = 0, sparse_loss = 0, orth_loss = 0, total = 0;
};

// The K parallel stride-2 kernels of each downsampling stage's first block.
template <std::floating_point S>
std::vector<DownsampleBranchBank<S>> model_ortho_banks(const Model<S>& m) {
  std::vector<DownsampleBranchBank<S>> banks;
  for (const auto& stage : m.stages) {
    const auto& first = stage.front();
    if (first.stride != 2) continue;
    DownsampleBranchBank<S> bank;
    for (int k = 0; k < first.K; ++k) bank.kernels.push_back(&first.depthwise[k].kernel);
    banks.push_back(std::move(bank));
  }
  return banks;
}

template <std::floating_point S>
S model_ortho_penalty(const Model<S>& m) {
  S total = 0;
  for (const auto& bank : model_ortho_banks(m)) total += ortho_penalty(concat_filters(bank));
  return total;
}

// Composite objective: output SoftIoU + coarse-map SoftIoU against the
// maxpooled ground truth + the orthogonality penalty summed over all
// downsampling banks with unit weight.
template <std::floating_point S>
LossBreakdown<S> total_loss(const Tensor<S>& output, const Tensor<S>& coarse_map,
                            const Tensor<S>& gt, const Model<S>& m, S eps = S(1e-6)) {
  LossBreakdown<S> lb;
  lb.output_loss = soft_iou_loss(output, gt, eps);
  lb.sparse_loss = soft_iou_loss(coarse_map, coarse_gt(gt, m.config.coarse_ratio), eps);
  lb.orth_loss = model_ortho_penalty(m);
  lb.total = lb.output_loss + lb.sparse_loss + lb.orth_loss;
  return lb;
}

// ---------------------------------------------------------------------------
// Connected components (8-connectivity)

struct Component {
  std::vector<std::pair<int, int>> pixels;  // row-major order
  double centroid_y = 0, centroid_x = 0;
};

template <std::floating_point S>
std::vector<Component> connected_components(const Tensor<S>& mask) {
  if (mask.n() != 1 || mask.c() != 1)
    throw InvalidInput("connected_components: expects a (1,1,H,W) mask");
  const int h = mask.h(), w = mask.w();
  for (Eigen::Index i = 0; i < mask.size(); ++i)
    if (mask.data[i] != S(0) && mask.data[i] != S(1))
      throw InvalidInput("connected_components: mask must be binary");
  std::vector<int> label(static_cast<size_t>(h) * w, -1);
  std::vector<Component> comps;
  std::vector<std::pair<int, int>> stack;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (mask.at(0, 0, y, x) == S(0) || label[static_cast<size_t>(y) * w + x] >= 0) continue;
      const int id = static_cast<int>(comps.size());
      comps.emplace_back();
      stack.clear();
      stack.emplace_back(y, x);
      label[static_cast<size_t>(y) * w + x] = id;
      while (!stack.empty()) {
        auto [cy, cx] = stack.back();
        stack.pop_back();
        comps[id].pixels.emplace_back(cy, cx);
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            if (dy == 0 && dx == 0) continue;
            const int ny = cy + dy, nx = cx + dx;
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            if (mask.at(0, 0, ny, nx) == S(0)) continue;
            int& l = label[static_cast<size_t>(ny) * w + nx];
            if (l >= 0) continue;
            l = id;
            stack.emplace_back(ny, nx);
          }
      }
      std::sort(comps[id].pixels.begin(), comps[id].pixels.end());
      double sy = 0, sx = 0;
      for (const auto& [py, px] : comps[id].pixels) {
        sy += py;
        sx += px;
      }
      comps[id].centroid_y = sy / comps[id].pixels.size();
      comps[id].centroid_x = sx / comps[id].pixels.size();
    }
  }
  return comps;
}

// ---------------------------------------------------------------------------
// Detection metrics

enum class MiouMode { global, per_image };

struct ImageStats {
  int gt_targets = 0;
  int detected = 0;
  long long false_pixels = 0;
  long long inter = 0, uni = 0;
};

struct DetectionReport {
  double miou = 0;  // pixel-level IoU
  double pd = 0;    // detected targets / total targets
  double fa = 0;    // false-positive pixels / total pixels
  long long total_targets = 0, detected_targets = 0;
  long long false_pixels = 0, total_pixels = 0;
  std::vector<ImageStats> per_image;
};

// Binarize at threshold, label both masks, then greedily match ground-truth
// targets to predicted component centroids (nearest pair first, one-to-one,
// within match_dist pixels).
template <std::floating_point S>
DetectionReport detection_metrics(const std::vector<Tensor<S>>& preds,
                                  const std::vector<Tensor<S>>& gts, double threshold = 0.5,
                                  double match_dist = 3.0, MiouMode mode = MiouMode::global) {
  if (preds.size() != gts.size())
    throw InvalidInput("detection_metrics: pred/gt list lengths differ");
  DetectionReport rep;
  long long inter_sum = 0, uni_sum = 0;
  double per_image_iou_sum = 0;
  for (size_t i = 0; i < preds.size(); ++i) {
    const Tensor<S>& p = preds[i];
    const Tensor<S>& g = gts[i];
    if (!p.same_shape(g))
      throw InvalidInput("detection_metrics: image " + std::to_string(i) + " shape mismatch");
    Tensor<S> pb = p.like_zeros();
    pb.data = (p.data >= static_cast<S>(threshold)).template cast<S>();
    auto pred_comps = connected_components(pb);
    auto gt_comps = connected_components(g);

    struct Cand {
      double dist;
      int gi, pi;
    };
    std::vector<Cand> cands;
    for (size_t gi = 0; gi < gt_comps.size(); ++gi)
      for (size_t pi = 0; pi < pred_comps.size(); ++pi) {
        const double dy = gt_comps[gi].centroid_y - pred_comps[pi].centroid_y;
        const double dx = gt_comps[gi].centroid_x - pred_comps[pi].centroid_x;
        const double dist = std::sqrt(dy * dy + dx * dx);
        if (dist <= match_dist) cands.push_back({dist, static_cast<int>(gi), static_cast<int>(pi)});
      }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.dist != b.dist) return a.dist < b.dist;
      if (a.gi != b.gi) return a.gi < b.gi;
      return a.pi < b.pi;
    });
    std::vector<bool> gt_used(gt_comps.size()), pred_used(pred_comps.size());
    int matched = 0;
    for (const Cand& c : cands) {
      if (gt_used[c.gi] || pred_used[c.pi]) continue;
      gt_used[c.gi] = pred_used[c.pi] = true;
      ++matched;
    }

    ImageStats st;
    st.gt_targets = static_cast<int>(gt_comps.size());
    st.detected = matched;
    for (Eigen::Index px = 0; px < pb.size(); ++px) {
      const bool pp = pb.data[px] != S(0);
      const bool gg = g.data[px] != S(0);
      st.false_pixels += (pp && !gg) ? 1 : 0;
      st.inter += (pp && gg) ? 1 : 0;
      st.uni += (pp || gg) ? 1 : 0;
    }
    rep.total_targets += st.gt_targets;
    rep.detected_targets += st.detected;
    rep.false_pixels += st.false_pixels;
    rep.total_pixels += pb.size();
    inter_sum += st.inter;
    uni_sum += st.uni;
    per_image_iou_sum += st.uni == 0 ? 1.0 : static_cast<double>(st.inter) / st.uni;
    rep.per_image.push_back(st);
  }
  rep.pd = rep.total_targets == 0 ? 1.0
                                  : static_cast<double>(rep.detected_targets) / rep.total_targets;
  rep.fa = rep.total_pixels == 0 ? 0.0 : static_cast<double>(rep.false_pixels) / rep.total_pixels;
  rep.miou = mode == MiouMode::global
                 ? (uni_sum == 0 ? 1.0 : static_cast<double>(inter_sum) / uni_sum)
                 : (preds.empty() ? 1.0 : per_image_iou_sum / preds.size());
  return rep;
}

}  // namespace spirdet
