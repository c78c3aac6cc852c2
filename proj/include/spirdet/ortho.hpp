#pragma once

// Downsampling-orthogonality regularizer: the K parallel stride-2 kernels of
// a stage's first block are flattened into a filter-per-row matrix F and
// penalized by || F F^T - I ||_F^2, pushing the filters toward an
// orthonormal set. The analytic gradient is 4 (F F^T - I) F.

#include <Eigen/Core>

#include <vector>

#include "spirdet/tensor.hpp"

namespace spirdet {

template <class S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// The K same-shaped downsampling kernels W_1..W_K (each out x in x 3 x 3).
template <std::floating_point S>
struct DownsampleBranchBank {
  std::vector<const Tensor<S>*> kernels;
};

// Rows are filters: row i*out + o is kernel i's o-th output filter flattened
// in (in, kh, kw) row-major order.
template <std::floating_point S>
MatX<S> concat_filters(const DownsampleBranchBank<S>& bank) {
  if (bank.kernels.empty()) throw InvalidStructure("concat_filters: empty bank");
  const Tensor<S>& first = *bank.kernels[0];
  const int out = first.n();
  const Eigen::Index cols = first.size() / out;
  MatX<S> f(static_cast<Eigen::Index>(bank.kernels.size()) * out, cols);
  for (size_t i = 0; i < bank.kernels.size(); ++i) {
    const Tensor<S>& k = *bank.kernels[i];
    if (!k.same_shape(first))
      throw InvalidStructure("concat_filters: kernel shapes disagree: " + k.shape_str() + " vs " +
                             first.shape_str());
    for (int o = 0; o < out; ++o)
      f.row(static_cast<Eigen::Index>(i) * out + o) =
          Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(k.data.data() + o * cols, cols);
  }
  return f;
}

// || F F^T - I ||_F^2
template <std::floating_point S>
S ortho_penalty(const MatX<S>& f) {
  MatX<S> g = f * f.transpose();
  g.diagonal().array() -= S(1);
  return g.squaredNorm();
}

// d/dF of ortho_penalty: 4 (F F^T - I) F
template <std::floating_point S>
MatX<S> ortho_penalty_grad(const MatX<S>& f) {
  MatX<S> g = f * f.transpose();
  g.diagonal().array() -= S(1);
  return S(4) * g * f;
}

// Scatters a filter-matrix gradient back onto the bank's kernel layout.
template <std::floating_point S>
std::vector<Tensor<S>> split_filter_grad(const MatX<S>& grad, const DownsampleBranchBank<S>& bank) {
  const Tensor<S>& first = *bank.kernels[0];
  const int out = first.n();
  const Eigen::Index cols = first.size() / out;
  std::vector<Tensor<S>> grads;
  grads.reserve(bank.kernels.size());
  for (size_t i = 0; i < bank.kernels.size(); ++i) {
    Tensor<S> g(first.shape[0], first.shape[1], first.shape[2], first.shape[3]);
    for (int o = 0; o < out; ++o)
      Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(g.data.data() + o * cols, cols) =
          grad.row(static_cast<Eigen::Index>(i) * out + o);
    grads.push_back(std::move(g));
  }
  return grads;
}

}  // namespace spirdet
