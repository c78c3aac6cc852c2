#pragma once

// Dense 4-D tensor (batch, channels, height, width), row-major contiguous.

#include <Eigen/Core>

#include <array>
#include <concepts>
#include <cstdint>
#include <string>

#include "spirdet/errors.hpp"

namespace spirdet {

template <class S>
using VecX = Eigen::Array<S, Eigen::Dynamic, 1>;

template <class S>
using MapVec = Eigen::Map<VecX<S>>;
template <class S>
using CMapVec = Eigen::Map<const VecX<S>>;

template <std::floating_point S>
struct Tensor {
  using Scalar = S;

  std::array<int, 4> shape{0, 0, 0, 0};  // n, c, h, w
  VecX<S> data;

  Tensor() = default;

  Tensor(int n, int c, int h, int w) : shape{n, c, h, w} {
    if (n < 1 || c < 1 || h < 1 || w < 1)
      throw InvalidInput("tensor dims must all be >= 1, got " + shape_str());
    data = VecX<S>::Zero(static_cast<Eigen::Index>(n) * c * h * w);
  }

  static Tensor zeros(int n, int c, int h, int w) { return Tensor(n, c, h, w); }

  static Tensor full(int n, int c, int h, int w, S value) {
    Tensor t(n, c, h, w);
    t.data.setConstant(value);
    return t;
  }

  int n() const { return shape[0]; }
  int c() const { return shape[1]; }
  int h() const { return shape[2]; }
  int w() const { return shape[3]; }
  Eigen::Index size() const { return data.size(); }
  bool empty() const { return data.size() == 0; }

  Eigen::Index index(int n_, int c_, int h_, int w_) const {
    return ((static_cast<Eigen::Index>(n_) * shape[1] + c_) * shape[2] + h_) * shape[3] + w_;
  }

  S& at(int n_, int c_, int h_, int w_) { return data[index(n_, c_, h_, w_)]; }
  S at(int n_, int c_, int h_, int w_) const { return data[index(n_, c_, h_, w_)]; }

  S* plane(int n_, int c_) { return data.data() + index(n_, c_, 0, 0); }
  const S* plane(int n_, int c_) const { return data.data() + index(n_, c_, 0, 0); }

  Eigen::Index plane_size() const { return static_cast<Eigen::Index>(shape[2]) * shape[3]; }

  MapVec<S> plane_map(int n_, int c_) { return MapVec<S>(plane(n_, c_), plane_size()); }
  CMapVec<S> plane_map(int n_, int c_) const { return CMapVec<S>(plane(n_, c_), plane_size()); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  std::string shape_str() const {
    return "(" + std::to_string(shape[0]) + "," + std::to_string(shape[1]) + "," +
           std::to_string(shape[2]) + "," + std::to_string(shape[3]) + ")";
  }

  template <std::floating_point T>
  Tensor<T> cast() const {
    Tensor<T> out(shape[0], shape[1], shape[2], shape[3]);
    out.data = data.template cast<T>();
    return out;
  }

  Tensor like_zeros() const { return Tensor(shape[0], shape[1], shape[2], shape[3]); }
};

template <std::floating_point S>
bool bit_equal(const Tensor<S>& a, const Tensor<S>& b) {
  if (!a.same_shape(b)) return false;
  for (Eigen::Index i = 0; i < a.size(); ++i)
    if (a.data[i] != b.data[i]) return false;
  return true;
}

template <std::floating_point S>
S max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  if (!a.same_shape(b)) throw InvalidInput("max_abs_diff: shapes " + a.shape_str() + " vs " + b.shape_str());
  if (a.size() == 0) return S(0);
  return (a.data - b.data).abs().maxCoeff();
}

}  // namespace spirdet
