#pragma once

// Forward and adjoint kernels for the dense ops the network composes:
// cross-correlation conv2d, batch norm, relu/sigmoid, non-overlapping
// max pooling, bilinear upsampling and channel concat / elementwise add.
//
// conv2d accumulates each output element in a fixed order (bias, then
// in-channel major, then kernel row, kernel column); vectorization runs
// across output columns so the per-element order never changes.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <vector>

#include "spirdet/tensor.hpp"

namespace spirdet {

struct ConvSpec {
  int kh = 1, kw = 1;
  int stride = 1;
  int pad = 0;
  int groups = 1;
};

inline ConvSpec conv_spec(int k, int stride = 1, int pad = 0, int groups = 1) {
  return ConvSpec{k, k, stride, pad, groups};
}

namespace detail {

// Floor/ceil division for possibly negative numerators, positive divisor.
inline int div_floor(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }
inline int div_ceil(int a, int b) { return a >= 0 ? (a + b - 1) / b : -((-a) / b); }

struct ConvDims {
  int out_h = 0, out_w = 0;
  int cin_g = 0, cout_g = 0;  // channels per group
};

template <std::floating_point S>
ConvDims check_conv(const Tensor<S>& x, const Tensor<S>& w, const VecX<S>& bias,
                    const ConvSpec& sp) {
  if (sp.kh < 1 || sp.kw < 1 || sp.stride < 1 || sp.pad < 0 || sp.groups < 1)
    throw InvalidInput("conv2d: bad spec");
  if (w.h() != sp.kh || w.w() != sp.kw)
    throw InvalidInput("conv2d: weight kernel dims " + w.shape_str() + " disagree with spec");
  const int cin = x.c(), cout = w.n();
  if (cin % sp.groups != 0 || cout % sp.groups != 0)
    throw InvalidInput("conv2d: groups must divide in and out channels");
  if (w.c() != cin / sp.groups)
    throw InvalidInput("conv2d: weights expect " + std::to_string(w.c() * sp.groups) +
                       " input channels, input has " + std::to_string(cin));
  if (bias.size() != 0 && bias.size() != cout)
    throw InvalidInput("conv2d: bias size mismatch");
  ConvDims d;
  d.out_h = (x.h() + 2 * sp.pad - sp.kh) / sp.stride + 1;
  d.out_w = (x.w() + 2 * sp.pad - sp.kw) / sp.stride + 1;
  if (x.h() + 2 * sp.pad < sp.kh || x.w() + 2 * sp.pad < sp.kw || d.out_h < 1 || d.out_w < 1)
    throw InvalidInput("conv2d: non-positive output dims for input " + x.shape_str());
  d.cin_g = cin / sp.groups;
  d.cout_g = cout / sp.groups;
  return d;
}

// Valid output range [o0, o1) along one axis for a kernel offset k:
// input index o*stride + k - pad must fall inside [0, in_dim).
inline void tap_range(int in_dim, int out_dim, int stride, int pad, int k, int& o0, int& o1) {
  o0 = std::max(0, div_ceil(pad - k, stride));
  o1 = std::min(out_dim, div_floor(in_dim - 1 - k + pad, stride) + 1);
}

template <class S>
using StridedCMap = Eigen::Map<const VecX<S>, 0, Eigen::InnerStride<>>;
template <class S>
using StridedMap = Eigen::Map<VecX<S>, 0, Eigen::InnerStride<>>;

}  // namespace detail

namespace detail {

// Zero-pads a plane to (H+2p) x (W+2p), row-major.
template <std::floating_point S>
void pad_plane(const S* in, int H, int W, int p, S* out) {
  const int Wp = W + 2 * p;
  MapVec<S>(out, static_cast<Eigen::Index>(H + 2 * p) * Wp).setZero();
  for (int y = 0; y < H; ++y)
    MapVec<S>(out + static_cast<Eigen::Index>(y + p) * Wp + p, W) = CMapVec<S>(in + static_cast<Eigen::Index>(y) * W, W);
}

// Splits a plane into even-column / odd-column halves (stride-2 packing).
template <std::floating_point S>
void split_parity(const S* in, int H, int W, S* even, S* odd) {
  const int We = (W + 1) / 2, Wo = W / 2;
  for (int y = 0; y < H; ++y) {
    const S* row = in + static_cast<Eigen::Index>(y) * W;
    S* e = even + static_cast<Eigen::Index>(y) * We;
    S* o = odd + static_cast<Eigen::Index>(y) * Wo;
    for (int xx = 0; xx < Wo; ++xx) {
      e[xx] = row[2 * xx];
      o[xx] = row[2 * xx + 1];
    }
    if (We > Wo) e[Wo] = row[2 * Wo];
  }
}

template <std::floating_point S>
void merge_parity_add(S* out, int H, int W, const S* even, const S* odd) {
  const int We = (W + 1) / 2, Wo = W / 2;
  for (int y = 0; y < H; ++y) {
    S* row = out + static_cast<Eigen::Index>(y) * W;
    const S* e = even + static_cast<Eigen::Index>(y) * We;
    const S* o = odd + static_cast<Eigen::Index>(y) * Wo;
    for (int xx = 0; xx < Wo; ++xx) {
      row[2 * xx] += e[xx];
      row[2 * xx + 1] += o[xx];
    }
    if (We > Wo) row[2 * Wo] += e[Wo];
  }
}

}  // namespace detail

// Cross-correlation with zero padding (no kernel flip).
// x: (N, Cin, H, W); w: (Cout, Cin/groups, kh, kw); bias: empty or (Cout).
//
// Two vectorized layouts cover the shapes the network uses: "same" stride-1
// convs run over zero-padded planes so every kernel tap is one long fused
// multiply-add over the flat plane (junk columns inside the padding band are
// computed and discarded), and stride-2 convs run over even/odd column-packed
// planes so taps stay contiguous. Everything else takes the generic row path.
// All paths accumulate each output element in the same fixed order.
template <std::floating_point S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const VecX<S>& bias,
                 const ConvSpec& sp) {
  const detail::ConvDims d = detail::check_conv(x, w, bias, sp);
  const int N = x.n(), H = x.h(), W = x.w();
  Tensor<S> y(N, w.n(), d.out_h, d.out_w);

  if (sp.stride == 1 && sp.kh == 1 && sp.kw == 1 && sp.pad == 0) {
    // Pointwise conv: flat axpy over whole planes.
    for (int n = 0; n < N; ++n) {
      for (int g = 0; g < sp.groups; ++g) {
        for (int ocl = 0; ocl < d.cout_g; ++ocl) {
          const int oc = g * d.cout_g + ocl;
          auto out_plane = y.plane_map(n, oc);
          out_plane.setConstant(bias.size() ? bias[oc] : S(0));
          for (int icl = 0; icl < d.cin_g; ++icl)
            out_plane += w.at(oc, icl, 0, 0) * x.plane_map(n, g * d.cin_g + icl);
        }
      }
    }
    return y;
  }

  const bool same_path = sp.stride == 1 && d.out_h == H && d.out_w == W && sp.pad > 0;
  if (same_path) {
    const int p = sp.pad;
    const int Wp = W + 2 * p, Hp = H + 2 * p;
    const Eigen::Index plane_p = static_cast<Eigen::Index>(Hp) * Wp;
    const Eigen::Index span = static_cast<Eigen::Index>(H) * Wp - 2 * p;
    VecX<S> padded(plane_p * d.cin_g);
    VecX<S> out_buf(static_cast<Eigen::Index>(H) * Wp);
    for (int n = 0; n < N; ++n) {
      for (int g = 0; g < sp.groups; ++g) {
        for (int icl = 0; icl < d.cin_g; ++icl)
          detail::pad_plane(x.plane(n, g * d.cin_g + icl), H, W, p, padded.data() + plane_p * icl);
        for (int ocl = 0; ocl < d.cout_g; ++ocl) {
          const int oc = g * d.cout_g + ocl;
          out_buf.setConstant(bias.size() ? bias[oc] : S(0));
          S* ob = out_buf.data();
          for (int icl = 0; icl < d.cin_g; ++icl) {
            const S* pin = padded.data() + plane_p * icl;
            for (int kh = 0; kh < sp.kh; ++kh)
              for (int kw = 0; kw < sp.kw; ++kw)
                MapVec<S>(ob, span) += w.at(oc, icl, kh, kw) *
                                       CMapVec<S>(pin + static_cast<Eigen::Index>(kh) * Wp + kw, span);
          }
          S* out = y.plane(n, oc);
          for (int yy = 0; yy < H; ++yy)
            MapVec<S>(out + static_cast<Eigen::Index>(yy) * W, W) =
                CMapVec<S>(ob + static_cast<Eigen::Index>(yy) * Wp, W);
        }
      }
    }
    return y;
  }

  if (sp.stride == 2) {
    const int We = (W + 1) / 2, Wo = W / 2;
    const Eigen::Index pe = static_cast<Eigen::Index>(H) * We, po = static_cast<Eigen::Index>(H) * Wo;
    VecX<S> even(pe * d.cin_g), odd(po * d.cin_g);
    for (int n = 0; n < N; ++n) {
      for (int g = 0; g < sp.groups; ++g) {
        for (int icl = 0; icl < d.cin_g; ++icl)
          detail::split_parity(x.plane(n, g * d.cin_g + icl), H, W, even.data() + pe * icl,
                               odd.data() + po * icl);
        for (int ocl = 0; ocl < d.cout_g; ++ocl) {
          const int oc = g * d.cout_g + ocl;
          auto out_plane = y.plane_map(n, oc);
          out_plane.setConstant(bias.size() ? bias[oc] : S(0));
          S* out = y.plane(n, oc);
          for (int icl = 0; icl < d.cin_g; ++icl) {
            for (int kh = 0; kh < sp.kh; ++kh) {
              int oy0, oy1;
              detail::tap_range(H, d.out_h, 2, sp.pad, kh, oy0, oy1);
              for (int kw = 0; kw < sp.kw; ++kw) {
                int ox0, ox1;
                detail::tap_range(W, d.out_w, 2, sp.pad, kw, ox0, ox1);
                if (ox1 <= ox0 || oy1 <= oy0) continue;
                const S wv = w.at(oc, icl, kh, kw);
                const int len = ox1 - ox0;
                const int q = kw - sp.pad;
                const int par = ((q % 2) + 2) % 2;
                const int m = detail::div_floor(q, 2);
                const S* src = (par == 0 ? even.data() + pe * icl : odd.data() + po * icl);
                const int Wpar = (par == 0 ? We : Wo);
                for (int oy = oy0; oy < oy1; ++oy) {
                  const int iy = oy * 2 + kh - sp.pad;
                  MapVec<S>(out + static_cast<Eigen::Index>(oy) * d.out_w + ox0, len) +=
                      wv * CMapVec<S>(src + static_cast<Eigen::Index>(iy) * Wpar + ox0 + m, len);
                }
              }
            }
          }
        }
      }
    }
    return y;
  }

  // Generic path: row-wise with explicit valid ranges.
  for (int n = 0; n < N; ++n) {
    for (int g = 0; g < sp.groups; ++g) {
      for (int ocl = 0; ocl < d.cout_g; ++ocl) {
        const int oc = g * d.cout_g + ocl;
        auto out_plane = y.plane_map(n, oc);
        out_plane.setConstant(bias.size() ? bias[oc] : S(0));
        for (int icl = 0; icl < d.cin_g; ++icl) {
          const int ic = g * d.cin_g + icl;
          const S* in = x.plane(n, ic);
          S* out = y.plane(n, oc);
          for (int kh = 0; kh < sp.kh; ++kh) {
            int oy0, oy1;
            detail::tap_range(H, d.out_h, sp.stride, sp.pad, kh, oy0, oy1);
            for (int kw = 0; kw < sp.kw; ++kw) {
              int ox0, ox1;
              detail::tap_range(W, d.out_w, sp.stride, sp.pad, kw, ox0, ox1);
              if (ox1 <= ox0) continue;
              const S wv = w.at(oc, icl, kh, kw);
              const int len = ox1 - ox0;
              for (int oy = oy0; oy < oy1; ++oy) {
                const int iy = oy * sp.stride + kh - sp.pad;
                S* orow = out + static_cast<Eigen::Index>(oy) * d.out_w + ox0;
                const S* irow = in + static_cast<Eigen::Index>(iy) * W + ox0 * sp.stride + kw - sp.pad;
                if (sp.stride == 1) {
                  MapVec<S>(orow, len) += wv * CMapVec<S>(irow, len);
                } else {
                  MapVec<S>(orow, len) +=
                      wv * detail::StridedCMap<S>(irow, len, Eigen::InnerStride<>(sp.stride));
                }
              }
            }
          }
        }
      }
    }
  }
  return y;
}

// dL/dx for conv2d.
template <std::floating_point S>
Tensor<S> conv2d_grad_input(const Tensor<S>& dy, const Tensor<S>& w, const ConvSpec& sp,
                            const std::array<int, 4>& x_shape) {
  Tensor<S> dx(x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
  const detail::ConvDims d = detail::check_conv(dx, w, VecX<S>(), sp);
  if (d.out_h != dy.h() || d.out_w != dy.w() || dy.c() != w.n() || dy.n() != x_shape[0])
    throw InvalidInput("conv2d_grad_input: dy shape mismatch");
  const int H = dx.h(), W = dx.w();

  if (sp.stride == 1 && sp.kh == 1 && sp.kw == 1 && sp.pad == 0) {
    for (int n = 0; n < dx.n(); ++n)
      for (int g = 0; g < sp.groups; ++g)
        for (int icl = 0; icl < d.cin_g; ++icl) {
          auto dx_plane = dx.plane_map(n, g * d.cin_g + icl);
          for (int ocl = 0; ocl < d.cout_g; ++ocl) {
            const int oc = g * d.cout_g + ocl;
            dx_plane += w.at(oc, icl, 0, 0) * dy.plane_map(n, oc);
          }
        }
    return dx;
  }

  const bool same_path = sp.stride == 1 && d.out_h == H && d.out_w == W && sp.pad > 0;
  if (same_path) {
    const int p = sp.pad;
    const int Wp = W + 2 * p;
    const Eigen::Index plane_p = static_cast<Eigen::Index>(H + 2 * p) * Wp;
    const Eigen::Index span = static_cast<Eigen::Index>(H) * Wp - 2 * p;
    VecX<S> dy_pad(static_cast<Eigen::Index>(H) * Wp);
    VecX<S> dx_pad(plane_p);
    for (int n = 0; n < dx.n(); ++n) {
      for (int g = 0; g < sp.groups; ++g) {
        for (int icl = 0; icl < d.cin_g; ++icl) {
          const int ic = g * d.cin_g + icl;
          dx_pad.setZero();
          for (int ocl = 0; ocl < d.cout_g; ++ocl) {
            const int oc = g * d.cout_g + ocl;
            // dy widened to the padded row pitch with zeroed junk columns.
            dy_pad.setZero();
            const S* dyp = dy.plane(n, oc);
            for (int yy = 0; yy < H; ++yy)
              MapVec<S>(dy_pad.data() + static_cast<Eigen::Index>(yy) * Wp, W) =
                  CMapVec<S>(dyp + static_cast<Eigen::Index>(yy) * W, W);
            for (int kh = 0; kh < sp.kh; ++kh)
              for (int kw = 0; kw < sp.kw; ++kw)
                MapVec<S>(dx_pad.data() + static_cast<Eigen::Index>(kh) * Wp + kw, span) +=
                    w.at(oc, icl, kh, kw) * CMapVec<S>(dy_pad.data(), span);
          }
          S* dxp = dx.plane(n, ic);
          for (int yy = 0; yy < H; ++yy)
            MapVec<S>(dxp + static_cast<Eigen::Index>(yy) * W, W) +=
                CMapVec<S>(dx_pad.data() + static_cast<Eigen::Index>(yy + p) * Wp + p, W);
        }
      }
    }
    return dx;
  }

  if (sp.stride == 2) {
    const int We = (W + 1) / 2, Wo = W / 2;
    const Eigen::Index pe = static_cast<Eigen::Index>(H) * We, po = static_cast<Eigen::Index>(H) * Wo;
    VecX<S> even(pe), odd(po);
    for (int n = 0; n < dx.n(); ++n) {
      for (int g = 0; g < sp.groups; ++g) {
        for (int icl = 0; icl < d.cin_g; ++icl) {
          const int ic = g * d.cin_g + icl;
          even.setZero();
          odd.setZero();
          for (int ocl = 0; ocl < d.cout_g; ++ocl) {
            const int oc = g * d.cout_g + ocl;
            const S* dyp = dy.plane(n, oc);
            for (int kh = 0; kh < sp.kh; ++kh) {
              int oy0, oy1;
              detail::tap_range(H, d.out_h, 2, sp.pad, kh, oy0, oy1);
              for (int kw = 0; kw < sp.kw; ++kw) {
                int ox0, ox1;
                detail::tap_range(W, d.out_w, 2, sp.pad, kw, ox0, ox1);
                if (ox1 <= ox0 || oy1 <= oy0) continue;
                const S wv = w.at(oc, icl, kh, kw);
                const int len = ox1 - ox0;
                const int q = kw - sp.pad;
                const int par = ((q % 2) + 2) % 2;
                const int m = detail::div_floor(q, 2);
                S* dst = (par == 0 ? even.data() : odd.data());
                const int Wpar = (par == 0 ? We : Wo);
                for (int oy = oy0; oy < oy1; ++oy) {
                  const int iy = oy * 2 + kh - sp.pad;
                  MapVec<S>(dst + static_cast<Eigen::Index>(iy) * Wpar + ox0 + m, len) +=
                      wv * CMapVec<S>(dyp + static_cast<Eigen::Index>(oy) * d.out_w + ox0, len);
                }
              }
            }
          }
          detail::merge_parity_add(dx.plane(n, ic), H, W, even.data(), odd.data());
        }
      }
    }
    return dx;
  }

  for (int n = 0; n < dx.n(); ++n) {
    for (int g = 0; g < sp.groups; ++g) {
      for (int ocl = 0; ocl < d.cout_g; ++ocl) {
        const int oc = g * d.cout_g + ocl;
        const S* dyp = dy.plane(n, oc);
        for (int icl = 0; icl < d.cin_g; ++icl) {
          const int ic = g * d.cin_g + icl;
          S* dxp = dx.plane(n, ic);
          for (int kh = 0; kh < sp.kh; ++kh) {
            int oy0, oy1;
            detail::tap_range(H, d.out_h, sp.stride, sp.pad, kh, oy0, oy1);
            for (int kw = 0; kw < sp.kw; ++kw) {
              int ox0, ox1;
              detail::tap_range(W, d.out_w, sp.stride, sp.pad, kw, ox0, ox1);
              if (ox1 <= ox0) continue;
              const S wv = w.at(oc, icl, kh, kw);
              const int len = ox1 - ox0;
              for (int oy = oy0; oy < oy1; ++oy) {
                const int iy = oy * sp.stride + kh - sp.pad;
                const S* dyrow = dyp + static_cast<Eigen::Index>(oy) * d.out_w + ox0;
                S* dxrow = dxp + static_cast<Eigen::Index>(iy) * W + ox0 * sp.stride + kw - sp.pad;
                if (sp.stride == 1) {
                  MapVec<S>(dxrow, len) += wv * CMapVec<S>(dyrow, len);
                } else {
                  detail::StridedMap<S>(dxrow, len, Eigen::InnerStride<>(sp.stride)) +=
                      wv * CMapVec<S>(dyrow, len);
                }
              }
            }
          }
        }
      }
    }
  }
  return dx;
}

// dL/dw for conv2d.
template <std::floating_point S>
Tensor<S> conv2d_grad_weights(const Tensor<S>& x, const Tensor<S>& dy, const ConvSpec& sp,
                              const std::array<int, 4>& w_shape) {
  Tensor<S> dw(w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
  const detail::ConvDims d = detail::check_conv(x, dw, VecX<S>(), sp);
  if (d.out_h != dy.h() || d.out_w != dy.w() || dy.c() != dw.n() || dy.n() != x.n())
    throw InvalidInput("conv2d_grad_weights: dy shape mismatch");
  const int H = x.h(), W = x.w();

  if (sp.stride == 1 && sp.kh == 1 && sp.kw == 1 && sp.pad == 0) {
    for (int n = 0; n < x.n(); ++n)
      for (int g = 0; g < sp.groups; ++g)
        for (int ocl = 0; ocl < d.cout_g; ++ocl) {
          const int oc = g * d.cout_g + ocl;
          for (int icl = 0; icl < d.cin_g; ++icl)
            dw.at(oc, icl, 0, 0) +=
                (x.plane_map(n, g * d.cin_g + icl) * dy.plane_map(n, oc)).sum();
        }
    return dw;
  }

  const bool same_path = sp.stride == 1 && d.out_h == H && d.out_w == W && sp.pad > 0;
  if (same_path) {
    const int p = sp.pad;
    const int Wp = W + 2 * p;
    const Eigen::Index plane_p = static_cast<Eigen::Index>(H + 2 * p) * Wp;
    const Eigen::Index span = static_cast<Eigen::Index>(H) * Wp - 2 * p;
    VecX<S> padded(plane_p * d.cin_g);
    VecX<S> dy_pad(static_cast<Eigen::Index>(H) * Wp);
    for (int n = 0; n < x.n(); ++n) {
      for (int g = 0; g < sp.groups; ++g) {
        for (int icl = 0; icl < d.cin_g; ++icl)
          detail::pad_plane(x.plane(n, g * d.cin_g + icl), H, W, p, padded.data() + plane_p * icl);
        for (int ocl = 0; ocl < d.cout_g; ++ocl) {
          const int oc = g * d.cout_g + ocl;
          dy_pad.setZero();
          const S* dyp = dy.plane(n, oc);
          for (int yy = 0; yy < H; ++yy)
            MapVec<S>(dy_pad.data() + static_cast<Eigen::Index>(yy) * Wp, W) =
                CMapVec<S>(dyp + static_cast<Eigen::Index>(yy) * W, W);
          for (int icl = 0; icl < d.cin_g; ++icl) {
            const S* pin = padded.data() + plane_p * icl;
            for (int kh = 0; kh < sp.kh; ++kh)
              for (int kw = 0; kw < sp.kw; ++kw)
                dw.at(oc, icl, kh, kw) +=
                    (CMapVec<S>(pin + static_cast<Eigen::Index>(kh) * Wp + kw, span) *
                     CMapVec<S>(dy_pad.data(), span))
                        .sum();
          }
        }
      }
    }
    return dw;
  }

  if (sp.stride == 2) {
    const int We = (W + 1) / 2, Wo = W / 2;
    const Eigen::Index pe = static_cast<Eigen::Index>(H) * We, po = static_cast<Eigen::Index>(H) * Wo;
    VecX<S> even(pe * d.cin_g), odd(po * d.cin_g);
    for (int n = 0; n < x.n(); ++n) {
      for (int g = 0; g < sp.groups; ++g) {
        for (int icl = 0; icl < d.cin_g; ++icl)
          detail::split_parity(x.plane(n, g * d.cin_g + icl), H, W, even.data() + pe * icl,
                               odd.data() + po * icl);
        for (int ocl = 0; ocl < d.cout_g; ++ocl) {
          const int oc = g * d.cout_g + ocl;
          const S* dyp = dy.plane(n, oc);
          for (int icl = 0; icl < d.cin_g; ++icl) {
            for (int kh = 0; kh < sp.kh; ++kh) {
              int oy0, oy1;
              detail::tap_range(H, d.out_h, 2, sp.pad, kh, oy0, oy1);
              for (int kw = 0; kw < sp.kw; ++kw) {
                int ox0, ox1;
                detail::tap_range(W, d.out_w, 2, sp.pad, kw, ox0, ox1);
                if (ox1 <= ox0 || oy1 <= oy0) continue;
                const int len = ox1 - ox0;
                const int q = kw - sp.pad;
                const int par = ((q % 2) + 2) % 2;
                const int m = detail::div_floor(q, 2);
                const S* src = (par == 0 ? even.data() + pe * icl : odd.data() + po * icl);
                const int Wpar = (par == 0 ? We : Wo);
                S acc = 0;
                for (int oy = oy0; oy < oy1; ++oy) {
                  const int iy = oy * 2 + kh - sp.pad;
                  acc += (CMapVec<S>(src + static_cast<Eigen::Index>(iy) * Wpar + ox0 + m, len) *
                          CMapVec<S>(dyp + static_cast<Eigen::Index>(oy) * d.out_w + ox0, len))
                             .sum();
                }
                dw.at(oc, icl, kh, kw) += acc;
              }
            }
          }
        }
      }
    }
    return dw;
  }

  VecX<S> acc(d.out_w);
  for (int n = 0; n < x.n(); ++n) {
    for (int g = 0; g < sp.groups; ++g) {
      for (int ocl = 0; ocl < d.cout_g; ++ocl) {
        const int oc = g * d.cout_g + ocl;
        const S* dyp = dy.plane(n, oc);
        for (int icl = 0; icl < d.cin_g; ++icl) {
          const int ic = g * d.cin_g + icl;
          const S* inp = x.plane(n, ic);
          for (int kh = 0; kh < sp.kh; ++kh) {
            int oy0, oy1;
            detail::tap_range(H, d.out_h, sp.stride, sp.pad, kh, oy0, oy1);
            for (int kw = 0; kw < sp.kw; ++kw) {
              int ox0, ox1;
              detail::tap_range(W, d.out_w, sp.stride, sp.pad, kw, ox0, ox1);
              if (ox1 <= ox0 || oy1 <= oy0) continue;
              const int len = ox1 - ox0;
              auto a = acc.head(len);
              a.setZero();
              for (int oy = oy0; oy < oy1; ++oy) {
                const int iy = oy * sp.stride + kh - sp.pad;
                const S* dyrow = dyp + static_cast<Eigen::Index>(oy) * d.out_w + ox0;
                const S* irow = inp + static_cast<Eigen::Index>(iy) * W + ox0 * sp.stride + kw - sp.pad;
                if (sp.stride == 1) {
                  a += CMapVec<S>(irow, len) * CMapVec<S>(dyrow, len);
                } else {
                  a += detail::StridedCMap<S>(irow, len, Eigen::InnerStride<>(sp.stride)) *
                       CMapVec<S>(dyrow, len);
                }
              }
              dw.at(oc, icl, kh, kw) += a.sum();
            }
          }
        }
      }
    }
  }
  return dw;
}

// dL/dbias for conv2d: per-channel sum of dy.
template <std::floating_point S>
VecX<S> conv2d_grad_bias(const Tensor<S>& dy) {
  VecX<S> db = VecX<S>::Zero(dy.c());
  for (int n = 0; n < dy.n(); ++n)
    for (int c = 0; c < dy.c(); ++c) db[c] += dy.plane_map(n, c).sum();
  return db;
}

// ---------------------------------------------------------------------------
// Batch norm

template <std::floating_point S>
struct BnParams {
  VecX<S> gamma, beta, running_mean, running_var;
  S eps = S(1e-5);

  static BnParams identity(int channels, S eps = S(1e-5)) {
    BnParams bn;
    bn.gamma = VecX<S>::Ones(channels);
    bn.beta = VecX<S>::Zero(channels);
    bn.running_mean = VecX<S>::Zero(channels);
    bn.running_var = VecX<S>::Ones(channels);
    bn.eps = eps;
    return bn;
  }

  int channels() const { return static_cast<int>(gamma.size()); }

  template <std::floating_point T>
  BnParams<T> cast() const {
    BnParams<T> o;
    o.gamma = gamma.template cast<T>();
    o.beta = beta.template cast<T>();
    o.running_mean = running_mean.template cast<T>();
    o.running_var = running_var.template cast<T>();
    o.eps = static_cast<T>(eps);
    return o;
  }
};

template <std::floating_point S>
void check_bn(const Tensor<S>& x, const BnParams<S>& bn) {
  if (bn.channels() != x.c() || bn.beta.size() != bn.gamma.size() ||
      bn.running_mean.size() != bn.gamma.size() || bn.running_var.size() != bn.gamma.size())
    throw InvalidInput("batch_norm: channel count mismatch");
  for (int c = 0; c < bn.channels(); ++c)
    if (!(bn.running_var[c] + bn.eps > S(0)))
      throw InvalidParameter("batch_norm: running_var + eps must be positive (channel " +
                             std::to_string(c) + ")");
}

// y = gamma * (x - running_mean) / sqrt(running_var + eps) + beta
template <std::floating_point S>
Tensor<S> batch_norm_inference(const Tensor<S>& x, const BnParams<S>& bn) {
  check_bn(x, bn);
  Tensor<S> y = x.like_zeros();
  for (int c = 0; c < x.c(); ++c) {
    const S inv = S(1) / std::sqrt(bn.running_var[c] + bn.eps);
    const S a = bn.gamma[c] * inv;
    const S b = bn.beta[c] - bn.running_mean[c] * bn.gamma[c] * inv;
    for (int n = 0; n < x.n(); ++n) y.plane_map(n, c) = a * x.plane_map(n, c) + b;
  }
  return y;
}

template <std::floating_point S>
Tensor<S> batch_norm_inference_grad_input(const Tensor<S>& dy, const BnParams<S>& bn) {
  check_bn(dy, bn);
  Tensor<S> dx = dy.like_zeros();
  for (int c = 0; c < dy.c(); ++c) {
    const S a = bn.gamma[c] / std::sqrt(bn.running_var[c] + bn.eps);
    for (int n = 0; n < dy.n(); ++n) dx.plane_map(n, c) = a * dy.plane_map(n, c);
  }
  return dx;
}

template <std::floating_point S>
struct BnBatchStats {
  VecX<S> mean, var;  // biased variance over (N, H, W) per channel
};

// Training-mode batch norm over per-batch statistics; optionally updates the
// running estimates with the usual momentum rule.
template <std::floating_point S>
Tensor<S> batch_norm_train(const Tensor<S>& x, BnParams<S>& bn, S momentum, bool update_running,
                           BnBatchStats<S>* stats_out) {
  check_bn(x, bn);
  const int C = x.c();
  const S count = static_cast<S>(static_cast<Eigen::Index>(x.n()) * x.plane_size());
  BnBatchStats<S> st;
  st.mean = VecX<S>::Zero(C);
  st.var = VecX<S>::Zero(C);
  for (int c = 0; c < C; ++c) {
    S sum = 0;
    for (int n = 0; n < x.n(); ++n) sum += x.plane_map(n, c).sum();
    const S mean = sum / count;
    S sq = 0;
    for (int n = 0; n < x.n(); ++n) sq += (x.plane_map(n, c) - mean).square().sum();
    st.mean[c] = mean;
    st.var[c] = sq / count;
  }
  Tensor<S> y = x.like_zeros();
  for (int c = 0; c < C; ++c) {
    const S inv = S(1) / std::sqrt(st.var[c] + bn.eps);
    for (int n = 0; n < x.n(); ++n)
      y.plane_map(n, c) = bn.gamma[c] * ((x.plane_map(n, c) - st.mean[c]) * inv) + bn.beta[c];
  }
  if (update_running) {
    bn.running_mean = (S(1) - momentum) * bn.running_mean + momentum * st.mean;
    bn.running_var = (S(1) - momentum) * bn.running_var + momentum * st.var;
  }
  if (stats_out) *stats_out = std::move(st);
  return y;
}

// Adjoint of training-mode batch norm w.r.t. input, gamma and beta.
template <std::floating_point S>
void batch_norm_train_backward(const Tensor<S>& x, const BnBatchStats<S>& st,
                               const BnParams<S>& bn, const Tensor<S>& dy, Tensor<S>& dx,
                               VecX<S>& dgamma, VecX<S>& dbeta) {
  const int C = x.c();
  const S m = static_cast<S>(static_cast<Eigen::Index>(x.n()) * x.plane_size());
  dx = x.like_zeros();
  dgamma = VecX<S>::Zero(C);
  dbeta = VecX<S>::Zero(C);
  for (int c = 0; c < C; ++c) {
    const S inv = S(1) / std::sqrt(st.var[c] + bn.eps);
    S sum_dy = 0, sum_dy_xhat = 0;
    for (int n = 0; n < x.n(); ++n) {
      auto xm = x.plane_map(n, c) - st.mean[c];
      auto d = dy.plane_map(n, c);
      sum_dy += d.sum();
      sum_dy_xhat += (d * xm).sum() * inv;
    }
    dgamma[c] = sum_dy_xhat;
    dbeta[c] = sum_dy;
    const S g = bn.gamma[c];
    for (int n = 0; n < x.n(); ++n) {
      auto xhat = (x.plane_map(n, c) - st.mean[c]) * inv;
      dx.plane_map(n, c) =
          g * inv * (dy.plane_map(n, c) - sum_dy / m - xhat * (sum_dy_xhat / m));
    }
  }
}

// ---------------------------------------------------------------------------
// Activations

enum class Act { relu, sigmoid };

template <std::floating_point S>
S sigmoid_scalar(S v) {
  if (v >= S(0)) return S(1) / (S(1) + std::exp(-v));
  const S e = std::exp(v);
  return e / (S(1) + e);
}

template <std::floating_point S>
Tensor<S> activation(const Tensor<S>& x, Act mode) {
  Tensor<S> y = x.like_zeros();
  if (mode == Act::relu) {
    y.data = x.data.max(S(0));
  } else {
    for (Eigen::Index i = 0; i < x.size(); ++i) y.data[i] = sigmoid_scalar(x.data[i]);
  }
  return y;
}

template <std::floating_point S>
Tensor<S> relu_backward(const Tensor<S>& x, const Tensor<S>& dy) {
  Tensor<S> dx = dy.like_zeros();
  dx.data = (x.data > S(0)).select(dy.data, VecX<S>::Zero(dy.size()));
  return dx;
}

template <std::floating_point S>
Tensor<S> sigmoid_backward(const Tensor<S>& y, const Tensor<S>& dy) {
  Tensor<S> dx = dy.like_zeros();
  dx.data = dy.data * y.data * (S(1) - y.data);
  return dx;
}

// ---------------------------------------------------------------------------
// Max pooling (non-overlapping: kernel == stride, dims divisible)

template <std::floating_point S>
Tensor<S> maxpool2d(const Tensor<S>& x, int kernel, int stride) {
  if (kernel != stride) throw InvalidInput("maxpool2d: kernel must equal stride");
  if (kernel < 1) throw InvalidInput("maxpool2d: kernel must be >= 1");
  if (x.h() % stride != 0 || x.w() % stride != 0)
    throw InvalidInput("maxpool2d: spatial dims " + x.shape_str() + " not divisible by stride " +
                       std::to_string(stride));
  const int oh = x.h() / stride, ow = x.w() / stride;
  Tensor<S> y(x.n(), x.c(), oh, ow);
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const S* in = x.plane(n, c);
      S* out = y.plane(n, c);
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          S best = in[static_cast<Eigen::Index>(oy * stride) * x.w() + ox * stride];
          for (int ky = 0; ky < kernel; ++ky)
            for (int kx = 0; kx < kernel; ++kx)
              best = std::max(best,
                              in[static_cast<Eigen::Index>(oy * stride + ky) * x.w() + ox * stride + kx]);
          out[static_cast<Eigen::Index>(oy) * ow + ox] = best;
        }
      }
    }
  }
  return y;
}

// Routes each output gradient to the first (row-major) max of its window.
template <std::floating_point S>
Tensor<S> maxpool2d_backward(const Tensor<S>& x, const Tensor<S>& dy, int kernel) {
  Tensor<S> dx = x.like_zeros();
  const int oh = x.h() / kernel, ow = x.w() / kernel;
  if (dy.h() != oh || dy.w() != ow || dy.c() != x.c() || dy.n() != x.n())
    throw InvalidInput("maxpool2d_backward: dy shape mismatch");
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const S* in = x.plane(n, c);
      const S* g = dy.plane(n, c);
      S* out = dx.plane(n, c);
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          int by = oy * kernel, bx = ox * kernel;
          S best = in[static_cast<Eigen::Index>(by) * x.w() + bx];
          for (int ky = 0; ky < kernel; ++ky)
            for (int kx = 0; kx < kernel; ++kx) {
              const S v = in[static_cast<Eigen::Index>(oy * kernel + ky) * x.w() + ox * kernel + kx];
              if (v > best) {
                best = v;
                by = oy * kernel + ky;
                bx = ox * kernel + kx;
              }
            }
          out[static_cast<Eigen::Index>(by) * x.w() + bx] += g[static_cast<Eigen::Index>(oy) * ow + ox];
        }
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Bilinear upsampling (align_corners = false)

namespace detail {

struct BilinearTaps {
  std::vector<int> lo, hi;
  std::vector<double> w_hi;  // weight of hi tap; lo gets 1 - w_hi
};

inline BilinearTaps bilinear_axis(int in_dim, int factor) {
  BilinearTaps t;
  const int out_dim = in_dim * factor;
  t.lo.resize(out_dim);
  t.hi.resize(out_dim);
  t.w_hi.resize(out_dim);
  for (int o = 0; o < out_dim; ++o) {
    const double src = (o + 0.5) / factor - 0.5;
    const double fl = std::floor(src);
    double frac = src - fl;
    int lo = static_cast<int>(fl);
    int hi = lo + 1;
    if (lo < 0) lo = 0;
    if (hi > in_dim - 1) hi = in_dim - 1;
    if (lo > in_dim - 1) lo = in_dim - 1;
    t.lo[o] = lo;
    t.hi[o] = hi;
    t.w_hi[o] = frac;
  }
  return t;
}

}  // namespace detail

template <std::floating_point S>
Tensor<S> bilinear_upsample(const Tensor<S>& x, int factor) {
  if (factor < 1) throw InvalidInput("bilinear_upsample: factor must be >= 1");
  if (factor == 1) return x;
  const auto ty = detail::bilinear_axis(x.h(), factor);
  const auto tx = detail::bilinear_axis(x.w(), factor);
  Tensor<S> y(x.n(), x.c(), x.h() * factor, x.w() * factor);
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const S* in = x.plane(n, c);
      S* out = y.plane(n, c);
      for (int oy = 0; oy < y.h(); ++oy) {
        const S wy = static_cast<S>(ty.w_hi[oy]);
        const S* r0 = in + static_cast<Eigen::Index>(ty.lo[oy]) * x.w();
        const S* r1 = in + static_cast<Eigen::Index>(ty.hi[oy]) * x.w();
        S* orow = out + static_cast<Eigen::Index>(oy) * y.w();
        for (int ox = 0; ox < y.w(); ++ox) {
          const S wx = static_cast<S>(tx.w_hi[ox]);
          const int x0 = tx.lo[ox], x1 = tx.hi[ox];
          const S top = (S(1) - wx) * r0[x0] + wx * r0[x1];
          const S bot = (S(1) - wx) * r1[x0] + wx * r1[x1];
          orow[ox] = (S(1) - wy) * top + wy * bot;
        }
      }
    }
  }
  return y;
}

template <std::floating_point S>
Tensor<S> bilinear_upsample_backward(const Tensor<S>& dy, int factor,
                                     const std::array<int, 4>& x_shape) {
  Tensor<S> dx(x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
  if (factor == 1) {
    dx.data = dy.data;
    return dx;
  }
  const auto ty = detail::bilinear_axis(dx.h(), factor);
  const auto tx = detail::bilinear_axis(dx.w(), factor);
  for (int n = 0; n < dx.n(); ++n) {
    for (int c = 0; c < dx.c(); ++c) {
      const S* g = dy.plane(n, c);
      S* out = dx.plane(n, c);
      for (int oy = 0; oy < dy.h(); ++oy) {
        const S wy = static_cast<S>(ty.w_hi[oy]);
        S* r0 = out + static_cast<Eigen::Index>(ty.lo[oy]) * dx.w();
        S* r1 = out + static_cast<Eigen::Index>(ty.hi[oy]) * dx.w();
        const S* grow = g + static_cast<Eigen::Index>(oy) * dy.w();
        for (int ox = 0; ox < dy.w(); ++ox) {
          const S wx = static_cast<S>(tx.w_hi[ox]);
          const int x0 = tx.lo[ox], x1 = tx.hi[ox];
          const S gv = grow[ox];
          r0[x0] += (S(1) - wy) * (S(1) - wx) * gv;
          r0[x1] += (S(1) - wy) * wx * gv;
          r1[x0] += wy * (S(1) - wx) * gv;
          r1[x1] += wy * wx * gv;
        }
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Combine: channel concat / elementwise add

enum class CombineMode { concat_channels, add };

template <std::floating_point S>
Tensor<S> combine(const std::vector<const Tensor<S>*>& inputs, CombineMode mode) {
  if (inputs.empty()) throw InvalidInput("combine: no inputs");
  const Tensor<S>& first = *inputs[0];
  if (mode == CombineMode::add) {
    Tensor<S> y = first.like_zeros();
    y.data = first.data;
    for (size_t i = 1; i < inputs.size(); ++i) {
      if (!inputs[i]->same_shape(first))
        throw InvalidInput("combine(add): shape mismatch " + inputs[i]->shape_str() + " vs " +
                           first.shape_str());
      y.data += inputs[i]->data;
    }
    return y;
  }
  int total_c = 0;
  for (const Tensor<S>* t : inputs) {
    if (t->n() != first.n() || t->h() != first.h() || t->w() != first.w())
      throw InvalidInput("combine(concat): batch/spatial mismatch " + t->shape_str() + " vs " +
                         first.shape_str());
    total_c += t->c();
  }
  Tensor<S> y(first.n(), total_c, first.h(), first.w());
  for (int n = 0; n < first.n(); ++n) {
    int c_off = 0;
    for (const Tensor<S>* t : inputs) {
      for (int c = 0; c < t->c(); ++c) y.plane_map(n, c_off + c) = t->plane_map(n, c);
      c_off += t->c();
    }
  }
  return y;
}

template <std::floating_point S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return combine<S>({&a, &b}, CombineMode::add);
}

template <std::floating_point S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
  return combine<S>({&a, &b}, CombineMode::concat_channels);
}

// Channel slice [c0, c0+len) of x; adjoint of concat.
template <std::floating_point S>
Tensor<S> slice_channels(const Tensor<S>& x, int c0, int len) {
  if (c0 < 0 || len < 1 || c0 + len > x.c()) throw InvalidInput("slice_channels: bad range");
  Tensor<S> y(x.n(), len, x.h(), x.w());
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < len; ++c) y.plane_map(n, c) = x.plane_map(n, c0 + c);
  return y;
}

// Batch slice: image n of x as a batch-1 tensor.
template <std::floating_point S>
Tensor<S> slice_batch(const Tensor<S>& x, int n) {
  if (n < 0 || n >= x.n()) throw InvalidInput("slice_batch: index out of range");
  Tensor<S> y(1, x.c(), x.h(), x.w());
  const Eigen::Index sz = y.size();
  y.data = x.data.segment(static_cast<Eigen::Index>(n) * sz, sz);
  return y;
}

// Stack batch-1 tensors along the batch dim.
template <std::floating_point S>
Tensor<S> stack_batch(const std::vector<const Tensor<S>*>& inputs) {
  if (inputs.empty()) throw InvalidInput("stack_batch: no inputs");
  const Tensor<S>& first = *inputs[0];
  Tensor<S> y(static_cast<int>(inputs.size()), first.c(), first.h(), first.w());
  const Eigen::Index sz = first.size();
  for (size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i]->same_shape(first) || inputs[i]->n() != 1)
      throw InvalidInput("stack_batch: inputs must be identical batch-1 shapes");
    y.data.segment(static_cast<Eigen::Index>(i) * sz, sz) = inputs[i]->data;
  }
  return y;
}

}  // namespace spirdet
