#pragma once

#include <Eigen/Core>

#include "useg/tensor.hpp"

namespace useg {

// Cross-correlation (no kernel flip) with zero padding, stride, dilation and
// channel groups. Depthwise is groups == in_channels; pointwise is a 1x1
// kernel with groups == 1.
struct ConvSpec {
  int in_channels = 1, out_channels = 1;
  int kernel_h = 1, kernel_w = 1;
  int stride_h = 1, stride_w = 1;
  int pad_h = 0, pad_w = 0;
  int dil_h = 1, dil_w = 1;
  int groups = 1;

  static ConvSpec pointwise(int in_c, int out_c) {
    ConvSpec s;
    s.in_channels = in_c;
    s.out_channels = out_c;
    return s;
  }

  static ConvSpec k3(int in_c, int out_c, int dilation = 1, int groups_ = 1) {
    ConvSpec s;
    s.in_channels = in_c;
    s.out_channels = out_c;
    s.kernel_h = s.kernel_w = 3;
    s.pad_h = s.pad_w = dilation;
    s.dil_h = s.dil_w = dilation;
    s.groups = groups_;
    return s;
  }

  static ConvSpec depthwise3(int channels, int dilation = 1,
                             int multiplier = 1) {
    ConvSpec s = k3(channels, channels * multiplier, dilation, channels);
    return s;
  }

  void validate() const {
    if (in_channels < 1 || out_channels < 1 || kernel_h < 1 || kernel_w < 1 ||
        stride_h < 1 || stride_w < 1 || dil_h < 1 || dil_w < 1 || groups < 1 ||
        pad_h < 0 || pad_w < 0) {
      throw ValueError("conv spec has non-positive dimension");
    }
    if (in_channels % groups != 0 || out_channels % groups != 0) {
      throw ValueError("conv groups=" + std::to_string(groups) +
                       " must divide in=" + std::to_string(in_channels) +
                       " and out=" + std::to_string(out_channels));
    }
  }

  std::int64_t out_h(std::int64_t h) const {
    return (h + 2 * pad_h - static_cast<std::int64_t>(dil_h) * (kernel_h - 1) -
            1) /
               stride_h +
           1;
  }
  std::int64_t out_w(std::int64_t w) const {
    return (w + 2 * pad_w - static_cast<std::int64_t>(dil_w) * (kernel_w - 1) -
            1) /
               stride_w +
           1;
  }

  Shape4 weight_shape() const {
    return {out_channels, in_channels / groups, kernel_h, kernel_w};
  }

  std::int64_t weight_count(bool with_bias) const {
    return weight_shape().elems() + (with_bias ? out_channels : 0);
  }

  // MACs for one forward pass at the given input resolution.
  std::int64_t macs(std::int64_t h, std::int64_t w) const {
    return out_h(h) * out_w(w) * out_channels *
           (static_cast<std::int64_t>(in_channels) / groups) * kernel_h *
           kernel_w;
  }
};

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
std::vector<T>& conv_scratch(int which) {
  thread_local std::vector<T> bufs[2];
  return bufs[which];
}

inline std::int64_t div_ceil(std::int64_t a, std::int64_t b) {
  return a >= 0 ? (a + b - 1) / b : -((-a) / b);
}

// Valid output-x range [lo, hi) for one kernel tap so the input column stays
// in bounds.
inline void tap_range(std::int64_t j, const ConvSpec& s, std::int64_t in_w,
                      std::int64_t out_w, std::int64_t& lo, std::int64_t& hi) {
  const std::int64_t off = -s.pad_w + j * s.dil_w;
  lo = std::max<std::int64_t>(0, div_ceil(-off, s.stride_w));
  if (off >= in_w) {
    hi = lo;
    return;
  }
  hi = std::min<std::int64_t>(out_w, (in_w - 1 - off) / s.stride_w + 1);
  if (hi < lo) hi = lo;
}

template <typename T>
void im2col(const T* x, std::int64_t c_in, std::int64_t in_h, std::int64_t in_w,
            const ConvSpec& s, std::int64_t oh, std::int64_t ow, T* cols) {
  const std::int64_t plane = in_h * in_w;
  const std::int64_t ohw = oh * ow;
  std::int64_t r = 0;
  for (std::int64_t ci = 0; ci < c_in; ++ci) {
    const T* xp = x + ci * plane;
    for (std::int64_t i = 0; i < s.kernel_h; ++i) {
      for (std::int64_t j = 0; j < s.kernel_w; ++j, ++r) {
        T* row = cols + r * ohw;
        std::int64_t lo, hi;
        tap_range(j, s, in_w, ow, lo, hi);
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          const std::int64_t iy = oy * s.stride_h - s.pad_h + i * s.dil_h;
          T* dst = row + oy * ow;
          if (iy < 0 || iy >= in_h) {
            for (std::int64_t ox = 0; ox < ow; ++ox) dst[ox] = T(0);
            continue;
          }
          const T* src = xp + iy * in_w;
          for (std::int64_t ox = 0; ox < lo; ++ox) dst[ox] = T(0);
          const std::int64_t base = -s.pad_w + j * s.dil_w;
          if (s.stride_w == 1) {
            for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox] = src[base + ox];
          } else {
            for (std::int64_t ox = lo; ox < hi; ++ox)
              dst[ox] = src[base + ox * s.stride_w];
          }
          for (std::int64_t ox = hi; ox < ow; ++ox) dst[ox] = T(0);
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add column gradients back onto the input plane.
template <typename T>
void col2im_accum(const T* cols, std::int64_t c_in, std::int64_t in_h,
                  std::int64_t in_w, const ConvSpec& s, std::int64_t oh,
                  std::int64_t ow, T* dx) {
  const std::int64_t plane = in_h * in_w;
  const std::int64_t ohw = oh * ow;
  std::int64_t r = 0;
  for (std::int64_t ci = 0; ci < c_in; ++ci) {
    T* xp = dx + ci * plane;
    for (std::int64_t i = 0; i < s.kernel_h; ++i) {
      for (std::int64_t j = 0; j < s.kernel_w; ++j, ++r) {
        const T* row = cols + r * ohw;
        std::int64_t lo, hi;
        tap_range(j, s, in_w, ow, lo, hi);
        const std::int64_t base = -s.pad_w + j * s.dil_w;
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          const std::int64_t iy = oy * s.stride_h - s.pad_h + i * s.dil_h;
          if (iy < 0 || iy >= in_h) continue;
          const T* src = row + oy * ow;
          T* dst = xp + iy * in_w;
          for (std::int64_t ox = lo; ox < hi; ++ox)
            dst[base + ox * s.stride_w] += src[ox];
        }
      }
    }
  }
}

// One-channel spatial accumulation used by the depthwise fast path.
template <typename T>
void dw_plane_forward(const T* x, std::int64_t in_h, std::int64_t in_w,
                      const T* k, const ConvSpec& s, T* y, std::int64_t oh,
                      std::int64_t ow) {
  for (std::int64_t i = 0; i < s.kernel_h; ++i) {
    for (std::int64_t j = 0; j < s.kernel_w; ++j) {
      const T wt = k[i * s.kernel_w + j];
      std::int64_t lo, hi;
      tap_range(j, s, in_w, ow, lo, hi);
      const std::int64_t base = -s.pad_w + j * s.dil_w;
      for (std::int64_t oy = 0; oy < oh; ++oy) {
        const std::int64_t iy = oy * s.stride_h - s.pad_h + i * s.dil_h;
        if (iy < 0 || iy >= in_h) continue;
        const T* src = x + iy * in_w + base;
        T* dst = y + oy * ow;
        if (s.stride_w == 1) {
          for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox] += wt * src[ox];
        } else {
          for (std::int64_t ox = lo; ox < hi; ++ox)
            dst[ox] += wt * src[ox * s.stride_w];
        }
      }
    }
  }
}

template <typename T>
void dw_plane_backward(const T* x, std::int64_t in_h, std::int64_t in_w,
                       const T* k, const ConvSpec& s, const T* dy,
                       std::int64_t oh, std::int64_t ow, T* dx, T* dk) {
  for (std::int64_t i = 0; i < s.kernel_h; ++i) {
    for (std::int64_t j = 0; j < s.kernel_w; ++j) {
      const T wt = k[i * s.kernel_w + j];
      T wacc = T(0);
      std::int64_t lo, hi;
      tap_range(j, s, in_w, ow, lo, hi);
      const std::int64_t base = -s.pad_w + j * s.dil_w;
      for (std::int64_t oy = 0; oy < oh; ++oy) {
        const std::int64_t iy = oy * s.stride_h - s.pad_h + i * s.dil_h;
        if (iy < 0 || iy >= in_h) continue;
        const T* xr = x + iy * in_w + base;
        const T* gr = dy + oy * ow;
        if (dx) {
          T* dr = dx + iy * in_w + base;
          for (std::int64_t ox = lo; ox < hi; ++ox) {
            const std::int64_t ix = ox * s.stride_w;
            dr[ix] += wt * gr[ox];
            wacc += xr[ix] * gr[ox];
          }
        } else {
          for (std::int64_t ox = lo; ox < hi; ++ox)
            wacc += xr[ox * s.stride_w] * gr[ox];
        }
      }
      if (dk) dk[i * s.kernel_w + j] += wacc;
    }
  }
}

}  // namespace detail

template <typename T>
void conv2d_check(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                  const ConvSpec& spec) {
  spec.validate();
  if (x.c() != spec.in_channels) {
    throw ShapeError("conv input channels " + std::to_string(x.c()) +
                     " != spec.in_channels " +
                     std::to_string(spec.in_channels));
  }
  if (w.shape() != spec.weight_shape()) {
    throw ShapeError("conv weight shape " + w.shape().str() + " != expected " +
                     spec.weight_shape().str());
  }
  if (bias && (bias->c() != spec.out_channels || bias->n() != 1 ||
               bias->h() != 1 || bias->w() != 1)) {
    throw ShapeError("conv bias shape " + bias->shape().str() +
                     " != (1," + std::to_string(spec.out_channels) + ",1,1)");
  }
  if (spec.out_h(x.h()) < 1 || spec.out_w(x.w()) < 1) {
    throw ValueError("conv geometry gives non-positive output size for input " +
                     x.shape().str());
  }
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w,
                         const Tensor<T>* bias, const ConvSpec& spec) {
  conv2d_check(x, w, bias, spec);
  const std::int64_t n = x.n(), in_h = x.h(), in_w = x.w();
  const std::int64_t oh = spec.out_h(in_h), ow = spec.out_w(in_w);
  const std::int64_t ohw = oh * ow;
  const std::int64_t c_out = spec.out_channels;
  Tensor<T> y({n, c_out, oh, ow});

  const bool is_pointwise = spec.kernel_h == 1 && spec.kernel_w == 1 &&
                            spec.stride_h == 1 && spec.stride_w == 1 &&
                            spec.pad_h == 0 && spec.pad_w == 0 &&
                            spec.groups == 1;
  const bool is_depthwise = spec.groups == spec.in_channels;

  if (is_pointwise) {
    Eigen::Map<const detail::MatRM<T>> wm(w.data(), c_out, spec.in_channels);
    for (std::int64_t in = 0; in < n; ++in) {
      Eigen::Map<const detail::MatRM<T>> xm(x.data() + in * x.c() * ohw,
                                            spec.in_channels, ohw);
      Eigen::Map<detail::MatRM<T>> ym(y.data() + in * c_out * ohw, c_out, ohw);
      ym.noalias() = wm * xm;
    }
  } else if (is_depthwise) {
    const std::int64_t mult = c_out / spec.in_channels;
    const std::int64_t ksz = spec.kernel_h * spec.kernel_w;
    y.fill(T(0));
    for (std::int64_t in = 0; in < n; ++in) {
      for (std::int64_t ci = 0; ci < spec.in_channels; ++ci) {
        const T* xp = x.data() + (in * x.c() + ci) * in_h * in_w;
        for (std::int64_t q = 0; q < mult; ++q) {
          const std::int64_t co = ci * mult + q;
          detail::dw_plane_forward(xp, in_h, in_w, w.data() + co * ksz, spec,
                                   y.data() + (in * c_out + co) * ohw, oh, ow);
        }
      }
    }
  } else {
    const std::int64_t cg_in = spec.in_channels / spec.groups;
    const std::int64_t cg_out = c_out / spec.groups;
    const std::int64_t krows = cg_in * spec.kernel_h * spec.kernel_w;
    auto& cols = detail::conv_scratch<T>(0);
    cols.resize(static_cast<std::size_t>(krows * ohw));
    for (std::int64_t in = 0; in < n; ++in) {
      for (std::int64_t g = 0; g < spec.groups; ++g) {
        const T* xg = x.data() + (in * x.c() + g * cg_in) * in_h * in_w;
        detail::im2col(xg, cg_in, in_h, in_w, spec, oh, ow, cols.data());
        Eigen::Map<const detail::MatRM<T>> wm(w.data() + g * cg_out * krows,
                                              cg_out, krows);
        Eigen::Map<const detail::MatRM<T>> cm(cols.data(), krows, ohw);
        Eigen::Map<detail::MatRM<T>> ym(
            y.data() + (in * c_out + g * cg_out) * ohw, cg_out, ohw);
        ym.noalias() = wm * cm;
      }
    }
  }

  if (bias) {
    for (std::int64_t in = 0; in < n; ++in) {
      for (std::int64_t co = 0; co < c_out; ++co) {
        const T b = (*bias)[co];
        T* p = y.data() + (in * c_out + co) * ohw;
        for (std::int64_t i = 0; i < ohw; ++i) p[i] += b;
      }
    }
  }
  return y;
}

// Accumulates input/weight/bias gradients; any of dx/dw/db may be null.
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w,
                     const ConvSpec& spec, const Tensor<T>& dy, Tensor<T>* dx,
                     Tensor<T>* dw, Tensor<T>* db) {
  const std::int64_t n = x.n(), in_h = x.h(), in_w = x.w();
  const std::int64_t oh = spec.out_h(in_h), ow = spec.out_w(in_w);
  const std::int64_t ohw = oh * ow;
  const std::int64_t c_out = spec.out_channels;

  if (db) {
    for (std::int64_t in = 0; in < n; ++in) {
      for (std::int64_t co = 0; co < c_out; ++co) {
        const T* p = dy.data() + (in * c_out + co) * ohw;
        T acc = T(0);
        for (std::int64_t i = 0; i < ohw; ++i) acc += p[i];
        (*db)[co] += acc;
      }
    }
  }

  const bool is_pointwise = spec.kernel_h == 1 && spec.kernel_w == 1 &&
                            spec.stride_h == 1 && spec.stride_w == 1 &&
                            spec.pad_h == 0 && spec.pad_w == 0 &&
                            spec.groups == 1;
  const bool is_depthwise = spec.groups == spec.in_channels;

  if (is_pointwise) {
    Eigen::Map<const detail::MatRM<T>> wm(w.data(), c_out, spec.in_channels);
    for (std::int64_t in = 0; in < n; ++in) {
      Eigen::Map<const detail::MatRM<T>> gm(dy.data() + in * c_out * ohw,
                                            c_out, ohw);
      Eigen::Map<const detail::MatRM<T>> xm(x.data() + in * x.c() * ohw,
                                            spec.in_channels, ohw);
      if (dw) {
        Eigen::Map<detail::MatRM<T>> dwm(dw->data(), c_out, spec.in_channels);
        dwm.noalias() += gm * xm.transpose();
      }
      if (dx) {
        Eigen::Map<detail::MatRM<T>> dxm(dx->data() + in * x.c() * ohw,
                                         spec.in_channels, ohw);
        dxm.noalias() += wm.transpose() * gm;
      }
    }
  } else if (is_depthwise) {
    const std::int64_t mult = c_out / spec.in_channels;
    const std::int64_t ksz = spec.kernel_h * spec.kernel_w;
    for (std::int64_t in = 0; in < n; ++in) {
      for (std::int64_t ci = 0; ci < spec.in_channels; ++ci) {
        const T* xp = x.data() + (in * x.c() + ci) * in_h * in_w;
        T* dxp = dx ? dx->data() + (in * x.c() + ci) * in_h * in_w : nullptr;
        for (std::int64_t q = 0; q < mult; ++q) {
          const std::int64_t co = ci * mult + q;
          detail::dw_plane_backward(
              xp, in_h, in_w, w.data() + co * ksz, spec,
              dy.data() + (in * c_out + co) * ohw, oh, ow, dxp,
              dw ? dw->data() + co * ksz : nullptr);
        }
      }
    }
  } else {
    const std::int64_t cg_in = spec.in_channels / spec.groups;
    const std::int64_t cg_out = c_out / spec.groups;
    const std::int64_t krows = cg_in * spec.kernel_h * spec.kernel_w;
    auto& cols = detail::conv_scratch<T>(0);
    auto& dcols = detail::conv_scratch<T>(1);
    cols.resize(static_cast<std::size_t>(krows * ohw));
    dcols.resize(static_cast<std::size_t>(krows * ohw));
    for (std::int64_t in = 0; in < n; ++in) {
      for (std::int64_t g = 0; g < spec.groups; ++g) {
        const T* xg = x.data() + (in * x.c() + g * cg_in) * in_h * in_w;
        Eigen::Map<const detail::MatRM<T>> gm(
            dy.data() + (in * c_out + g * cg_out) * ohw, cg_out, ohw);
        Eigen::Map<const detail::MatRM<T>> wm(w.data() + g * cg_out * krows,
                                              cg_out, krows);
        if (dw) {
          detail::im2col(xg, cg_in, in_h, in_w, spec, oh, ow, cols.data());
          Eigen::Map<const detail::MatRM<T>> cm(cols.data(), krows, ohw);
          Eigen::Map<detail::MatRM<T>> dwm(dw->data() + g * cg_out * krows,
                                           cg_out, krows);
          dwm.noalias() += gm * cm.transpose();
        }
        if (dx) {
          Eigen::Map<detail::MatRM<T>> dcm(dcols.data(), krows, ohw);
          dcm.noalias() = wm.transpose() * gm;
          detail::col2im_accum(dcols.data(), cg_in, in_h, in_w, spec, oh, ow,
                               dx->data() + (in * x.c() + g * cg_in) * in_h *
                                   in_w);
        }
      }
    }
  }
}

}  // namespace useg
