#pragma once

#include <Eigen/Core>
#include <cmath>
#include <optional>

#include "useg/autodiff.hpp"
#include "useg/conv.hpp"

namespace useg {

// ---- conv ------------------------------------------------------------------

template <typename T>
Variable<T> conv2d(const Variable<T>& x, const ConvSpec& spec,
                   const Variable<T>& weight, const Variable<T>& bias = {}) {
  Tensor<T> out = conv2d_forward(x->value, weight->value,
                                 bias ? &bias->value : nullptr, spec);
  auto node = detail::make_op_node(std::move(out), "conv2d",
                                   {x, weight, bias ? bias : Variable<T>{}});
  if (node->requires_grad) {
    VarNode<T>* self = node.get();
    Variable<T> px = x, pw = weight, pb = bias;
    node->backprop = [self, px, pw, pb, spec] {
      Tensor<T> dx, dw, db;
      const bool need_x = px->requires_grad;
      const bool need_w = pw->requires_grad;
      const bool need_b = pb && pb->requires_grad;
      if (need_x) dx = zeros_like(px->value);
      if (need_w) dw = zeros_like(pw->value);
      if (need_b) db = zeros_like(pb->value);
      conv2d_backward(px->value, pw->value, spec, self->grad,
                      need_x ? &dx : nullptr, need_w ? &dw : nullptr,
                      need_b ? &db : nullptr);
      if (need_x) px->accumulate(dx);
      if (need_w) pw->accumulate(dw);
      if (need_b) pb->accumulate(db);
    };
  }
  return node;
}

// Learnable convolution layer. Weight uses Kaiming-uniform fan-in init; bias
// starts at zero. Convs feeding a BatchNorm are built without bias.
template <typename T>
struct Conv2d {
  ConvSpec spec;
  Variable<T> weight;
  Variable<T> bias;  // null when the layer is bias-free

  Conv2d() = default;

  Conv2d(const ConvSpec& s, Rng& rng, bool with_bias) : spec(s) {
    spec.validate();
    const std::int64_t fan_in = static_cast<std::int64_t>(s.in_channels) /
                                s.groups * s.kernel_h * s.kernel_w;
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    weight = make_variable(
        uniform_tensor<T>(s.weight_shape(), rng, -bound, bound), true);
    if (with_bias) {
      weight->op = "param";
      bias = make_variable(zeros<T>({1, s.out_channels, 1, 1}), true);
      bias->op = "param";
    }
  }

  Variable<T> forward(const Variable<T>& x) const {
    return conv2d(x, spec, weight, bias);
  }
};

// ---- batch norm --------------------------------------------------------------

template <typename T>
Variable<T> batchnorm2d(const Variable<T>& x, const Variable<T>& gamma,
                        const Variable<T>& beta, Tensor<T>& running_mean,
                        Tensor<T>& running_var, bool training, T eps = T(1e-5),
                        T momentum = T(0.1)) {
  const Shape4 s = x->value.shape();
  const std::int64_t c = s.c;
  if (gamma->value.c() != c || beta->value.c() != c || running_mean.c() != c ||
      running_var.c() != c) {
    throw ShapeError("batchnorm parameter length mismatch for C=" +
                     std::to_string(c));
  }
  const std::int64_t m = s.n * s.h * s.w;
  if (training && m == 1) {
    throw ValueError("batchnorm train mode needs N*H*W > 1, got 1");
  }

  const std::int64_t hw = s.h * s.w;
  std::vector<T> mean_c(static_cast<std::size_t>(c));
  std::vector<T> invstd_c(static_cast<std::size_t>(c));

  if (training) {
    for (std::int64_t ic = 0; ic < c; ++ic) {
      T acc = T(0);
      for (std::int64_t in = 0; in < s.n; ++in) {
        const T* p = x->value.data() + (in * c + ic) * hw;
        for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
      }
      const T mu = acc / static_cast<T>(m);
      T var = T(0);
      for (std::int64_t in = 0; in < s.n; ++in) {
        const T* p = x->value.data() + (in * c + ic) * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
          const T d = p[i] - mu;
          var += d * d;
        }
      }
      var /= static_cast<T>(m);
      mean_c[static_cast<std::size_t>(ic)] = mu;
      invstd_c[static_cast<std::size_t>(ic)] = T(1) / std::sqrt(var + eps);
      // Running stats track the unbiased variance estimate.
      const T var_unbiased =
          m > 1 ? var * static_cast<T>(m) / static_cast<T>(m - 1) : var;
      running_mean[ic] = (T(1) - momentum) * running_mean[ic] + momentum * mu;
      running_var[ic] =
          (T(1) - momentum) * running_var[ic] + momentum * var_unbiased;
    }
  } else {
    for (std::int64_t ic = 0; ic < c; ++ic) {
      mean_c[static_cast<std::size_t>(ic)] = running_mean[ic];
      invstd_c[static_cast<std::size_t>(ic)] =
          T(1) / std::sqrt(running_var[ic] + eps);
    }
  }

  Tensor<T> out(s);
  for (std::int64_t in = 0; in < s.n; ++in) {
    for (std::int64_t ic = 0; ic < c; ++ic) {
      const T mu = mean_c[static_cast<std::size_t>(ic)];
      const T inv = invstd_c[static_cast<std::size_t>(ic)];
      const T g = gamma->value[ic];
      const T b = beta->value[ic];
      const T* p = x->value.data() + (in * c + ic) * hw;
      T* q = out.data() + (in * c + ic) * hw;
      for (std::int64_t i = 0; i < hw; ++i) q[i] = (p[i] - mu) * inv * g + b;
    }
  }

  auto node =
      detail::make_op_node(std::move(out), "batchnorm2d", {x, gamma, beta});
  if (node->requires_grad) {
    VarNode<T>* self = node.get();
    Variable<T> px = x, pg = gamma, pb = beta;
    node->backprop = [self, px, pg, pb, mean_c, invstd_c, training, m, c, hw,
                      s] {
      // Per channel: xhat = (x-mu)*inv; dy -> dgamma, dbeta always; dx depends
      // on whether mu/var were batch statistics (train) or constants (infer).
      Tensor<T> dx = px->requires_grad ? zeros_like(px->value) : Tensor<T>();
      Tensor<T> dgamma = zeros<T>({1, c, 1, 1});
      Tensor<T> dbeta = zeros<T>({1, c, 1, 1});
      for (std::int64_t ic = 0; ic < c; ++ic) {
        const T mu = mean_c[static_cast<std::size_t>(ic)];
        const T inv = invstd_c[static_cast<std::size_t>(ic)];
        const T g = pg->value[ic];
        T sum_dy = T(0), sum_dy_xhat = T(0);
        for (std::int64_t in = 0; in < s.n; ++in) {
          const T* xp = px->value.data() + (in * c + ic) * hw;
          const T* gp = self->grad.data() + (in * c + ic) * hw;
          for (std::int64_t i = 0; i < hw; ++i) {
            sum_dy += gp[i];
            sum_dy_xhat += gp[i] * (xp[i] - mu) * inv;
          }
        }
        dgamma[ic] = sum_dy_xhat;
        dbeta[ic] = sum_dy;
        if (!px->requires_grad) continue;
        if (training) {
          const T inv_m = T(1) / static_cast<T>(m);
          for (std::int64_t in = 0; in < s.n; ++in) {
            const T* xp = px->value.data() + (in * c + ic) * hw;
            const T* gp = self->grad.data() + (in * c + ic) * hw;
            T* dp = dx.data() + (in * c + ic) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
              const T xhat = (xp[i] - mu) * inv;
              dp[i] += g * inv * inv_m *
                       (static_cast<T>(m) * gp[i] - sum_dy - xhat * sum_dy_xhat);
            }
          }
        } else {
          for (std::int64_t in = 0; in < s.n; ++in) {
            const T* gp = self->grad.data() + (in * c + ic) * hw;
            T* dp = dx.data() + (in * c + ic) * hw;
            for (std::int64_t i = 0; i < hw; ++i) dp[i] += g * inv * gp[i];
          }
        }
      }
      if (px->requires_grad) px->accumulate(dx);
      if (pg->requires_grad) pg->accumulate(dgamma);
      if (pb->requires_grad) pb->accumulate(dbeta);
    };
  }
  return node;
}

template <typename T>
struct BatchNorm2d {
  Variable<T> gamma;
  Variable<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);

  BatchNorm2d() = default;

  explicit BatchNorm2d(int channels)
      : gamma(make_variable(ones<T>({1, channels, 1, 1}), true)),
        beta(make_variable(zeros<T>({1, channels, 1, 1}), true)),
        running_mean(zeros<T>({1, channels, 1, 1})),
        running_var(ones<T>({1, channels, 1, 1})) {}

  Variable<T> forward(const Variable<T>& x, bool training) {
    return batchnorm2d(x, gamma, beta, running_mean, running_var, training,
                       eps, momentum);
  }
};

// ---- activations -------------------------------------------------------------

enum class Act { gelu, sigmoid, relu, identity };

namespace detail {

template <typename T>
using ArrX = Eigen::Array<T, Eigen::Dynamic, 1>;

// GELU via the tanh approximation 0.5*t*(1 + tanh(sqrt(2/pi)*(t + 0.044715 t^3))).
template <typename T>
void gelu_forward(const T* x, T* y, std::int64_t n) {
  const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  const T a = static_cast<T>(0.044715);
  Eigen::Map<const ArrX<T>> xm(x, n);
  Eigen::Map<ArrX<T>> ym(y, n);
  ym = T(0.5) * xm * (T(1) + (c * (xm + a * xm.cube())).tanh());
}

template <typename T>
void gelu_backward(const T* x, const T* dy, T* dx, std::int64_t n) {
  const T c = static_cast<T>(0.7978845608028654);
  const T a = static_cast<T>(0.044715);
  Eigen::Map<const ArrX<T>> xm(x, n);
  Eigen::Map<const ArrX<T>> gm(dy, n);
  Eigen::Map<ArrX<T>> dm(dx, n);
  ArrX<T> u = c * (xm + a * xm.cube());
  ArrX<T> t = u.tanh();
  dm += gm * (T(0.5) * (T(1) + t) +
              T(0.5) * xm * (T(1) - t.square()) * c * (T(1) + T(3) * a * xm.square()));
}

template <typename T>
void sigmoid_forward(const T* x, T* y, std::int64_t n) {
  Eigen::Map<const ArrX<T>> xm(x, n);
  Eigen::Map<ArrX<T>> ym(y, n);
  ym = T(1) / (T(1) + (-xm).exp());
}

}  // namespace detail

template <typename T>
Tensor<T> activation_forward(const Tensor<T>& x, Act kind) {
  Tensor<T> out(x.shape());
  const std::int64_t n = x.size();
  switch (kind) {
    case Act::gelu:
      detail::gelu_forward(x.data(), out.data(), n);
      break;
    case Act::sigmoid:
      detail::sigmoid_forward(x.data(), out.data(), n);
      break;
    case Act::relu:
      for (std::int64_t i = 0; i < n; ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
      break;
    case Act::identity:
      out = x;
      break;
  }
  return out;
}

template <typename T>
Variable<T> activation(const Variable<T>& x, Act kind) {
  if (kind == Act::identity) return x;
  auto node = detail::make_op_node(activation_forward(x->value, kind),
                                   "activation", {x});
  if (node->requires_grad) {
    VarNode<T>* self = node.get();
    Variable<T> px = x;
    node->backprop = [self, px, kind] {
      const std::int64_t n = px->value.size();
      Tensor<T> dx = zeros_like(px->value);
      switch (kind) {
        case Act::gelu:
          detail::gelu_backward(px->value.data(), self->grad.data(), dx.data(),
                                n);
          break;
        case Act::sigmoid:
          for (std::int64_t i = 0; i < n; ++i) {
            const T sv = self->value[i];
            dx[i] = self->grad[i] * sv * (T(1) - sv);
          }
          break;
        case Act::relu:
          for (std::int64_t i = 0; i < n; ++i)
            dx[i] = px->value[i] > T(0) ? self->grad[i] : T(0);
          break;
        case Act::identity:
          break;
      }
      px->accumulate(dx);
    };
  }
  return node;
}

template <typename T>
Variable<T> gelu(const Variable<T>& x) {
  return activation(x, Act::gelu);
}
template <typename T>
Variable<T> sigmoid(const Variable<T>& x) {
  return activation(x, Act::sigmoid);
}
template <typename T>
Variable<T> relu(const Variable<T>& x) {
  return activation(x, Act::relu);
}

// ---- softmax over channels ---------------------------------------------------

template <typename T>
Tensor<T> softmax_channels_forward(const Tensor<T>& x) {
  const Shape4 s = x.shape();
  Tensor<T> out(s);
  const std::int64_t hw = s.h * s.w;
  for (std::int64_t in = 0; in < s.n; ++in) {
    for (std::int64_t i = 0; i < hw; ++i) {
      const std::int64_t base = in * s.c * hw + i;
      T mx = x[base];
      for (std::int64_t ic = 1; ic < s.c; ++ic)
        mx = std::max(mx, x[base + ic * hw]);
      T denom = T(0);
      for (std::int64_t ic = 0; ic < s.c; ++ic) {
        const T e = std::exp(x[base + ic * hw] - mx);
        out[base + ic * hw] = e;
        denom += e;
      }
      const T inv = T(1) / denom;
      for (std::int64_t ic = 0; ic < s.c; ++ic) out[base + ic * hw] *= inv;
    }
  }
  return out;
}

template <typename T>
Variable<T> softmax_channels(const Variable<T>& x) {
  auto node = detail::make_op_node(softmax_channels_forward(x->value),
                                   "softmax_channels", {x});
  if (node->requires_grad) {
    VarNode<T>* self = node.get();
    Variable<T> px = x;
    node->backprop = [self, px] {
      const Shape4 s = px->value.shape();
      const std::int64_t hw = s.h * s.w;
      Tensor<T> dx(s);
      for (std::int64_t in = 0; in < s.n; ++in) {
        for (std::int64_t i = 0; i < hw; ++i) {
          const std::int64_t base = in * s.c * hw + i;
          T dot = T(0);
          for (std::int64_t ic = 0; ic < s.c; ++ic)
            dot += self->grad[base + ic * hw] * self->value[base + ic * hw];
          for (std::int64_t ic = 0; ic < s.c; ++ic) {
            const std::int64_t k = base + ic * hw;
            dx[k] = self->value[k] * (self->grad[k] - dot);
          }
        }
      }
      px->accumulate(dx);
    };
  }
  return node;
}

// ---- resampling ----------------------------------------------------------------

// 2x2 max pool, stride 2. Ties route the gradient to the first element in
// row-major window order.
template <typename T>
Variable<T> maxpool2(const Variable<T>& x) {
  const Shape4 s = x->value.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw ValueError("maxpool2 needs even H,W, got " + s.str());
  }
  const std::int64_t oh = s.h / 2, ow = s.w / 2;
  Tensor<T> out({s.n, s.c, oh, ow});
  std::vector<std::int32_t> argmax(
      static_cast<std::size_t>(out.size()));  // offset within input plane
  const std::int64_t hw = s.h * s.w;
  const std::int64_t ohw = oh * ow;
  for (std::int64_t nc = 0; nc < s.n * s.c; ++nc) {
    const T* p = x->value.data() + nc * hw;
    T* q = out.data() + nc * ohw;
    std::int32_t* am = argmax.data() + nc * ohw;
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        const std::int64_t i0 = (2 * oy) * s.w + 2 * ox;
        const std::int64_t cand[4] = {i0, i0 + 1, i0 + s.w, i0 + s.w + 1};
        std::int64_t best = cand[0];
        T bv = p[cand[0]];
        for (int k = 1; k < 4; ++k) {
          if (p[cand[k]] > bv) {
            bv = p[cand[k]];
            best = cand[k];
          }
        }
        q[oy * ow + ox] = bv;
        am[oy * ow + ox] = static_cast<std::int32_t>(best);
      }
    }
  }
  auto node = detail::make_op_node(std::move(out), "maxpool2", {x});
  if (node->requires_grad) {
    VarNode<T>* self = node.get();
    Variable<T> px = x;
    auto am = std::make_shared<std::vector<std::int32_t>>(std::move(argmax));
    node->backprop = [self, px, am, hw, ohw] {
      const Shape4 s = px->value.shape();
      Tensor<T> dx = zeros_like(px->value);
      for (std::int64_t nc = 0; nc < s.n * s.c; ++nc) {
        const T* g = self->grad.data() + nc * ohw;
        T* d = dx.data() + nc * hw;
        const std::int32_t* a = am->data() + nc * ohw;
        for (std::int64_t i = 0; i < ohw; ++i) d[a[i]] += g[i];
      }
      px->accumulate(dx);
    };
  }
  return node;
}

// 2x2 mean pool, stride 2.
template <typename T>
Variable<T> avgpool2(const Variable<T>& x) {
  const Shape4 s = x->value.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw ValueError("avgpool2 needs even H,W, got " + s.str());
  }
  const std::int64_t oh = s.h / 2, ow = s.w / 2;
  Tensor<T> out({s.n, s.c, oh, ow});
  const std::int64_t hw = s.h * s.w;
  const std::int64_t ohw = oh * ow;
  for (std::int64_t nc = 0; nc < s.n * s.c; ++nc) {
    const T* p = x->value.data() + nc * hw;
    T* q = out.data() + nc * ohw;
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        const std::int64_t i0 = (2 * oy) * s.w + 2 * ox;
        q[oy * ow + ox] =
            (p[i0] + p[i0 + 1] + p[i0 + s.w] + p[i0 + s.w + 1]) * T(0.25);
      }
    }
  }
  auto node = detail::make_op_node(std::move(out), "avgpool2", {x});
  if (node->requires_grad) {
    VarNode<T>* self = node.get();
    Variable<T> px = x;
    node->backprop = [self, px] {
      const Shape4 s = px->value.shape();
      const std::int64_t oh = s.h / 2, ow = s.w / 2;
      Tensor<T> dx(s);
      for (std::int64_t nc = 0; nc < s.n * s.c; ++nc) {
        const T* g = self->grad.data() + nc * oh * ow;
        T* d = dx.data() + nc * s.h * s.w;
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const T v = g[oy * ow + ox] * T(0.25);
            const std::int64_t i0 = (2 * oy) * s.w + 2 * ox;
            d[i0] = v;
            d[i0 + 1] = v;
            d[i0 + s.w] = v;
            d[i0 + s.w + 1] = v;
          }
        }
      }
      px->accumulate(dx);
    };
  }
  return node;
}

namespace detail {

// Source coordinate for x2 bilinear upsampling: (i_out + 0.5)/2 - 0.5,
// clamped to borders.
struct Lerp {
  std::int32_t i0, i1;
  float w1;  // weight of i1; i0 gets 1-w1
};

inline std::vector<Lerp> up2_coeffs(std::int64_t in_len) {
  std::vector<Lerp> cs(static_cast<std::size_t>(in_len * 2));
  for (std::int64_t o = 0; o < in_len * 2; ++o) {
    const double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    const double f = std::floor(src);
    double w1 = src - f;
    std::int64_t i0 = static_cast<std::int64_t>(f);
    std::int64_t i1 = i0 + 1;
    if (i0 < 0) i0 = 0;
    if (i1 < 0) i1 = 0;
    if (i0 > in_len - 1) i0 = in_len - 1;
    if (i1 > in_len - 1) i1 = in_len - 1;
    cs[static_cast<std::size_t>(o)] = {static_cast<std::int32_t>(i0),
                                       static_cast<std::int32_t>(i1),
                                       static_cast<float>(w1)};
  }
  return cs;
}

}  // namespace detail

template <typename T>
Tensor<T> upsample_bilinear2_forward(const Tensor<T>& x) {
  const Shape4 s = x.shape();
  const std::int64_t oh = s.h * 2, ow = s.w * 2;
  Tensor<T> out({s.n, s.c, oh, ow});
  const auto cy = detail::up2_coeffs(s.h);
  const auto cx = detail::up2_coeffs(s.w);
  for (std::int64_t nc = 0; nc < s.n * s.c; ++nc) {
    const T* p = x.data() + nc * s.h * s.w;
    T* q = out.data() + nc * oh * ow;
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      const auto& ly = cy[static_cast<std::size_t>(oy)];
      const T wy1 = static_cast<T>(ly.w1);
      const T* r0 = p + ly.i0 * s.w;
      const T* r1 = p + ly.i1 * s.w;
      T* dst = q + oy * ow;
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        const auto& lx = cx[static_cast<std::size_t>(ox)];
        const T wx1 = static_cast<T>(lx.w1);
        const T top = r0[lx.i0] * (T(1) - wx1) + r0[lx.i1] * wx1;
        const T bot = r1[lx.i0] * (T(1) - wx1) + r1[lx.i1] * wx1;
        dst[ox] = top * (T(1) - wy1) + bot * wy1;
      }
    }
  }
  return out;
}

template <typename T>
Variable<T> upsample_bilinear2(const Variable<T>& x) {
  auto node = detail::make_op_node(upsample_bilinear2_forward(x->value),
                                   "upsample_bilinear2", {x});
  if (node->requires_grad) {
    VarNode<T>* self = node.get();
    Variable<T> px = x;
    node->backprop = [self, px] {
      const Shape4 s = px->value.shape();
      const std::int64_t oh = s.h * 2, ow = s.w * 2;
      const auto cy = detail::up2_coeffs(s.h);
      const auto cx = detail::up2_coeffs(s.w);
      Tensor<T> dx = zeros_like(px->value);
      for (std::int64_t nc = 0; nc < s.n * s.c; ++nc) {
        const T* g = self->grad.data() + nc * oh * ow;
        T* d = dx.data() + nc * s.h * s.w;
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          const auto& ly = cy[static_cast<std::size_t>(oy)];
          const T wy1 = static_cast<T>(ly.w1);
          T* r0 = d + ly.i0 * s.w;
          T* r1 = d + ly.i1 * s.w;
          const T* src = g + oy * ow;
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const auto& lx = cx[static_cast<std::size_t>(ox)];
            const T wx1 = static_cast<T>(lx.w1);
            const T gv = src[ox];
            r0[lx.i0] += gv * (T(1) - wy1) * (T(1) - wx1);
            r0[lx.i1] += gv * (T(1) - wy1) * wx1;
            r1[lx.i0] += gv * wy1 * (T(1) - wx1);
            r1[lx.i1] += gv * wy1 * wx1;
          }
        }
      }
      px->accumulate(dx);
    };
  }
  return node;
}

}  // namespace useg
