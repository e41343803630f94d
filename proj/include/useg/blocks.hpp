#pragma once

#include "useg/nn.hpp"

namespace useg {

// Ordered parameter/buffer registry filled by the collect() walk over a
// network. Registration order is the deterministic construction order.
template <typename T>
struct ParamSink {
  std::vector<std::pair<std::string, Variable<T>>> params;
  std::vector<std::pair<std::string, Tensor<T>*>> buffers;

  void add_param(const std::string& name, const Variable<T>& v) {
    params.emplace_back(name, v);
  }
  void add_buffer(const std::string& name, Tensor<T>* t) {
    buffers.emplace_back(name, t);
  }
};

template <typename T>
void collect(ParamSink<T>& sink, const std::string& prefix, Conv2d<T>& conv) {
  sink.add_param(prefix + ".weight", conv.weight);
  if (conv.bias) sink.add_param(prefix + ".bias", conv.bias);
}

template <typename T>
void collect(ParamSink<T>& sink, const std::string& prefix,
             BatchNorm2d<T>& bn) {
  sink.add_param(prefix + ".gamma", bn.gamma);
  sink.add_param(prefix + ".beta", bn.beta);
  sink.add_buffer(prefix + ".running_mean", &bn.running_mean);
  sink.add_buffer(prefix + ".running_var", &bn.running_var);
}

// Depthwise 3x3 + pointwise fusion + BN + GELU: the encoder/decoder stage
// unit of the ultra-light family.
template <typename T>
struct SeparableConvBlock {
  Conv2d<T> dw, pw;
  BatchNorm2d<T> bn;
  Act act = Act::gelu;

  SeparableConvBlock() = default;
  SeparableConvBlock(int in_c, int out_c, Rng& rng)
      : dw(ConvSpec::depthwise3(in_c), rng, false),
        pw(ConvSpec::pointwise(in_c, out_c), rng, false),
        bn(out_c) {}

  Variable<T> forward(const Variable<T>& x, bool training) {
    return activation(bn.forward(pw.forward(dw.forward(x)), training), act);
  }

  void collect(ParamSink<T>& s, const std::string& p) {
    useg::collect(s, p + ".dw", dw);
    useg::collect(s, p + ".pw", pw);
    useg::collect(s, p + ".bn", bn);
  }
};

// Enhanced dilated block: channels split into three equal groups, depthwise
// 3x3 branches at dilation 1/2/3 (padding = dilation, shape preserving),
// channel concat, 1x1 fusion, BN + GELU, residual from the block input.
// `expansion` widens each branch by an integer channel multiplier before the
// fusion conv squeezes back to C; 1 keeps the plain three-branch form.
template <typename T>
struct EdbBlock {
  int channels = 0;
  int expansion = 1;
  std::vector<Conv2d<T>> branches;  // dilations 1, 2, 3
  Conv2d<T> fuse;
  BatchNorm2d<T> bn;
  bool use_bn = true;
  Act act = Act::gelu;
  bool residual = true;

  EdbBlock() = default;
  EdbBlock(int c, int expansion_, Rng& rng) : channels(c), expansion(expansion_) {
    if (c % 3 != 0) {
      throw ValueError("EDB channels must be divisible by 3, got " +
                       std::to_string(c));
    }
    if (expansion < 1) throw ValueError("EDB expansion must be >= 1");
    for (int d = 1; d <= 3; ++d) {
      branches.emplace_back(ConvSpec::depthwise3(c / 3, d, expansion), rng,
                            false);
    }
    fuse = Conv2d<T>(ConvSpec::pointwise(c * expansion, c), rng, false);
    bn = BatchNorm2d<T>(c);
  }

  Variable<T> forward(const Variable<T>& x, bool training) {
    auto parts = split_channels(x, 3);
    std::vector<Variable<T>> outs;
    outs.reserve(3);
    for (int i = 0; i < 3; ++i) outs.push_back(branches[i].forward(parts[i]));
    Variable<T> y = fuse.forward(concat_channels(outs));
    if (use_bn) y = bn.forward(y, training);
    y = activation(y, act);
    if (residual) y = add(y, x);
    return y;
  }

  void collect(ParamSink<T>& s, const std::string& p) {
    for (int i = 0; i < 3; ++i) {
      useg::collect(s, p + ".branch" + std::to_string(i + 1), branches[i]);
    }
    useg::collect(s, p + ".fuse", fuse);
    if (use_bn) useg::collect(s, p + ".bn", bn);
  }
};

template <typename T>
Variable<T> edb_forward(EdbBlock<T>& block, const Variable<T>& x,
                        bool training) {
  return block.forward(x, training);
}

// Predict-gated fusion of a decoder feature x1 with the encoder skip x2:
//   x_out = x1' + x2 + alpha * sigmoid(p_region) (.) x2
//                    + beta * p_boundary (.) x2
// where x1' is x1 calibrated by a pointwise adaptor + BN and alpha/beta are
// single learnable scalars.
template <typename T>
struct PgfBlock {
  Conv2d<T> adapt_conv;
  BatchNorm2d<T> adapt_bn;
  Variable<T> region_weight;
  Variable<T> boundary_weight;

  PgfBlock() = default;
  PgfBlock(int in_c, int out_c, Rng& rng, T weight_init = T(0.5))
      : adapt_conv(ConvSpec::pointwise(in_c, out_c), rng, false),
        adapt_bn(out_c),
        region_weight(make_variable(full<T>({1, 1, 1, 1}, weight_init), true)),
        boundary_weight(
            make_variable(full<T>({1, 1, 1, 1}, weight_init), true)) {}

  Variable<T> adapt(const Variable<T>& x1, bool training) {
    return adapt_bn.forward(adapt_conv.forward(x1), training);
  }

  Variable<T> forward(const Variable<T>& x1, const Variable<T>& x2,
                      const Variable<T>& p_region,
                      const Variable<T>& p_boundary, bool training) {
    const Shape4 s2 = x2->value.shape();
    const Shape4 sr = p_region->value.shape();
    const Shape4 sb = p_boundary->value.shape();
    if (sr.c != 1 || sb.c != 1 || sr.h != s2.h || sr.w != s2.w ||
        sb.h != s2.h || sb.w != s2.w) {
      throw ShapeError("PGF maps must be (N,1,H,W) matching x2 " + s2.str() +
                       ", got " + sr.str() + " and " + sb.str());
    }
    Variable<T> x1p = adapt(x1, training);
    Variable<T> base = add(x1p, x2);
    Variable<T> region_term =
        mul(mul(x2, sigmoid(p_region)), region_weight);
    Variable<T> boundary_term = mul(mul(x2, p_boundary), boundary_weight);
    return add(add(base, region_term), boundary_term);
  }

  void collect(ParamSink<T>& s, const std::string& p) {
    useg::collect(s, p + ".adapt", adapt_conv);
    useg::collect(s, p + ".adapt_bn", adapt_bn);
    s.add_param(p + ".region_weight", region_weight);
    s.add_param(p + ".boundary_weight", boundary_weight);
  }
};

// Attention-guided fusion of the pooled stage-3 and stage-4 features. The
// trunk emits two logit channels whose per-pixel softmax gives masks
// alpha, beta with alpha + beta = 1; the fused map is
// alpha (.) stage3' + beta (.) stage4.
template <typename T>
struct AgfBlock {
  Conv2d<T> stage3_proj;  // pointwise c3 -> c4, then avgpool2 for alignment
  Conv2d<T> trunk_conv;   // 3x3 (c3'+c4) -> mid
  BatchNorm2d<T> trunk_bn;
  Conv2d<T> trunk_out;  // pointwise mid -> 2

  AgfBlock() = default;
  AgfBlock(int c3, int c4, int mid, Rng& rng)
      : stage3_proj(ConvSpec::pointwise(c3, c4), rng, true),
        trunk_conv(ConvSpec::k3(2 * c4, mid), rng, false),
        trunk_bn(mid),
        trunk_out(ConvSpec::pointwise(mid, 2), rng, true) {}

  // Returns the fused feature; `masks_out`, when non-null, receives the
  // softmax masks (N,2,H,W) for inspection.
  Variable<T> forward(const Variable<T>& stage3, const Variable<T>& stage4,
                      bool training, Variable<T>* masks_out = nullptr) {
    Variable<T> s3p = avgpool2(stage3_proj.forward(stage3));
    if (s3p->value.shape() != stage4->value.shape()) {
      throw ShapeError("AGF alignment mismatch: " + s3p->value.shape().str() +
                       " vs " + stage4->value.shape().str());
    }
    Variable<T> cat = concat_channels<T>({s3p, stage4});
    Variable<T> logits = trunk_out.forward(
        gelu(trunk_bn.forward(trunk_conv.forward(cat), training)));
    Variable<T> masks = softmax_channels(logits);
    if (masks_out) *masks_out = masks;
    auto ab = split_channels(masks, 2);
    return add(mul(s3p, ab[0]), mul(stage4, ab[1]));
  }

  void collect(ParamSink<T>& s, const std::string& p) {
    useg::collect(s, p + ".stage3_proj", stage3_proj);
    useg::collect(s, p + ".trunk_conv", trunk_conv);
    useg::collect(s, p + ".trunk_bn", trunk_bn);
    useg::collect(s, p + ".trunk_out", trunk_out);
  }
};

// Simple spatial attention: gate = sigmoid(channel mean), blended with the
// input by one learnable residual scalar: (1-alpha)*x + alpha*(gate (.) x).
template <typename T>
struct SsaBlock {
  Variable<T> alpha;

  SsaBlock() : alpha(make_variable(full<T>({1, 1, 1, 1}, T(0.3)), true)) {}

  Variable<T> forward(const Variable<T>& x) {
    Variable<T> gate = sigmoid(channel_mean(x));
    Variable<T> x_att = mul(x, gate);
    Variable<T> one_minus = affine(alpha, T(-1), T(1));
    return add(mul(x, one_minus), mul(x_att, alpha));
  }

  void collect(ParamSink<T>& s, const std::string& p) {
    s.add_param(p + ".alpha", alpha);
  }
};

template <typename T>
Variable<T> ssa_forward(SsaBlock<T>& block, const Variable<T>& x) {
  return block.forward(x);
}

// Channel shuffle permutation: view channels as a (groups, C/groups) grid,
// transpose, flatten. Output channel i reads input channel
// (i % groups) * (C/groups) + i / groups.
inline std::vector<int> shuffle_perm(int channels, int groups) {
  if (groups < 1 || channels % groups != 0) {
    throw ValueError("shuffle groups=" + std::to_string(groups) +
                     " must divide C=" + std::to_string(channels));
  }
  const int k = channels / groups;
  std::vector<int> perm(static_cast<std::size_t>(channels));
  for (int i = 0; i < channels; ++i) {
    perm[static_cast<std::size_t>(i)] = (i % groups) * k + i / groups;
  }
  return perm;
}

template <typename T>
Variable<T> channel_shuffle(const Variable<T>& x, int groups) {
  return permute_channels(x, shuffle_perm(static_cast<int>(x->value.c()), groups));
}

// Group-shuffle attention: per-group depthwise sigmoid gates followed by the
// transpose channel shuffle. Shape preserving, near-zero parameters.
template <typename T>
struct GsaBlock {
  int channels = 0;
  int groups = 0;
  std::vector<Conv2d<T>> gates;

  GsaBlock() = default;
  GsaBlock(int c, int g, Rng& rng) : channels(c), groups(g) {
    if (g < 1 || c % g != 0) {
      throw ValueError("GSA channels C=" + std::to_string(c) +
                       " not divisible by groups G=" + std::to_string(g));
    }
    for (int i = 0; i < g; ++i) {
      gates.emplace_back(ConvSpec::depthwise3(c / g), rng, true);
    }
  }

  Variable<T> forward(const Variable<T>& x) {
    auto parts = split_channels(x, groups);
    std::vector<Variable<T>> gated;
    gated.reserve(parts.size());
    for (int i = 0; i < groups; ++i) {
      gated.push_back(mul(parts[i], sigmoid(gates[i].forward(parts[i]))));
    }
    return channel_shuffle(concat_channels(gated), groups);
  }

  void collect(ParamSink<T>& s, const std::string& p) {
    for (int i = 0; i < groups; ++i) {
      useg::collect(s, p + ".gate" + std::to_string(i), gates[i]);
    }
  }
};

// Prediction head: pointwise conv to a single logit map; losses and
// consumers apply the sigmoid.
template <typename T>
struct Head {
  Conv2d<T> conv;

  Head() = default;
  Head(int in_c, Rng& rng) : conv(ConvSpec::pointwise(in_c, 1), rng, true) {}

  Variable<T> forward(const Variable<T>& x) const { return conv.forward(x); }

  void collect(ParamSink<T>& s, const std::string& p) {
    useg::collect(s, p, conv);
  }
};

}  // namespace useg
