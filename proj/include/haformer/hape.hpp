#pragma once
// Hierarchy-aware convolution block: channel reduction, four factorized
// branches at growing kernel sizes, per-branch pixel excitation, fusion,
// residual, channel shuffle. Also the single-branch residual baseline used
// by the ablation variants. Forward functions are templated on the value
// type; see params.hpp for the rebinding story.

#include <string>

#include "haformer/autodiff.hpp"
#include "haformer/init.hpp"
#include "haformer/ops.hpp"
#include "haformer/params.hpp"

namespace haformer {

inline constexpr int kHapeBranches = 4;
inline constexpr int kHapeKernels[kHapeBranches] = {3, 3, 5, 7};
inline constexpr int kHapeShuffleGroups = 4;

// Spatial attention map of the pixel-excitation gate: softmax over all
// positions of the per-pixel channel mean. Nonnegative, sums to 1.
template <class V>
V pem_attention(const V& x) {
  const Shape s = x.shape();
  require(s.size() == 3, "pem: input must be [c,h,w], got " + shape_str(s));
  V flat = reshape(channel_mean_map(x), Shape{1, s[1] * s[2]});
  return reshape(softmax(flat, 1), Shape{1, s[1], s[2]});
}

// x -> delta(x * A + x), A broadcast across channels, delta a per-channel
// PReLU. Parameter-free apart from the slope.
template <class V>
V pem_forward(const V& x, const V& slope) {
  V a = pem_attention(x);
  return prelu(add(mul(x, a), x), slope);
}

struct HapeMeta {
  int channels = 0;    // block width; divisible by 4
  int dilation = 1;    // applied to the depthwise branches only
  bool use_pem = true; // false gives the excitation-free ablation block
};

template <class V>
struct HapeBranchT {
  V c1_w, c1_b;  // k x 1
  V c2_w, c2_b;  // 1 x k
  V act_slope;
  V pem_slope;   // unset when the owning block skips excitation
};

template <class V>
struct HapeParamsT {
  using value_type = V;
  HapeMeta meta;
  V reduce_w, reduce_b;
  HapeBranchT<V> branch[kHapeBranches];
  V post_slope;
  V expand_w, expand_b;

  template <class U>
  HapeParamsT<U> like() const {
    HapeParamsT<U> o;
    o.meta = meta;
    return o;
  }

  template <class Self, class F>
  static void walk(Self& self, F&& f) {
    f("reduce.w", self.reduce_w);
    f("reduce.b", self.reduce_b);
    for (int i = 0; i < kHapeBranches; ++i) {
      const std::string p = "b" + std::to_string(i + 1) + ".";
      auto& br = self.branch[i];
      f(p + "c1.w", br.c1_w);
      f(p + "c1.b", br.c1_b);
      f(p + "c2.w", br.c2_w);
      f(p + "c2.b", br.c2_b);
      f(p + "act.slope", br.act_slope);
      if (self.meta.use_pem) f(p + "pem.slope", br.pem_slope);
    }
    f("post.slope", self.post_slope);
    f("expand.w", self.expand_w);
    f("expand.b", self.expand_b);
  }
  template <class F>
  void visit(F&& f) {
    walk(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    walk(*this, f);
  }
};

inline HapeParamsT<Tensor> make_hape(int channels, int dilation, bool use_pem, Rng& g) {
  require(channels % 4 == 0,
          "hape: channels must divide by 4, got " + std::to_string(channels));
  const int cr = channels / 4;
  HapeParamsT<Tensor> p;
  p.meta = {channels, dilation, use_pem};
  p.reduce_w = kaiming_conv({cr, channels, 1, 1}, g);
  p.reduce_b = Tensor::zeros({cr});
  for (int i = 0; i < kHapeBranches; ++i) {
    const int k = kHapeKernels[i];
    const int cin = i == 0 ? cr : 1;  // branch 1 dense, the rest depthwise
    auto& br = p.branch[i];
    br.c1_w = kaiming_conv({cr, cin, k, 1}, g);
    br.c1_b = Tensor::zeros({cr});
    br.c2_w = kaiming_conv({cr, cin, 1, k}, g);
    br.c2_b = Tensor::zeros({cr});
    br.act_slope = prelu_slopes(cr);
    if (use_pem) br.pem_slope = prelu_slopes(cr);
  }
  p.post_slope = prelu_slopes(cr);
  p.expand_w = kaiming_conv({channels, cr, 1, 1}, g);
  p.expand_b = Tensor::zeros({channels});
  return p;
}

// reduce -> four parallel branches (dense 3, depthwise 3/5/7 at the module
// dilation) -> excitation -> sum -> PReLU -> expand -> residual -> shuffle.
template <class V>
V hape_forward(const V& x, const HapeParamsT<V>& p) {
  const Shape s = x.shape();
  require(s.size() == 3 && s[0] == p.meta.channels,
          "hape_forward: input " + shape_str(s) + " does not match block width " +
              std::to_string(p.meta.channels));
  const int cr = p.meta.channels / 4;
  V xr = conv2d(x, p.reduce_w, &p.reduce_b, same_conv(1, 1));
  V acc;
  for (int i = 0; i < kHapeBranches; ++i) {
    const int k = kHapeKernels[i];
    const int d = i == 0 ? 1 : p.meta.dilation;
    const int g = i == 0 ? 1 : cr;
    const auto& br = p.branch[i];
    V y = conv2d(xr, br.c1_w, &br.c1_b, same_conv(k, 1, d, 1, g));
    y = conv2d(y, br.c2_w, &br.c2_b, same_conv(1, k, 1, d, g));
    y = prelu(y, br.act_slope);
    if (p.meta.use_pem) y = pem_forward(y, br.pem_slope);
    acc = i == 0 ? y : add(acc, y);
  }
  V fused = conv2d(prelu(acc, p.post_slope), p.expand_w, &p.expand_b, same_conv(1, 1));
  return channel_shuffle(add(fused, x), kHapeShuffleGroups);
}

struct RmMeta {
  int channels = 0;
  int dilation = 1;
};

// Baseline residual block: reduce, one dense factorized 3x3 pair, expand,
// residual add. No excitation, no shuffle.
template <class V>
struct RmParamsT {
  using value_type = V;
  RmMeta meta;
  V reduce_w, reduce_b;
  V c1_w, c1_b;
  V c2_w, c2_b;
  V act_slope;
  V expand_w, expand_b;

  template <class U>
  RmParamsT<U> like() const {
    RmParamsT<U> o;
    o.meta = meta;
    return o;
  }

  template <class Self, class F>
  static void walk(Self& self, F&& f) {
    f("reduce.w", self.reduce_w);
    f("reduce.b", self.reduce_b);
    f("c1.w", self.c1_w);
    f("c1.b", self.c1_b);
    f("c2.w", self.c2_w);
    f("c2.b", self.c2_b);
    f("act.slope", self.act_slope);
    f("expand.w", self.expand_w);
    f("expand.b", self.expand_b);
  }
  template <class F>
  void visit(F&& f) {
    walk(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    walk(*this, f);
  }
};

inline RmParamsT<Tensor> make_rm(int channels, int dilation, Rng& g) {
  require(channels % 4 == 0,
          "rm: channels must divide by 4, got " + std::to_string(channels));
  const int cr = channels / 4;
  RmParamsT<Tensor> p;
  p.meta = {channels, dilation};
  p.reduce_w = kaiming_conv({cr, channels, 1, 1}, g);
  p.reduce_b = Tensor::zeros({cr});
  p.c1_w = kaiming_conv({cr, cr, 3, 1}, g);
  p.c1_b = Tensor::zeros({cr});
  p.c2_w = kaiming_conv({cr, cr, 1, 3}, g);
  p.c2_b = Tensor::zeros({cr});
  p.act_slope = prelu_slopes(cr);
  p.expand_w = kaiming_conv({channels, cr, 1, 1}, g);
  p.expand_b = Tensor::zeros({channels});
  return p;
}

template <class V>
V rm_forward(const V& x, const RmParamsT<V>& p) {
  const Shape s = x.shape();
  require(s.size() == 3 && s[0] == p.meta.channels,
          "rm_forward: input " + shape_str(s) + " does not match block width " +
              std::to_string(p.meta.channels));
  V y = conv2d(x, p.reduce_w, &p.reduce_b, same_conv(1, 1));
  y = conv2d(y, p.c1_w, &p.c1_b, same_conv(3, 1, p.meta.dilation, 1));
  y = conv2d(y, p.c2_w, &p.c2_b, same_conv(1, 3, 1, p.meta.dilation));
  y = prelu(y, p.act_slope);
  y = conv2d(y, p.expand_w, &p.expand_b, same_conv(1, 1));
  return add(y, x);
}

}  // namespace haformer
