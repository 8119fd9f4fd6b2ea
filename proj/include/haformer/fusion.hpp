#pragma once
// Fusion of the convolutional feature map with the token branch: align the
// tokens to the map resolution, derive a per-channel gate from the pooled
// concatenation, and gate both sides before the summed rectification. Plain
// add and concat variants exist for the ablations.

#include <algorithm>
#include <string>

#include "haformer/autodiff.hpp"
#include "haformer/init.hpp"
#include "haformer/ops.hpp"
#include "haformer/params.hpp"
#include "haformer/transformer.hpp"

namespace haformer {

enum class FusionKind { cwf, add, concat, none };

inline FusionKind fusion_kind_of(const std::string& name) {
  if (name == "cwf") return FusionKind::cwf;
  if (name == "add") return FusionKind::add;
  if (name == "concat") return FusionKind::concat;
  if (name == "none") return FusionKind::none;
  fail("unknown fusion kind '" + name + "', want cwf|add|concat|none");
}

// Un-flattens tokens to their patch grid and scales up to the map resolution.
template <class V>
V reshape_tokens_to_map(const TokenGridT<V>& t, int channels, int patch, int hf, int wf) {
  V map = patch_unflatten(t.tokens, channels, t.gh, t.gw, patch);
  const Shape s = map.shape();
  if (s[1] == hf && s[2] == wf) return map;
  return bilinear_upsample(map, hf, wf);
}

struct CwfMeta {
  int ct = 0, cf = 0;
  int squeeze = 16;  // gate bottleneck ratio on the concatenated width
  int mid() const { return std::max(1, (ct + cf) / squeeze); }
};

template <class V>
struct CwfParamsT {
  using value_type = V;
  CwfMeta meta;
  V dw_w, dw_b;          // depthwise 3x3 on ct+cf channels
  V reduce_w, reduce_b;  // 1x1, ct+cf -> mid
  V post_w, post_b;      // 1x1, mid -> cf

  template <class U>
  CwfParamsT<U> like() const {
    CwfParamsT<U> o;
    o.meta = meta;
    return o;
  }

  template <class Self, class F>
  static void walk(Self& self, F&& f) {
    f("dw.w", self.dw_w);
    f("dw.b", self.dw_b);
    f("reduce.w", self.reduce_w);
    f("reduce.b", self.reduce_b);
    f("post.w", self.post_w);
    f("post.b", self.post_b);
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

inline CwfParamsT<Tensor> make_cwf(int ct, int cf, Rng& g, int squeeze = 16) {
  require(ct == cf, "fusion wants equal widths, got " + std::to_string(ct) + " and " +
                        std::to_string(cf));
  CwfParamsT<Tensor> p;
  p.meta = {ct, cf, squeeze};
  const int cg = ct + cf, mid = p.meta.mid();
  p.dw_w = kaiming_conv({cg, 1, 3, 3}, g);
  p.dw_b = Tensor::zeros({cg});
  p.reduce_w = kaiming_conv({mid, cg, 1, 1}, g);
  p.reduce_b = Tensor::zeros({mid});
  p.post_w = kaiming_conv({cf, mid, 1, 1}, g);
  p.post_b = Tensor::zeros({cf});
  return p;
}

// Gate vector in (0,1): depthwise 3x3 over the concatenation, bottleneck 1x1,
// spatial mean, widening 1x1, sigmoid. Shape [cf,1,1].
template <class V>
V cwf_gate(const V& t_map, const V& f, const CwfParamsT<V>& p) {
  const int cg = p.meta.ct + p.meta.cf;
  V g = concat(t_map, f, 0);
  g = conv2d(g, p.dw_w, &p.dw_b, same_conv(3, 3, 1, 1, cg));
  g = conv2d(g, p.reduce_w, &p.reduce_b, same_conv(1, 1));
  g = conv2d(global_avg_pool_spatial(g), p.post_w, &p.post_b, same_conv(1, 1));
  return sigmoid(g);
}

template <class V>
V cwf_forward(const V& t_map, const V& f, const CwfParamsT<V>& p) {
  const Shape st = t_map.shape(), sf = f.shape();
  require(st.size() == 3 && sf.size() == 3 && st[0] == p.meta.ct && sf[0] == p.meta.cf,
          "cwf_forward: inputs " + shape_str(st) + ", " + shape_str(sf) +
              " do not match widths " + std::to_string(p.meta.ct) + ", " +
              std::to_string(p.meta.cf));
  require(st[1] == sf[1] && st[2] == sf[2],
          "cwf_forward: spatial extents differ, " + shape_str(st) + " vs " + shape_str(sf));
  V m = cwf_gate(t_map, f, p);
  return relu(add(mul(t_map, m), mul(f, m)));
}

template <class V>
V add_fusion(const V& t_map, const V& f) {
  return relu(add(t_map, f));
}

struct ConcatFusionMeta {
  int ct = 0, cf = 0;
};

template <class V>
struct ConcatFusionParamsT {
  using value_type = V;
  ConcatFusionMeta meta;
  V w, b;  // 1x1, ct+cf -> cf

  template <class U>
  ConcatFusionParamsT<U> like() const {
    ConcatFusionParamsT<U> o;
    o.meta = meta;
    return o;
  }

  template <class Self, class F>
  static void walk(Self& self, F&& f) {
    f("w", self.w);
    f("b", self.b);
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

inline ConcatFusionParamsT<Tensor> make_concat_fusion(int ct, int cf, Rng& g) {
  ConcatFusionParamsT<Tensor> p;
  p.meta = {ct, cf};
  p.w = kaiming_conv({cf, ct + cf, 1, 1}, g);
  p.b = Tensor::zeros({cf});
  return p;
}

template <class V>
V concat_fusion(const V& t_map, const V& f, const ConcatFusionParamsT<V>& p) {
  return conv2d(concat(t_map, f, 0), p.w, &p.b, same_conv(1, 1));
}

}  // namespace haformer
