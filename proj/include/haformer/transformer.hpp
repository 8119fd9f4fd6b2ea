#pragma once
// Token-domain blocks: patch embedding, multi-head self-attention with
// spatially reduced keys/values and feature-split chunks, a grid MLP whose
// hidden layer runs a depthwise convolution over the token grid, and the
// pre-norm residual block stacking the two.

#include <cmath>
#include <string>
#include <type_traits>
#include <vector>

#include "haformer/autodiff.hpp"
#include "haformer/init.hpp"
#include "haformer/ops.hpp"
#include "haformer/params.hpp"

namespace haformer {

struct EtConfig {
  int patch = 1;      // P; D = channels * P^2 at the embedding site
  int dim = 128;      // token width D
  int attn_dim = 64;  // attention inner width, split across heads
  int heads = 4;
  int splits = 4;     // feature-split chunks per head
  int reduction = 2;  // key/value token-axis reduction factor
  int mlp_ratio = 2;
  int blocks = 2;

  int head_dim() const { return heads > 0 ? attn_dim / heads : 0; }
  int chunk_dim() const { return splits > 0 ? head_dim() / splits : 0; }

  void validate() const {
    require(heads >= 1 && attn_dim % heads == 0,
            "attention width " + std::to_string(attn_dim) + " must divide across " +
                std::to_string(heads) + " heads");
    require(splits >= 1 && head_dim() % splits == 0,
            "head width " + std::to_string(head_dim()) + " must divide into " +
                std::to_string(splits) + " chunks");
    require(reduction >= 1, "reduction factor must be at least 1");
    require(patch >= 1 && dim >= 1 && mlp_ratio >= 1 && blocks >= 0,
            "token block sizes must be positive");
  }
};

template <class V>
struct TokenGridT {
  V tokens;           // [N, D]
  int gh = 0, gw = 0; // N == gh * gw
};
using TokenGrid = TokenGridT<Tensor>;

// Instrumentation for the cost-model cross-checks: multiplies spent on score
// matrices and the high-water mark of live score elements. Counted only on
// the eager float path; the tape retains activations for backward and is not
// a statement about inference memory.
struct AttnStats {
  std::int64_t score_macs = 0;
  std::int64_t live_score_elems = 0;
  std::int64_t peak_score_elems = 0;

  void reset() { *this = AttnStats{}; }
  void alloc(std::int64_t n) {
    live_score_elems += n;
    peak_score_elems = std::max(peak_score_elems, live_score_elems);
  }
  void release(std::int64_t n) { live_score_elems -= n; }
};

inline AttnStats& attn_stats() {
  thread_local AttnStats stats;
  return stats;
}

template <class V>
struct EtParamsT {
  using value_type = V;
  EtConfig meta;
  V norm1_scale, norm1_shift;
  V wq, wk, wv;       // [D, attn_dim], bias-free
  std::vector<V> sr;  // per-head [head_dim*r, head_dim]; empty when r == 1
  V wo;               // [attn_dim, D]
  V norm2_scale, norm2_shift;
  V fc1_w, fc1_b;     // [D, D*ratio]
  V dw_w, dw_b;       // depthwise 3x3 over the grid at D*ratio channels
  V fc2_w, fc2_b;     // [D*ratio, D]

  template <class U>
  EtParamsT<U> like() const {
    EtParamsT<U> o;
    o.meta = meta;
    o.sr.resize(sr.size());
    return o;
  }

  template <class Self, class F>
  static void walk(Self& self, F&& f) {
    f("norm1.scale", self.norm1_scale);
    f("norm1.shift", self.norm1_shift);
    f("attn.wq", self.wq);
    f("attn.wk", self.wk);
    f("attn.wv", self.wv);
    for (std::size_t i = 0; i < self.sr.size(); ++i)
      f("attn.sr" + std::to_string(i) + ".w", self.sr[i]);
    f("attn.wo", self.wo);
    f("norm2.scale", self.norm2_scale);
    f("norm2.shift", self.norm2_shift);
    f("mlp.fc1.w", self.fc1_w);
    f("mlp.fc1.b", self.fc1_b);
    f("mlp.dw.w", self.dw_w);
    f("mlp.dw.b", self.dw_b);
    f("mlp.fc2.w", self.fc2_w);
    f("mlp.fc2.b", self.fc2_b);
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

inline EtParamsT<Tensor> make_et(const EtConfig& cfg, Rng& g) {
  cfg.validate();
  EtParamsT<Tensor> p;
  p.meta = cfg;
  const int d = cfg.dim, a = cfg.attn_dim, dm = cfg.dim * cfg.mlp_ratio;
  p.norm1_scale = Tensor::full({d}, 1.0f);
  p.norm1_shift = Tensor::zeros({d});
  p.wq = xavier_linear(d, a, g);
  p.wk = xavier_linear(d, a, g);
  p.wv = xavier_linear(d, a, g);
  if (cfg.reduction > 1)
    for (int i = 0; i < cfg.heads; ++i)
      p.sr.push_back(xavier_linear(cfg.head_dim() * cfg.reduction, cfg.head_dim(), g));
  p.wo = xavier_linear(a, d, g);
  p.norm2_scale = Tensor::full({d}, 1.0f);
  p.norm2_shift = Tensor::zeros({d});
  p.fc1_w = xavier_linear(d, dm, g);
  p.fc1_b = Tensor::zeros({dm});
  p.dw_w = kaiming_conv({dm, 1, 3, 3}, g);
  p.dw_b = Tensor::zeros({dm});
  p.fc2_w = xavier_linear(dm, d, g);
  p.fc2_b = Tensor::zeros({d});
  return p;
}

// Non-overlapping P x P patches flattened in (channel, row, col) order, then
// projected by the embedding matrix. No positional term.
template <class V>
TokenGridT<V> patch_embed(const V& x, int patch, const V& embed) {
  const Shape s = x.shape();
  require(s.size() == 3, "patch_embed: input must be [C,H,W], got " + shape_str(s));
  return {matmul(patch_flatten(x, patch), embed), s[1] / patch, s[2] / patch};
}

// Concatenates r consecutive tokens, then projects back to the token width.
template <class V>
V spatial_reduce(const V& t, int r, const V& proj) {
  const Shape s = t.shape();
  require(s.size() == 2, "spatial_reduce: input must be [N,d], got " + shape_str(s));
  require(r >= 1 && s[0] % r == 0, "spatial_reduce: token count " + std::to_string(s[0]) +
                                       " not divisible by " + std::to_string(r));
  return matmul(reshape(t, Shape{s[0] / r, s[1] * r}), proj);
}

namespace detail {

template <class S>
TensorT<S> concat_list(const std::vector<TensorT<S>>& parts, int axis) {
  std::vector<const TensorT<S>*> ptrs;
  ptrs.reserve(parts.size());
  for (const auto& p : parts) ptrs.push_back(&p);
  return concat(ptrs, axis);
}
inline ad::Var concat_list(const std::vector<ad::Var>& parts, int axis) {
  return ad::concat(parts, axis);
}

}  // namespace detail

// Per head: reduce keys/values along the token axis, then attend chunk by
// chunk over width-d/s feature slices. The scale stays 1/sqrt(head_dim)
// regardless of the chunk width. Chunks run sequentially so only one
// [N, N/r] score matrix is ever live.
template <class V>
V emhsa(const TokenGridT<V>& z, const EtParamsT<V>& p) {
  const EtConfig& cfg = p.meta;
  cfg.validate();
  const Shape s = z.tokens.shape();
  require(s.size() == 2 && s[1] == cfg.dim,
          "emhsa: tokens " + shape_str(s) + " do not match width " + std::to_string(cfg.dim));
  const int n = s[0];
  require(n % cfg.reduction == 0, "emhsa: token count " + std::to_string(n) +
                                      " not divisible by reduction " +
                                      std::to_string(cfg.reduction));
  const int d = cfg.head_dim(), dc = cfg.chunk_dim();
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));

  V q = matmul(z.tokens, p.wq);
  V k = matmul(z.tokens, p.wk);
  V v = matmul(z.tokens, p.wv);

  std::vector<V> heads;
  for (int hi = 0; hi < cfg.heads; ++hi) {
    V qh = slice_cols(q, hi * d, (hi + 1) * d);
    V kh = slice_cols(k, hi * d, (hi + 1) * d);
    V vh = slice_cols(v, hi * d, (hi + 1) * d);
    if (cfg.reduction > 1) {
      kh = spatial_reduce(kh, cfg.reduction, p.sr[hi]);
      vh = spatial_reduce(vh, cfg.reduction, p.sr[hi]);
    }
    std::vector<V> chunks;
    for (int ci = 0; ci < cfg.splits; ++ci) {
      V qs = scale(slice_cols(qh, ci * dc, (ci + 1) * dc), inv);
      V ks = slice_cols(kh, ci * dc, (ci + 1) * dc);
      V vs = slice_cols(vh, ci * dc, (ci + 1) * dc);
      V att = matmul(qs, transpose2d(ks));  // [N, N/r]
      if constexpr (std::is_same_v<V, Tensor>) {
        attn_stats().score_macs +=
            static_cast<std::int64_t>(n) * (n / cfg.reduction) * dc;
        attn_stats().alloc(att.numel());
      }
      if constexpr (std::is_same_v<V, ad::Var>) {
        att = softmax(att, 1);
      } else {
        softmax_inplace(att, 1);
      }
      chunks.push_back(matmul(att, vs));
      if constexpr (std::is_same_v<V, Tensor>) attn_stats().release(att.numel());
    }
    heads.push_back(detail::concat_list(chunks, 1));
  }
  return matmul(detail::concat_list(heads, 1), p.wo);
}

// FC -> re-form the token grid -> depthwise 3x3 (pad 1) -> GELU -> FC. The
// zero-padded convolution is what carries positional information.
template <class V>
V emlp(const TokenGridT<V>& z, const EtParamsT<V>& p) {
  const EtConfig& cfg = p.meta;
  const Shape s = z.tokens.shape();
  const int n = z.gh * z.gw;
  require(s.size() == 2 && s[0] == n,
          "emlp: token count " + shape_str(s) + " does not match grid " +
              std::to_string(z.gh) + "x" + std::to_string(z.gw));
  const int dm = cfg.dim * cfg.mlp_ratio;
  V h = add(matmul(z.tokens, p.fc1_w), reshape(p.fc1_b, Shape{1, dm}));
  V grid = reshape(transpose2d(h), Shape{dm, z.gh, z.gw});
  grid = gelu(conv2d(grid, p.dw_w, &p.dw_b, same_conv(3, 3, 1, 1, dm)));
  V flat = transpose2d(reshape(grid, Shape{dm, n}));
  return add(matmul(flat, p.fc2_w), reshape(p.fc2_b, Shape{1, cfg.dim}));
}

// Pre-norm residual arrangement.
template <class V>
TokenGridT<V> et_block(const TokenGridT<V>& z, const EtParamsT<V>& p) {
  V a = layer_norm(z.tokens, p.norm1_scale, p.norm1_shift);
  V z1 = add(z.tokens, emhsa(TokenGridT<V>{a, z.gh, z.gw}, p));
  V b = layer_norm(z1, p.norm2_scale, p.norm2_shift);
  V z2 = add(z1, emlp(TokenGridT<V>{b, z.gh, z.gw}, p));
  return {z2, z.gh, z.gw};
}

}  // namespace haformer
