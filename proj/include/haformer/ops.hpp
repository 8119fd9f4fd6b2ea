#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>

#include "haformer/parallel.hpp"
#include "haformer/tensor.hpp"

namespace haformer {

struct ConvSpec {
  int kh = 1, kw = 1;
  int sh = 1, sw = 1;
  int dh = 1, dw = 1;
  int ph = 0, pw = 0;
  int groups = 1;
};

// "Same" padding for stride-1 odd kernels: pad = d*(k-1)/2 per axis.
inline ConvSpec same_conv(int kh, int kw, int dh = 1, int dw = 1, int groups = 1, int sh = 1,
                          int sw = 1) {
  ConvSpec cs;
  cs.kh = kh;
  cs.kw = kw;
  cs.dh = dh;
  cs.dw = dw;
  cs.sh = sh;
  cs.sw = sw;
  cs.ph = dh * (kh - 1) / 2;
  cs.pw = dw * (kw - 1) / 2;
  cs.groups = groups;
  return cs;
}

inline int conv_out_extent(int in, int k, int s, int d, int p, const char* axis) {
  const int span = d * (k - 1) + 1;
  const int numer = in + 2 * p - span;
  require(numer >= 0, std::string("conv2d: ") + axis + " extent " + std::to_string(in) +
                          " with kernel " + std::to_string(k) + " dilation " + std::to_string(d) +
                          " padding " + std::to_string(p) + " gives non-positive output " + axis);
  return numer / s + 1;
}

template <typename S>
using EigenMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<EigenMat<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const EigenMat<S>>;

// ---- dense linear algebra ----

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul: operands must be rank-2, got " +
                                              shape_str(a.shape()) + " and " + shape_str(b.shape()));
  require(a.dim(1) == b.dim(0), "matmul: inner axis mismatch, " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
  TensorT<S> out({a.dim(0), b.dim(1)});
  ConstMatMap<S> ma(a.data(), a.dim(0), a.dim(1));
  ConstMatMap<S> mb(b.data(), b.dim(0), b.dim(1));
  MatMap<S> mo(out.data(), out.dim(0), out.dim(1));
  mo.noalias() = ma * mb;
  return out;
}

template <typename S>
TensorT<S> transpose2d(const TensorT<S>& a) {
  require(a.rank() == 2, "transpose2d: operand must be rank-2, got " + shape_str(a.shape()));
  TensorT<S> out({a.dim(1), a.dim(0)});
  ConstMatMap<S> ma(a.data(), a.dim(0), a.dim(1));
  MatMap<S> mo(out.data(), out.dim(0), out.dim(1));
  mo = ma.transpose();
  return out;
}

// ---- convolution ----

template <typename S>
void check_conv_args(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>* b,
                     const ConvSpec& cs) {
  require(x.rank() == 3, "conv2d: input must be [C,H,W], got " + shape_str(x.shape()));
  require(w.rank() == 4, "conv2d: weight must be [Cout,Cin/g,kh,kw], got " + shape_str(w.shape()));
  require(cs.kh >= 1 && cs.kw >= 1 && cs.sh >= 1 && cs.sw >= 1 && cs.dh >= 1 && cs.dw >= 1 &&
              cs.ph >= 0 && cs.pw >= 0 && cs.groups >= 1,
          "conv2d: kernel/stride/dilation must be >= 1 and padding >= 0");
  require(w.dim(2) == cs.kh && w.dim(3) == cs.kw,
          "conv2d: weight kernel axes " + shape_str(w.shape()) + " disagree with spec kernel (" +
              std::to_string(cs.kh) + "," + std::to_string(cs.kw) + ")");
  const int cin = x.dim(0), cout = w.dim(0);
  require(cin % cs.groups == 0, "conv2d: groups " + std::to_string(cs.groups) +
                                    " does not divide input channel axis " + std::to_string(cin));
  require(cout % cs.groups == 0, "conv2d: groups " + std::to_string(cs.groups) +
                                     " does not divide output channel axis " + std::to_string(cout));
  require(w.dim(1) == cin / cs.groups,
          "conv2d: weight input-channel axis " + std::to_string(w.dim(1)) + " must equal Cin/g = " +
              std::to_string(cin / cs.groups));
  if (b) {
    require(b->rank() == 1 && b->dim(0) == cout,
            "conv2d: bias must be [Cout] = [" + std::to_string(cout) + "], got " +
                shape_str(b->shape()));
  }
}

template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>* b,
                  const ConvSpec& cs) {
  check_conv_args(x, w, b, cs);
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(0);
  const int ho = conv_out_extent(h, cs.kh, cs.sh, cs.dh, cs.ph, "height");
  const int wo = conv_out_extent(wd, cs.kw, cs.sw, cs.dw, cs.pw, "width");
  TensorT<S> y({cout, ho, wo});

  // Pointwise convolutions are plain GEMMs over the flattened spatial axis.
  if (cs.kh == 1 && cs.kw == 1 && cs.sh == 1 && cs.sw == 1 && cs.ph == 0 && cs.pw == 0 &&
      cs.groups == 1) {
    ConstMatMap<S> mw(w.data(), cout, cin);
    ConstMatMap<S> mx(x.data(), cin, static_cast<Eigen::Index>(h) * wd);
    MatMap<S> my(y.data(), cout, static_cast<Eigen::Index>(h) * wd);
    my.noalias() = mw * mx;
    if (b) {
      const S* bp = b->data();
      for (int oc = 0; oc < cout; ++oc) my.row(oc).array() += bp[oc];
    }
    return y;
  }

  const int cin_g = cin / cs.groups;
  const int cout_g = cout / cs.groups;
  const S* xp = x.data();
  const S* wp = w.data();
  const S* bp = b ? b->data() : nullptr;
  S* yp = y.data();

  parallel_for(cout, [&](std::int64_t oc0, std::int64_t oc1) {
    for (std::int64_t oc = oc0; oc < oc1; ++oc) {
      const int g = static_cast<int>(oc) / cout_g;
      for (int oh = 0; oh < ho; ++oh) {
        const int ih0 = oh * cs.sh - cs.ph;
        for (int ow = 0; ow < wo; ++ow) {
          const int iw0 = ow * cs.sw - cs.pw;
          S acc = bp ? bp[oc] : S(0);
          for (int ic = 0; ic < cin_g; ++ic) {
            const S* xc = xp + (static_cast<std::int64_t>(g) * cin_g + ic) * h * wd;
            const S* wc = wp + ((oc * cin_g + ic) * cs.kh) * cs.kw;
            for (int kh = 0; kh < cs.kh; ++kh) {
              const int ih = ih0 + kh * cs.dh;
              if (ih < 0 || ih >= h) continue;
              const S* xrow = xc + static_cast<std::int64_t>(ih) * wd;
              const S* wrow = wc + kh * cs.kw;
              for (int kw = 0; kw < cs.kw; ++kw) {
                const int iw = iw0 + kw * cs.dw;
                if (iw < 0 || iw >= wd) continue;
                acc += xrow[iw] * wrow[kw];
              }
            }
          }
          yp[(oc * ho + oh) * wo + ow] = acc;
        }
      }
    }
  });
  return y;
}

template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b,
                  const ConvSpec& cs) {
  return conv2d(x, w, &b, cs);
}

template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const ConvSpec& cs) {
  return conv2d(x, w, static_cast<const TensorT<S>*>(nullptr), cs);
}

// Adjoints share the forward's index arithmetic, so they cover every
// stride/dilation/group/padding combination the forward accepts.
template <typename S>
void conv2d_backward(const TensorT<S>& x, const TensorT<S>& w, const ConvSpec& cs,
                     const TensorT<S>& gy, TensorT<S>* gx, TensorT<S>* gw, TensorT<S>* gb) {
  check_conv_args(x, w, static_cast<const TensorT<S>*>(nullptr), cs);
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(0);
  const int ho = gy.dim(1), wo = gy.dim(2);
  const int cin_g = cin / cs.groups;
  const int cout_g = cout / cs.groups;
  const S* xp = x.data();
  const S* wp = w.data();
  const S* gyp = gy.data();

  if (gb) {
    for (int oc = 0; oc < cout; ++oc) {
      S acc = 0;
      const S* row = gyp + static_cast<std::int64_t>(oc) * ho * wo;
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(ho) * wo; ++i) acc += row[i];
      (*gb)[oc] += acc;
    }
  }
  if (!gx && !gw) return;
  for (int oc = 0; oc < cout; ++oc) {
    const int g = oc / cout_g;
    for (int oh = 0; oh < ho; ++oh) {
      const int ih0 = oh * cs.sh - cs.ph;
      for (int ow = 0; ow < wo; ++ow) {
        const int iw0 = ow * cs.sw - cs.pw;
        const S gyv = gyp[(static_cast<std::int64_t>(oc) * ho + oh) * wo + ow];
        for (int ic = 0; ic < cin_g; ++ic) {
          const std::int64_t xoff = (static_cast<std::int64_t>(g) * cin_g + ic) * h * wd;
          const std::int64_t woff = (static_cast<std::int64_t>(oc) * cin_g + ic) * cs.kh * cs.kw;
          for (int kh = 0; kh < cs.kh; ++kh) {
            const int ih = ih0 + kh * cs.dh;
            if (ih < 0 || ih >= h) continue;
            for (int kw = 0; kw < cs.kw; ++kw) {
              const int iw = iw0 + kw * cs.dw;
              if (iw < 0 || iw >= wd) continue;
              const std::int64_t xi = xoff + static_cast<std::int64_t>(ih) * wd + iw;
              if (gx) (*gx)[xi] += wp[woff + kh * cs.kw + kw] * gyv;
              if (gw) (*gw)[woff + kh * cs.kw + kw] += xp[xi] * gyv;
            }
          }
        }
      }
    }
  }
}

// ---- softmax ----

// In-place softmax over `axis`, max-subtracted per slice.
template <typename S>
void softmax_inplace(TensorT<S>& x, int axis) {
  require(axis >= 0 && axis < x.rank(),
          "softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::int64_t n = x.dim(axis);
  S* p = x.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      S* base = p + o * n * inner + in;
      S mx = base[0];
      for (std::int64_t a = 1; a < n; ++a) mx = std::max(mx, base[a * inner]);
      S sum = 0;
      for (std::int64_t a = 0; a < n; ++a) {
        const S e = std::exp(base[a * inner] - mx);
        base[a * inner] = e;
        sum += e;
      }
      for (std::int64_t a = 0; a < n; ++a) base[a * inner] /= sum;
    }
  }
}

template <typename S>
TensorT<S> softmax(const TensorT<S>& x, int axis) {
  TensorT<S> y = x;
  softmax_inplace(y, axis);
  return y;
}

// Fused adjoint: gx = y * (gy - sum(gy * y)) per slice.
template <typename S>
TensorT<S> softmax_backward(const TensorT<S>& y, const TensorT<S>& gy, int axis) {
  TensorT<S> gx(y.shape());
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= y.dim(i);
  for (int i = axis + 1; i < y.rank(); ++i) inner *= y.dim(i);
  const std::int64_t n = y.dim(axis);
  const S* yp = y.data();
  const S* gp = gy.data();
  S* op = gx.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t b = o * n * inner + in;
      S dot = 0;
      for (std::int64_t a = 0; a < n; ++a) dot += gp[b + a * inner] * yp[b + a * inner];
      for (std::int64_t a = 0; a < n; ++a)
        op[b + a * inner] = yp[b + a * inner] * (gp[b + a * inner] - dot);
    }
  }
  return gx;
}

// ---- pooling and per-map statistics ----

template <typename S>
TensorT<S> global_avg_pool_spatial(const TensorT<S>& x) {
  require(x.rank() == 3, "global_avg_pool_spatial: input must be [C,H,W], got " +
                             shape_str(x.shape()));
  const int c = x.dim(0);
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  TensorT<S> y({c, 1, 1});
  for (int i = 0; i < c; ++i) {
    const S* p = x.data() + i * hw;
    S acc = 0;
    for (std::int64_t j = 0; j < hw; ++j) acc += p[j];
    y[i] = acc / static_cast<S>(hw);
  }
  return y;
}

template <typename S>
TensorT<S> channel_mean_map(const TensorT<S>& x) {
  require(x.rank() == 3, "channel_mean_map: input must be [C,H,W], got " + shape_str(x.shape()));
  const int c = x.dim(0);
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  TensorT<S> y({1, x.dim(1), x.dim(2)});
  for (std::int64_t j = 0; j < hw; ++j) {
    S acc = 0;
    for (int i = 0; i < c; ++i) acc += x[i * hw + j];
    y[j] = acc / static_cast<S>(c);
  }
  return y;
}

// ---- layout ops ----

template <typename S>
TensorT<S> reshape(const TensorT<S>& x, Shape shape) {
  require(shape_numel(shape) == x.numel(), "reshape: element count mismatch, " +
                                               shape_str(x.shape()) + " -> " + shape_str(shape));
  return TensorT<S>(std::move(shape), x.vec());
}

template <typename S>
TensorT<S> channel_shuffle(const TensorT<S>& x, int groups) {
  require(x.rank() == 3, "channel_shuffle: input must be [C,H,W], got " + shape_str(x.shape()));
  const int c = x.dim(0);
  require(groups >= 1 && c % groups == 0, "channel_shuffle: groups " + std::to_string(groups) +
                                              " does not divide channel axis " + std::to_string(c));
  const int per = c / groups;
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  TensorT<S> y(x.shape());
  for (int ch = 0; ch < c; ++ch) {
    const int gi = ch / per, ci = ch % per;
    const int dst = ci * groups + gi;  // (g, C/g) -> transpose -> flatten
    std::copy_n(x.data() + static_cast<std::int64_t>(ch) * hw, hw,
                y.data() + static_cast<std::int64_t>(dst) * hw);
  }
  return y;
}

template <typename S>
TensorT<S> concat(const std::vector<const TensorT<S>*>& parts, int axis) {
  require(!parts.empty(), "concat: needs at least one operand");
  const Shape& s0 = parts[0]->shape();
  require(axis >= 0 && axis < static_cast<int>(s0.size()),
          "concat: axis " + std::to_string(axis) + " out of range for " + shape_str(s0));
  Shape out_shape = s0;
  int total = 0;
  for (const auto* p : parts) {
    require(p->rank() == static_cast<int>(s0.size()), "concat: rank mismatch");
    for (int i = 0; i < p->rank(); ++i) {
      if (i == axis) continue;
      require(p->dim(i) == s0[static_cast<size_t>(i)],
              "concat: extent mismatch on axis " + std::to_string(i) + ", " +
                  shape_str(p->shape()) + " vs " + shape_str(s0));
    }
    total += p->dim(axis);
  }
  out_shape[static_cast<size_t>(axis)] = total;
  TensorT<S> y(out_shape);

  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[static_cast<size_t>(i)];
  for (int i = axis + 1; i < static_cast<int>(s0.size()); ++i) inner *= s0[static_cast<size_t>(i)];
  std::int64_t dst_off = 0;
  for (const auto* p : parts) {
    const std::int64_t blk = p->dim(axis) * inner;
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(p->data() + o * blk, blk, y.data() + o * total * inner + dst_off);
    dst_off += blk;
  }
  return y;
}

template <typename S>
TensorT<S> concat(const TensorT<S>& a, const TensorT<S>& b, int axis) {
  return concat<S>({&a, &b}, axis);
}

template <typename S>
TensorT<S> slice_cols(const TensorT<S>& x, int c0, int c1) {
  require(x.rank() == 2, "slice_cols: input must be rank-2, got " + shape_str(x.shape()));
  require(0 <= c0 && c0 < c1 && c1 <= x.dim(1),
          "slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
              ") invalid for column axis " + std::to_string(x.dim(1)));
  const int n = x.dim(0), d = x.dim(1), w = c1 - c0;
  TensorT<S> y({n, w});
  for (int i = 0; i < n; ++i)
    std::copy_n(x.data() + static_cast<std::int64_t>(i) * d + c0, w,
                y.data() + static_cast<std::int64_t>(i) * w);
  return y;
}

// [C,H,W] -> [N, C*P*P]; token p = gy*gw + gx, features in (channel, row, col) order.
template <typename S>
TensorT<S> patch_flatten(const TensorT<S>& x, int p) {
  require(x.rank() == 3, "patch_flatten: input must be [C,H,W], got " + shape_str(x.shape()));
  require(p >= 1, "patch_flatten: patch size must be >= 1");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  require(h % p == 0, "patch_flatten: height " + std::to_string(h) + " not divisible by patch " +
                          std::to_string(p));
  require(w % p == 0, "patch_flatten: width " + std::to_string(w) + " not divisible by patch " +
                          std::to_string(p));
  const int gh = h / p, gw = w / p;
  TensorT<S> y({gh * gw, c * p * p});
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      S* dst = y.data() + static_cast<std::int64_t>(gy * gw + gx) * c * p * p;
      for (int ch = 0; ch < c; ++ch)
        for (int py = 0; py < p; ++py)
          for (int px = 0; px < p; ++px)
            *dst++ = x.at(ch, gy * p + py, gx * p + px);
    }
  return y;
}

// Inverse of patch_flatten given the grid extents.
template <typename S>
TensorT<S> patch_unflatten(const TensorT<S>& t, int c, int gh, int gw, int p) {
  require(t.rank() == 2, "patch_unflatten: input must be [N,D], got " + shape_str(t.shape()));
  require(t.dim(0) == gh * gw, "patch_unflatten: token axis " + std::to_string(t.dim(0)) +
                                   " does not match grid " + std::to_string(gh) + "x" +
                                   std::to_string(gw));
  require(t.dim(1) == c * p * p, "patch_unflatten: feature axis " + std::to_string(t.dim(1)) +
                                     " does not match C*P*P = " + std::to_string(c * p * p));
  TensorT<S> y({c, gh * p, gw * p});
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      const S* src = t.data() + static_cast<std::int64_t>(gy * gw + gx) * c * p * p;
      for (int ch = 0; ch < c; ++ch)
        for (int py = 0; py < p; ++py)
          for (int px = 0; px < p; ++px)
            y.at(ch, gy * p + py, gx * p + px) = *src++;
    }
  return y;
}

// ---- bilinear resize (upscale only, half-pixel centers) ----

struct BilinearTap {
  int i0, i1;
  double t;
};

inline BilinearTap bilinear_tap(int i, int in, int out) {
  double src = (i + 0.5) * static_cast<double>(in) / out - 0.5;
  src = std::clamp(src, 0.0, static_cast<double>(in - 1));
  const int i0 = static_cast<int>(src);
  return {i0, std::min(i0 + 1, in - 1), src - i0};
}

template <typename S>
TensorT<S> bilinear_upsample(const TensorT<S>& x, int ho, int wo) {
  require(x.rank() == 3, "bilinear_upsample: input must be [C,H,W], got " + shape_str(x.shape()));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  require(ho >= h, "bilinear_upsample: output height " + std::to_string(ho) +
                       " smaller than input height " + std::to_string(h) + " (upscale only)");
  require(wo >= w, "bilinear_upsample: output width " + std::to_string(wo) +
                       " smaller than input width " + std::to_string(w) + " (upscale only)");
  TensorT<S> y({c, ho, wo});
  std::vector<BilinearTap> rows(static_cast<size_t>(ho)), cols(static_cast<size_t>(wo));
  for (int i = 0; i < ho; ++i) rows[static_cast<size_t>(i)] = bilinear_tap(i, h, ho);
  for (int j = 0; j < wo; ++j) cols[static_cast<size_t>(j)] = bilinear_tap(j, w, wo);
  for (int ch = 0; ch < c; ++ch) {
    const S* xc = x.data() + static_cast<std::int64_t>(ch) * h * w;
    S* yc = y.data() + static_cast<std::int64_t>(ch) * ho * wo;
    for (int i = 0; i < ho; ++i) {
      const auto& r = rows[static_cast<size_t>(i)];
      const S* top = xc + static_cast<std::int64_t>(r.i0) * w;
      const S* bot = xc + static_cast<std::int64_t>(r.i1) * w;
      const S ty = static_cast<S>(r.t);
      for (int j = 0; j < wo; ++j) {
        const auto& cl = cols[static_cast<size_t>(j)];
        const S tx = static_cast<S>(cl.t);
        const S a = top[cl.i0] + tx * (top[cl.i1] - top[cl.i0]);
        const S b = bot[cl.i0] + tx * (bot[cl.i1] - bot[cl.i0]);
        yc[static_cast<std::int64_t>(i) * wo + j] = a + ty * (b - a);
      }
    }
  }
  return y;
}

// Transpose of the interpolation: scatter with the same taps and weights.
template <typename S>
TensorT<S> bilinear_upsample_backward(const TensorT<S>& gy, int h, int w) {
  const int c = gy.dim(0), ho = gy.dim(1), wo = gy.dim(2);
  TensorT<S> gx({c, h, w});
  for (int ch = 0; ch < c; ++ch) {
    const S* gc = gy.data() + static_cast<std::int64_t>(ch) * ho * wo;
    S* xc = gx.data() + static_cast<std::int64_t>(ch) * h * w;
    for (int i = 0; i < ho; ++i) {
      const auto r = bilinear_tap(i, h, ho);
      for (int j = 0; j < wo; ++j) {
        const auto cl = bilinear_tap(j, w, wo);
        const S g = gc[static_cast<std::int64_t>(i) * wo + j];
        const S ty = static_cast<S>(r.t), tx = static_cast<S>(cl.t);
        xc[static_cast<std::int64_t>(r.i0) * w + cl.i0] += (1 - ty) * (1 - tx) * g;
        xc[static_cast<std::int64_t>(r.i0) * w + cl.i1] += (1 - ty) * tx * g;
        xc[static_cast<std::int64_t>(r.i1) * w + cl.i0] += ty * (1 - tx) * g;
        xc[static_cast<std::int64_t>(r.i1) * w + cl.i1] += ty * tx * g;
      }
    }
  }
  return gx;
}

// ---- activations ----

template <typename S>
TensorT<S> relu(const TensorT<S>& x) {
  TensorT<S> y = x;
  for (auto& v : y.vec()) v = v > S(0) ? v : S(0);
  return y;
}

template <typename S>
TensorT<S> sigmoid(const TensorT<S>& x) {
  TensorT<S> y = x;
  for (auto& v : y.vec()) v = S(1) / (S(1) + std::exp(-v));
  return y;
}

template <typename S>
S gelu_scalar(S v) {
  const S kappa = static_cast<S>(std::sqrt(2.0 / std::numbers::pi));
  const S inner = kappa * (v + S(0.044715) * v * v * v);
  return S(0.5) * v * (S(1) + std::tanh(inner));
}

template <typename S>
TensorT<S> gelu(const TensorT<S>& x) {
  TensorT<S> y = x;
  for (auto& v : y.vec()) v = gelu_scalar(v);
  return y;
}

template <typename S>
S gelu_grad_scalar(S v) {
  const S kappa = static_cast<S>(std::sqrt(2.0 / std::numbers::pi));
  const S u = kappa * (v + S(0.044715) * v * v * v);
  const S th = std::tanh(u);
  const S du = kappa * (S(1) + S(3) * S(0.044715) * v * v);
  return S(0.5) * (S(1) + th) + S(0.5) * v * (S(1) - th * th) * du;
}

// Per-channel slope over axis 0. At x == 0 the negative-side slope applies.
template <typename S>
TensorT<S> prelu(const TensorT<S>& x, const TensorT<S>& slope) {
  require(x.rank() >= 1, "prelu: input must have rank >= 1");
  require(slope.rank() == 1 && slope.dim(0) == x.dim(0),
          "prelu: slope must be [" + std::to_string(x.dim(0)) + "] to match channel axis, got " +
              shape_str(slope.shape()));
  TensorT<S> y = x;
  const std::int64_t per = x.numel() / x.dim(0);
  for (int c = 0; c < x.dim(0); ++c) {
    const S a = slope[c];
    S* p = y.data() + c * per;
    for (std::int64_t i = 0; i < per; ++i)
      if (p[i] <= S(0)) p[i] *= a;
  }
  return y;
}

// ---- elementwise with singleton broadcasting (equal rank) ----

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  require(a.size() == b.size(), std::string(op) + ": rank mismatch, " + shape_str(a) + " vs " +
                                    shape_str(b) + " (singleton expansion needs equal rank)");
  Shape out(a.size());
  for (size_t i = 0; i < a.size(); ++i) {
    require(a[i] == b[i] || a[i] == 1 || b[i] == 1,
            std::string(op) + ": axis " + std::to_string(i) + " extents " + std::to_string(a[i]) +
                " and " + std::to_string(b[i]) + " are not broadcast-compatible");
    out[i] = std::max(a[i], b[i]);
  }
  return out;
}

template <typename S, typename F>
TensorT<S> broadcast_binary(const TensorT<S>& a, const TensorT<S>& b, const char* op, F f) {
  if (a.same_shape(b)) {
    TensorT<S> y(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) y[i] = f(a[i], b[i]);
    return y;
  }
  const Shape os = broadcast_shape(a.shape(), b.shape(), op);
  const int r = static_cast<int>(os.size());
  std::vector<std::int64_t> sa(static_cast<size_t>(r)), sb(static_cast<size_t>(r));
  std::int64_t sta = 1, stb = 1;
  for (int i = r - 1; i >= 0; --i) {
    sa[static_cast<size_t>(i)] = a.dim(i) == 1 ? 0 : sta;
    sb[static_cast<size_t>(i)] = b.dim(i) == 1 ? 0 : stb;
    sta *= a.dim(i);
    stb *= b.dim(i);
  }
  TensorT<S> y(os);
  std::vector<std::int64_t> idx(static_cast<size_t>(r), 0);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t flat = 0; flat < y.numel(); ++flat) {
    y[flat] = f(a[oa], b[ob]);
    for (int ax = r - 1; ax >= 0; --ax) {
      auto& ix = idx[static_cast<size_t>(ax)];
      oa += sa[static_cast<size_t>(ax)];
      ob += sb[static_cast<size_t>(ax)];
      if (++ix < os[static_cast<size_t>(ax)]) break;
      oa -= sa[static_cast<size_t>(ax)] * ix;
      ob -= sb[static_cast<size_t>(ax)] * ix;
      ix = 0;
    }
  }
  return y;
}

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  return broadcast_binary(a, b, "add", [](S x, S y) { return x + y; });
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  return broadcast_binary(a, b, "mul", [](S x, S y) { return x * y; });
}

// Reduces a broadcast output gradient back to the operand's shape.
template <typename S>
TensorT<S> reduce_to_shape(const TensorT<S>& g, const Shape& target) {
  if (g.shape() == target) return g;
  const int r = g.rank();
  TensorT<S> out(target);
  std::vector<std::int64_t> st(static_cast<size_t>(r));
  std::int64_t acc = 1;
  for (int i = r - 1; i >= 0; --i) {
    st[static_cast<size_t>(i)] = target[static_cast<size_t>(i)] == 1 ? 0 : acc;
    acc *= target[static_cast<size_t>(i)];
  }
  std::vector<std::int64_t> idx(static_cast<size_t>(r), 0);
  std::int64_t off = 0;
  for (std::int64_t flat = 0; flat < g.numel(); ++flat) {
    out[off] += g[flat];
    for (int ax = r - 1; ax >= 0; --ax) {
      auto& ix = idx[static_cast<size_t>(ax)];
      off += st[static_cast<size_t>(ax)];
      if (++ix < g.dim(ax)) break;
      off -= st[static_cast<size_t>(ax)] * ix;
      ix = 0;
    }
  }
  return out;
}

template <typename S>
TensorT<S> scale(const TensorT<S>& x, double alpha) {
  TensorT<S> y = x;
  for (auto& v : y.vec()) v = static_cast<S>(v * static_cast<S>(alpha));
  return y;
}

template <typename S>
TensorT<S> sum_all(const TensorT<S>& x) {
  double acc = 0;
  for (std::int64_t i = 0; i < x.numel(); ++i) acc += static_cast<double>(x[i]);
  return TensorT<S>::scalar(static_cast<S>(acc));
}

// ---- token normalization ----

// Per-row mean/variance over the feature axis, biased variance, learned scale/shift.
template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                      double eps = 1e-5) {
  require(x.rank() == 2, "layer_norm: input must be [N,D], got " + shape_str(x.shape()));
  const int n = x.dim(0), d = x.dim(1);
  require(gamma.rank() == 1 && gamma.dim(0) == d, "layer_norm: scale must be [D]");
  require(beta.rank() == 1 && beta.dim(0) == d, "layer_norm: shift must be [D]");
  TensorT<S> y(x.shape());
  for (int i = 0; i < n; ++i) {
    const S* row = x.data() + static_cast<std::int64_t>(i) * d;
    double mu = 0;
    for (int j = 0; j < d; ++j) mu += row[j];
    mu /= d;
    double var = 0;
    for (int j = 0; j < d; ++j) {
      const double dv = row[j] - mu;
      var += dv * dv;
    }
    var /= d;
    const S inv = static_cast<S>(1.0 / std::sqrt(var + eps));
    const S mean = static_cast<S>(mu);
    S* out = y.data() + static_cast<std::int64_t>(i) * d;
    for (int j = 0; j < d; ++j) out[j] = (row[j] - mean) * inv * gamma[j] + beta[j];
  }
  return y;
}

// ---- pixelwise cross entropy ----

// logits [K,H,W], labels [H,W] holding integral class ids; `ignore` pixels are skipped.
// Mean negative log-likelihood over counted pixels; 0 when everything is ignored.
template <typename S>
TensorT<S> softmax_xent(const TensorT<S>& logits, const Tensor& labels, int ignore = 255) {
  require(logits.rank() == 3, "softmax_xent: logits must be [K,H,W], got " +
                                  shape_str(logits.shape()));
  require(labels.rank() == 2 && labels.dim(0) == logits.dim(1) && labels.dim(1) == logits.dim(2),
          "softmax_xent: labels must be [" + std::to_string(logits.dim(1)) + "," +
              std::to_string(logits.dim(2)) + "], got " + shape_str(labels.shape()));
  const int k = logits.dim(0);
  const std::int64_t hw = static_cast<std::int64_t>(logits.dim(1)) * logits.dim(2);
  double acc = 0;
  std::int64_t count = 0;
  for (std::int64_t p = 0; p < hw; ++p) {
    const float lf = labels[p];
    const int l = static_cast<int>(lf);
    require(static_cast<float>(l) == lf, "softmax_xent: label at pixel " + std::to_string(p) +
                                             " is not integral");
    if (l == ignore) continue;
    require(0 <= l && l < k, "softmax_xent: label " + std::to_string(l) + " out of class range [0," +
                                 std::to_string(k) + ") at pixel " + std::to_string(p));
    S mx = logits[p];
    for (int c = 1; c < k; ++c) mx = std::max(mx, logits[c * hw + p]);
    double sum = 0;
    for (int c = 0; c < k; ++c) sum += std::exp(static_cast<double>(logits[c * hw + p] - mx));
    acc += std::log(sum) - static_cast<double>(logits[static_cast<std::int64_t>(l) * hw + p] - mx);
    ++count;
  }
  return TensorT<S>::scalar(count ? static_cast<S>(acc / count) : S(0));
}

// dlogits = (softmax - onehot) / count, scaled by the upstream scalar gradient.
template <typename S>
TensorT<S> softmax_xent_backward(const TensorT<S>& logits, const Tensor& labels, int ignore,
                                 S gscale) {
  const int k = logits.dim(0);
  const std::int64_t hw = static_cast<std::int64_t>(logits.dim(1)) * logits.dim(2);
  std::int64_t count = 0;
  for (std::int64_t p = 0; p < hw; ++p)
    if (static_cast<int>(labels[p]) != ignore) ++count;
  TensorT<S> gx(logits.shape());
  if (!count) return gx;
  const S inv = gscale / static_cast<S>(count);
  std::vector<S> prob(static_cast<size_t>(k));
  for (std::int64_t p = 0; p < hw; ++p) {
    const int l = static_cast<int>(labels[p]);
    if (l == ignore) continue;
    S mx = logits[p];
    for (int c = 1; c < k; ++c) mx = std::max(mx, logits[c * hw + p]);
    S sum = 0;
    for (int c = 0; c < k; ++c) {
      prob[static_cast<size_t>(c)] = std::exp(logits[c * hw + p] - mx);
      sum += prob[static_cast<size_t>(c)];
    }
    for (int c = 0; c < k; ++c) {
      const S sm = prob[static_cast<size_t>(c)] / sum;
      gx[c * hw + p] = (sm - (c == l ? S(1) : S(0))) * inv;
    }
  }
  return gx;
}

}  // namespace haformer
