#include "haformer/accounting.hpp"

#include <algorithm>
#include <cstdio>

#include "haformer/hape.hpp"

namespace haformer {
namespace {

// Accumulates one module row. Elementwise flops are gathered separately and
// folded into flops = 2*macs + elems at the end.
struct RowAcc {
  CostRow row;
  std::int64_t elems = 0;
  bool with_res = false;

  void conv(int cin, int cout, int kh, int kw, int groups, bool bias, std::int64_t ho,
            std::int64_t wo) {
    row.params += conv_param_count(cin, cout, kh, kw, groups, bias);
    if (with_res) row.macs += conv_mac_count(cin, cout, kh, kw, groups, ho, wo);
  }
  void linear(std::int64_t in, std::int64_t out, bool bias, std::int64_t rows_through) {
    row.params += in * out + (bias ? out : 0);
    if (with_res) row.macs += rows_through * in * out;
  }
  void matmul(std::int64_t n, std::int64_t k, std::int64_t m) {
    if (with_res) row.macs += n * k * m;
  }
  void slopes(int c) { row.params += c; }
  void elem(std::int64_t n) {
    if (with_res) elems += n;
  }
  void peak(std::int64_t n) {
    if (with_res) row.peak_act = std::max(row.peak_act, n);
  }
  CostRow done() {
    row.flops = 2 * row.macs + elems;
    return row;
  }
};

CostRow conv_unit_row(const std::string& name, int cin, int cout, int k, bool act,
                      std::int64_t ho, std::int64_t wo, bool with_res) {
  RowAcc a;
  a.row.module = name;
  a.with_res = with_res;
  a.conv(cin, cout, k, k, 1, true, ho, wo);
  if (act) {
    a.slopes(cout);
    a.elem(cout * ho * wo);
  }
  a.peak(cout * ho * wo);
  return a.done();
}

void hape_block(RowAcc& a, int c, bool use_pem, std::int64_t px) {
  const int cr = c / 4;
  a.conv(c, cr, 1, 1, 1, true, 0, 0);
  a.matmul(px, c, cr);  // reduce at spatial extent px
  for (int i = 0; i < kHapeBranches; ++i) {
    const int k = kHapeKernels[i];
    const int groups = i == 0 ? 1 : cr;
    a.conv(cr, cr, k, 1, groups, true, 0, 0);
    a.conv(cr, cr, 1, k, groups, true, 0, 0);
    if (a.with_res)
      a.row.macs += 2 * conv_mac_count(cr, cr, k, 1, groups, 1, 1) * px;
    a.slopes(cr);
    a.elem(cr * px);  // pair activation
    if (use_pem) {
      a.slopes(cr);
      // channel mean, spatial softmax, excite-multiply, residual, activation
      a.elem(cr * px + px + 3 * cr * px);
    }
  }
  a.elem(3 * cr * px);  // branch sum
  a.slopes(cr);
  a.elem(cr * px);  // post-sum activation
  a.conv(cr, c, 1, 1, 1, true, 0, 0);
  a.matmul(px, cr, c);
  a.elem(c * px);  // residual add
  a.peak(static_cast<std::int64_t>(c) * px);
}

void rm_block(RowAcc& a, int c, std::int64_t px) {
  const int cr = c / 4;
  a.conv(c, cr, 1, 1, 1, true, 0, 0);
  a.matmul(px, c, cr);
  a.conv(cr, cr, 3, 1, 1, true, 0, 0);
  a.conv(cr, cr, 1, 3, 1, true, 0, 0);
  if (a.with_res) a.row.macs += 2 * conv_mac_count(cr, cr, 3, 1, 1, 1, 1) * px;
  a.slopes(cr);
  a.elem(cr * px);
  a.conv(cr, c, 1, 1, 1, true, 0, 0);
  a.matmul(px, cr, c);
  a.elem(c * px);
  a.peak(static_cast<std::int64_t>(c) * px);
}

CostRow stage_row(const std::string& name, const ModelConfig& cfg, int s, std::int64_t px,
                  bool with_res) {
  RowAcc a;
  a.row.module = name;
  a.with_res = with_res;
  for (int i = 0; i < cfg.stage_depths[s]; ++i) {
    if (cfg.block == BlockKind::rm)
      rm_block(a, cfg.stage_channels[s], px);
    else
      hape_block(a, cfg.stage_channels[s], cfg.block == BlockKind::hape, px);
  }
  return a.done();
}

CostRow et_row(const std::string& name, const EtConfig& et, std::int64_t n, bool with_res) {
  RowAcc a;
  a.row.module = name;
  a.with_res = with_res;
  const std::int64_t d = et.dim, attn = et.attn_dim, dm = d * et.mlp_ratio;
  const std::int64_t hd = et.head_dim(), nr = n / et.reduction;
  a.row.params += 4 * d;  // two norms, scale and shift
  a.elem(2 * 4 * n * d);  // mean, variance, normalize, affine per norm
  for (int qkv = 0; qkv < 3; ++qkv) a.linear(d, attn, false, n);
  if (et.reduction > 1) {
    a.linear(hd * et.reduction, hd * et.heads, false, nr);
    a.matmul(nr, hd * et.reduction, hd * et.heads);  // shared projection hits k and v
  }
  a.matmul(n, attn, nr);  // scores, all heads and chunks together
  a.elem(et.heads * et.splits * n * nr);  // softmax
  a.matmul(n, nr, attn);  // attention-weighted values
  a.linear(attn, d, false, n);
  a.elem(2 * n * d);  // two residual adds
  a.linear(d, dm, true, n);
  a.conv(static_cast<int>(dm), static_cast<int>(dm), 3, 3, static_cast<int>(dm), true, 0, 0);
  if (with_res) a.row.macs += 9 * dm * n;
  a.elem(n * dm);  // gelu
  a.linear(dm, d, true, n);
  a.peak(std::max({n * nr, n * dm, n * d, n * attn}));
  return a.done();
}

}  // namespace

std::int64_t conv_param_count(int cin, int cout, int kh, int kw, int groups, bool bias) {
  return static_cast<std::int64_t>(cout) * (cin / groups) * kh * kw + (bias ? cout : 0);
}

std::int64_t conv_mac_count(int cin, int cout, int kh, int kw, int groups, std::int64_t ho,
                            std::int64_t wo) {
  return static_cast<std::int64_t>(cin / groups) * cout * kh * kw * ho * wo;
}

CostRow CostReport::total() const {
  CostRow t;
  t.module = "total";
  for (const CostRow& r : rows) {
    t.params += r.params;
    t.macs += r.macs;
    t.flops += r.flops;
    t.peak_act = std::max(t.peak_act, r.peak_act);
  }
  return t;
}

AttentionMemory attention_memory(const EtConfig& et, std::int64_t tokens) {
  et.validate();
  require(tokens % et.reduction == 0, "attention_memory: tokens must divide by reduction");
  AttentionMemory m;
  m.sequential = tokens * (tokens / et.reduction);
  m.parallel = et.splits * m.sequential;
  return m;
}

namespace {

CostReport build_report(const ModelConfig& cfg, std::int64_t h, std::int64_t w, bool with_res) {
  CostReport rep;
  const std::int64_t px_f = with_res ? (h / 8) * (w / 8) : 0;
  auto add = [&](CostRow r) { rep.rows.push_back(std::move(r)); };

  const int c1 = cfg.stem_channels;
  {
    RowAcc a;
    a.row.module = "cnn_stem";
    a.with_res = with_res;
    const std::int64_t hw = h * w, hw2 = (h / 2) * (w / 2);
    a.conv(3, c1, 3, 3, 1, true, h, w);
    a.slopes(c1);
    a.elem(c1 * hw);
    a.conv(c1, c1, 3, 3, 1, true, h, w);
    a.slopes(c1);
    a.elem(c1 * hw);
    a.conv(c1, c1, 3, 3, 1, true, h / 2, w / 2);
    a.slopes(c1);
    a.elem(c1 * hw2);
    a.peak(c1 * hw);
    add(a.done());
  }
  add(conv_unit_row("down1", c1, cfg.stage_channels[0], 3, true, h / 4, w / 4, with_res));
  add(stage_row("stage1", cfg, 0, (h / 4) * (w / 4), with_res));
  add(conv_unit_row("down2", cfg.stage_channels[0], cfg.stage_channels[1], 3, true, h / 8,
                    w / 8, with_res));
  add(stage_row("stage2", cfg, 1, px_f, with_res));
  add(conv_unit_row("trans3", cfg.stage_channels[1], cfg.stage_channels[2], 3, true, h / 8,
                    w / 8, with_res));
  add(stage_row("stage3", cfg, 2, px_f, with_res));
  add(stage_row("stage4", cfg, 3, px_f, with_res));

  if (cfg.has_token_branch()) {
    const std::int64_t gh = h / (16 * cfg.et.patch), gw = w / (16 * cfg.et.patch);
    const std::int64_t n = gh * gw * cfg.et.patch * cfg.et.patch;
    {
      RowAcc a;
      a.row.module = "transformer_stem";
      a.with_res = with_res;
      int prev = 3;
      std::int64_t th = h, tw = w;
      for (int c : cfg.tstem_channels) {
        th /= 2;
        tw /= 2;
        a.conv(prev, c, 3, 3, 1, true, th, tw);
        a.slopes(c);
        a.elem(c * th * tw);
        a.peak(c * th * tw);
        prev = c;
      }
      add(a.done());
    }
    {
      RowAcc a;
      a.row.module = "patch_embed";
      a.with_res = with_res;
      const std::int64_t pdim = static_cast<std::int64_t>(cfg.token_channels) * cfg.et.patch *
                                cfg.et.patch;
      a.linear(pdim, cfg.et.dim, false, n);
      a.peak(std::max(n * pdim, n * cfg.et.dim));
      add(a.done());
    }
    for (int i = 0; i < cfg.et.blocks; ++i)
      add(et_row("et_block" + std::to_string(i + 1), cfg.et, n, with_res));
    if (cfg.et.blocks > 0) {
      rep.measured_attention_factor = cfg.et.reduction;
      rep.nominal_attention_factor =
          static_cast<double>(cfg.et.splits) * cfg.et.reduction;
    }

    const int ct = cfg.token_channels, cf = cfg.stage_channels[3];
    RowAcc a;
    a.row.module = "fusion";
    a.with_res = with_res;
    a.elem(ct * px_f);  // token map resampled onto the feature grid
    if (cfg.fusion == FusionKind::cwf) {
      const CwfMeta meta{ct, cf, 16};
      const int cg = ct + cf, mid = meta.mid();
      a.conv(cg, cg, 3, 3, cg, true, h / 8, w / 8);
      a.conv(cg, mid, 1, 1, 1, true, h / 8, w / 8);
      a.elem(mid * px_f);  // pooled mean
      a.conv(mid, cf, 1, 1, 1, true, 1, 1);
      a.elem(cf);               // sigmoid
      a.elem(3 * cf * px_f);    // two gated products and their sum
      a.elem(cf * px_f);        // relu
      a.peak(static_cast<std::int64_t>(cg) * px_f);
    } else if (cfg.fusion == FusionKind::concat) {
      a.conv(ct + cf, cf, 1, 1, 1, true, h / 8, w / 8);
      a.peak(static_cast<std::int64_t>(ct + cf) * px_f);
    } else {  // add
      a.elem(2 * cf * px_f);  // sum and relu
      a.peak(static_cast<std::int64_t>(cf) * px_f);
    }
    add(a.done());
  }

  {
    RowAcc a;
    a.row.module = "decoder";
    a.with_res = with_res;
    a.conv(cfg.stage_channels[3], cfg.num_classes, 1, 1, 1, true, h / 8, w / 8);
    a.elem(static_cast<std::int64_t>(cfg.num_classes) * h * w);  // bilinear resize
    a.peak(static_cast<std::int64_t>(cfg.num_classes) * h * w);
    add(a.done());
  }
  return rep;
}

}  // namespace

CostReport count_params(const ModelConfig& cfg) {
  cfg.validate();
  return build_report(cfg, 0, 0, false);
}

CostReport count_flops(const ModelConfig& cfg, int h, int w) {
  ModelConfig at = cfg;
  at.input_h = h;
  at.input_w = w;
  at.validate();  // reuses the divisibility rules for the requested extents
  return build_report(at, h, w, true);
}

std::string emit_report(const CostReport& r, const std::string& format) {
  require(format == "table" || format == "csv",
          "emit_report: format must be 'table' or 'csv', got '" + format + "'");
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line,
                "# flops = 2*macs + elementwise (activations, softmax, norms, adds, resampling "
                "at 1 flop/element/pass; bias adds folded into macs)\n");
  out += line;
  std::snprintf(line, sizeof line,
                "# attention: score macs reduced x%g measured (chunked form nominally x%g); "
                "peak counts one sequential score buffer\n",
                r.measured_attention_factor, r.nominal_attention_factor);
  out += line;
  std::snprintf(line, sizeof line,
                "# calibration: attention width 64 (half the token width) and a 16x-squeezed "
                "fusion gate; design targets ~0.60M params, ~11.05G flops at 512x1024\n");
  out += line;

  auto put = [&](const CostRow& row) {
    if (format == "csv")
      std::snprintf(line, sizeof line, "%s,%lld,%lld,%lld,%lld\n", row.module.c_str(),
                    static_cast<long long>(row.params), static_cast<long long>(row.macs),
                    static_cast<long long>(row.flops), static_cast<long long>(row.peak_act));
    else
      std::snprintf(line, sizeof line, "%-18s %12lld %14lld %14lld %12lld\n",
                    row.module.c_str(), static_cast<long long>(row.params),
                    static_cast<long long>(row.macs), static_cast<long long>(row.flops),
                    static_cast<long long>(row.peak_act));
    out += line;
  };
  if (format == "csv") {
    out += "module,params,macs,flops,peak_act\n";
  } else {
    std::snprintf(line, sizeof line, "%-18s %12s %14s %14s %12s\n", "module", "params", "macs",
                  "flops", "peak_act");
    out += line;
  }
  for (const CostRow& row : r.rows) put(row);
  if (!r.rows.empty()) put(r.total());
  return out;
}

}  // namespace haformer
