#pragma once
// Full model assembly: a convolutional branch (stem, four dilated stages) and
// a token branch (stem, patch embedding, attention blocks) fused over one
// shared map, decoded by a pointwise conv and an 8x bilinear upsample. Also
// the plain gradient-descent step and parameter-set (de)serialization.

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "haformer/autodiff.hpp"
#include "haformer/config_file.hpp"
#include "haformer/fusion.hpp"
#include "haformer/hape.hpp"
#include "haformer/init.hpp"
#include "haformer/ops.hpp"
#include "haformer/params.hpp"
#include "haformer/serialize.hpp"
#include "haformer/transformer.hpp"

namespace haformer {

enum class BlockKind { hape, hm, rm };

inline BlockKind block_kind_of(const std::string& name) {
  if (name == "hape") return BlockKind::hape;
  if (name == "hm") return BlockKind::hm;
  if (name == "rm") return BlockKind::rm;
  fail("unknown block kind '" + name + "', want hape|hm|rm");
}

struct ModelConfig {
  int num_classes = 19;
  int input_h = 512, input_w = 1024;
  int stem_channels = 16;
  std::array<int, 4> stage_channels = {32, 64, 128, 128};
  std::array<int, 4> stage_depths = {3, 6, 6, 3};
  std::array<std::vector<int>, 4> dilations = {
      std::vector<int>{2, 2, 2}, std::vector<int>{4, 4, 8, 8, 16, 16},
      std::vector<int>{4, 4, 8, 8, 16, 16}, std::vector<int>{2, 2, 2}};
  std::vector<int> tstem_channels = {16, 32, 64, 128};
  int token_channels = 128;
  EtConfig et;  // et.dim must equal token_channels * patch^2
  FusionKind fusion = FusionKind::cwf;
  BlockKind block = BlockKind::hape;

  int map_h() const { return input_h / 8; }
  int map_w() const { return input_w / 8; }
  int grid_h() const { return input_h / 16 / et.patch; }
  int grid_w() const { return input_w / 16 / et.patch; }
  int tokens() const { return grid_h() * grid_w(); }
  bool has_token_branch() const { return fusion != FusionKind::none; }

  void validate() const {
    require(num_classes >= 2, "num_classes must be at least 2, got " +
                                  std::to_string(num_classes));
    require(stem_channels >= 1, "stem_channels must be positive");
    require(stage_depths == std::array<int, 4>{3, 6, 6, 3},
            "stage depths are fixed at 3,6,6,3");
    for (int s = 0; s < 4; ++s) {
      require(static_cast<int>(dilations[s].size()) == stage_depths[s],
              "stage " + std::to_string(s + 1) + " dilation schedule must list " +
                  std::to_string(stage_depths[s]) + " rates");
      require(stage_channels[s] % 4 == 0,
              "stage " + std::to_string(s + 1) + " width must divide by 4");
      for (int d : dilations[s]) require(d >= 1, "dilation rates must be positive");
    }
    require(stage_channels[2] == stage_channels[3], "stages 3 and 4 share one width");
    require(input_h % 16 == 0 && input_w % 16 == 0,
            "input extents must divide by 16, got " + std::to_string(input_h) + "x" +
                std::to_string(input_w));
    if (has_token_branch()) {
      et.validate();
      require(input_h % (16 * et.patch) == 0 && input_w % (16 * et.patch) == 0,
              "input extents must divide by 16*patch");
      require(et.dim == token_channels * et.patch * et.patch,
              "token width " + std::to_string(et.dim) + " must equal channels*patch^2 = " +
                  std::to_string(token_channels * et.patch * et.patch));
      require(static_cast<int>(tstem_channels.size()) == 4 &&
                  tstem_channels.back() == token_channels,
              "token stem must ramp to the token width in four steps");
      require(token_channels == stage_channels[3],
              "token width must match the map width for fusion");
      require(tokens() % et.reduction == 0,
              "token count " + std::to_string(tokens()) +
                  " must divide by the reduction factor " + std::to_string(et.reduction));
    }
  }
};

inline ModelConfig default_config() { return ModelConfig{}; }

inline const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> v = {"default",       "rm-baseline", "hm-baseline",
                                             "hape-baseline", "add-fusion",  "concat-fusion",
                                             "L1",            "tt-attention"};
  return v;
}

// Named ablation presets layered over a base configuration.
inline ModelConfig apply_variant(ModelConfig cfg, const std::string& name) {
  if (name == "default") return cfg;
  if (name == "rm-baseline" || name == "hm-baseline" || name == "hape-baseline") {
    cfg.block = name == "rm-baseline"  ? BlockKind::rm
                : name == "hm-baseline" ? BlockKind::hm
                                        : BlockKind::hape;
    cfg.fusion = FusionKind::none;
    cfg.et.blocks = 0;
    return cfg;
  }
  if (name == "add-fusion") {
    cfg.fusion = FusionKind::add;
    return cfg;
  }
  if (name == "concat-fusion") {
    cfg.fusion = FusionKind::concat;
    return cfg;
  }
  if (name == "L1") {
    cfg.et.blocks = 1;
    return cfg;
  }
  if (name == "tt-attention") {
    cfg.et.splits = 1;
    cfg.et.reduction = 1;
    return cfg;
  }
  fail("unknown variant '" + name + "'");
}

inline std::array<int, 4> quad(const std::vector<int>& v, const std::string& what) {
  require(v.size() == 4, what + " must list exactly 4 values");
  return {v[0], v[1], v[2], v[3]};
}

// Flat key=value configuration; every key optional. Caller runs view.finish()
// so unknown keys fail loudly.
inline ModelConfig model_config_from_view(ConfigView& v) {
  ModelConfig c;
  c.num_classes = v.get_int("classes", c.num_classes);
  c.input_h = v.get_int("input_h", c.input_h);
  c.input_w = v.get_int("input_w", c.input_w);
  c.stem_channels = v.get_int("stem_channels", c.stem_channels);
  c.stage_channels = quad(v.get_int_list("stage_channels",
                                         {c.stage_channels.begin(), c.stage_channels.end()}),
                          "stage_channels");
  c.stage_depths =
      quad(v.get_int_list("stage_depths", {c.stage_depths.begin(), c.stage_depths.end()}),
           "stage_depths");
  for (int s = 0; s < 4; ++s)
    c.dilations[s] = v.get_int_list("dilations" + std::to_string(s + 1), c.dilations[s]);
  c.tstem_channels = v.get_int_list("tstem_channels", c.tstem_channels);
  c.token_channels = v.get_int("token_channels", c.token_channels);
  c.et.patch = v.get_int("patch", c.et.patch);
  c.et.attn_dim = v.get_int("attn_dim", c.et.attn_dim);
  c.et.heads = v.get_int("heads", c.et.heads);
  c.et.splits = v.get_int("splits", c.et.splits);
  c.et.reduction = v.get_int("reduction", c.et.reduction);
  c.et.mlp_ratio = v.get_int("mlp_ratio", c.et.mlp_ratio);
  c.et.blocks = v.get_int("blocks", c.et.blocks);
  c.et.dim = c.token_channels * c.et.patch * c.et.patch;
  c.fusion = fusion_kind_of(v.get_string("fusion", "cwf"));
  c.block = block_kind_of(v.get_string("block", "hape"));
  return c;
}

struct ConvUnitMeta {
  int cin = 0, cout = 0, k = 3, stride = 1;
  bool act = true;
};

// One convolution with same padding, optionally followed by a PReLU.
template <class V>
struct ConvUnitT {
  using value_type = V;
  ConvUnitMeta meta;
  V w, b, slope;

  template <class U>
  ConvUnitT<U> like() const {
    ConvUnitT<U> o;
    o.meta = meta;
    return o;
  }

  template <class Self, class F>
  static void walk(Self& self, F&& f) {
    f("w", self.w);
    f("b", self.b);
    if (self.meta.act) f("slope", self.slope);
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

template <class V>
V conv_unit_forward(const V& x, const ConvUnitT<V>& u) {
  const auto& c = u.meta;
  V y = conv2d(x, u.w, &u.b, same_conv(c.k, c.k, 1, 1, 1, c.stride, c.stride));
  if (!c.act) return y;
  return prelu(y, u.slope);
}

template <class V>
struct ModelParamsT {
  using value_type = V;
  ModelConfig meta;
  ConvUnitT<V> stem[3];
  ConvUnitT<V> down1, down2, trans3;
  std::vector<HapeParamsT<V>> stage_blocks[4];  // when block kind != rm
  std::vector<RmParamsT<V>> stage_rm[4];        // when block kind == rm
  std::vector<ConvUnitT<V>> tstem;
  V embed;  // [token_channels * patch^2, dim]
  std::vector<EtParamsT<V>> et;
  CwfParamsT<V> fuse_cwf;
  ConcatFusionParamsT<V> fuse_concat;
  ConvUnitT<V> decoder;

  template <class U>
  ModelParamsT<U> like() const {
    ModelParamsT<U> o;
    o.meta = meta;
    for (int i = 0; i < 3; ++i) o.stem[i] = stem[i].template like<U>();
    o.down1 = down1.template like<U>();
    o.down2 = down2.template like<U>();
    o.trans3 = trans3.template like<U>();
    for (int s = 0; s < 4; ++s) {
      for (const auto& b : stage_blocks[s]) o.stage_blocks[s].push_back(b.template like<U>());
      for (const auto& b : stage_rm[s]) o.stage_rm[s].push_back(b.template like<U>());
    }
    for (const auto& u : tstem) o.tstem.push_back(u.template like<U>());
    for (const auto& b : et) o.et.push_back(b.template like<U>());
    o.fuse_cwf = fuse_cwf.template like<U>();
    o.fuse_concat = fuse_concat.template like<U>();
    o.decoder = decoder.template like<U>();
    return o;
  }

  template <class Self, class F>
  static void walk(Self& self, F&& f) {
    auto sub = [&](const std::string& prefix, auto& part) {
      part.visit([&](const std::string& n, auto& t) { f(prefix + n, t); });
    };
    for (int i = 0; i < 3; ++i) sub("cnn_stem." + std::to_string(i) + ".", self.stem[i]);
    sub("down1.", self.down1);
    auto stage = [&](int s) {
      const std::string p = "stage" + std::to_string(s + 1) + ".";
      for (std::size_t i = 0; i < self.stage_blocks[s].size(); ++i)
        sub(p + std::to_string(i) + ".", self.stage_blocks[s][i]);
      for (std::size_t i = 0; i < self.stage_rm[s].size(); ++i)
        sub(p + std::to_string(i) + ".", self.stage_rm[s][i]);
    };
    stage(0);
    sub("down2.", self.down2);
    stage(1);
    sub("trans3.", self.trans3);
    stage(2);
    stage(3);
    if (self.meta.has_token_branch()) {
      for (std::size_t i = 0; i < self.tstem.size(); ++i)
        sub("tstem." + std::to_string(i) + ".", self.tstem[i]);
      f("embed.e", self.embed);
      for (std::size_t i = 0; i < self.et.size(); ++i)
        sub("et." + std::to_string(i) + ".", self.et[i]);
      if (self.meta.fusion == FusionKind::cwf) sub("fusion.", self.fuse_cwf);
      if (self.meta.fusion == FusionKind::concat) sub("fusion.", self.fuse_concat);
    }
    sub("decoder.", self.decoder);
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

using ModelParams = ModelParamsT<Tensor>;

// Deterministic construction from the seed. The decoder starts at zero so a
// fresh model emits uniform class scores.
inline ModelParams build(const ModelConfig& cfg, std::uint32_t seed) {
  cfg.validate();
  Rng g(seed);
  ModelParams m;
  m.meta = cfg;
  auto conv_unit = [&](int cin, int cout, int k, int stride, bool act) {
    ConvUnitT<Tensor> u;
    u.meta = {cin, cout, k, stride, act};
    u.w = kaiming_conv({cout, cin, k, k}, g);
    u.b = Tensor::zeros({cout});
    if (act) u.slope = prelu_slopes(cout);
    return u;
  };
  const int c1 = cfg.stem_channels;
  m.stem[0] = conv_unit(3, c1, 3, 1, true);
  m.stem[1] = conv_unit(c1, c1, 3, 1, true);
  m.stem[2] = conv_unit(c1, c1, 3, 2, true);
  m.down1 = conv_unit(c1, cfg.stage_channels[0], 3, 2, true);
  m.down2 = conv_unit(cfg.stage_channels[0], cfg.stage_channels[1], 3, 2, true);
  m.trans3 = conv_unit(cfg.stage_channels[1], cfg.stage_channels[2], 3, 1, true);
  // Each residual block starts as an identity: its output projection is
  // zeroed so the 18-block stack neither amplifies nor attenuates the stem
  // signal at initialization (the BN-free analog of zero-init residual
  // scaling). The projections pick up gradient from the first update on.
  for (int s = 0; s < 4; ++s)
    for (int i = 0; i < cfg.stage_depths[s]; ++i) {
      if (cfg.block == BlockKind::rm) {
        auto b = make_rm(cfg.stage_channels[s], cfg.dilations[s][i], g);
        b.expand_w = Tensor::zeros(b.expand_w.shape());
        m.stage_rm[s].push_back(std::move(b));
      } else {
        auto b = make_hape(cfg.stage_channels[s], cfg.dilations[s][i],
                           cfg.block == BlockKind::hape, g);
        b.expand_w = Tensor::zeros(b.expand_w.shape());
        m.stage_blocks[s].push_back(std::move(b));
      }
    }
  if (cfg.has_token_branch()) {
    int prev = 3;
    for (int c : cfg.tstem_channels) {
      m.tstem.push_back(conv_unit(prev, c, 3, 2, true));
      prev = c;
    }
    m.embed = xavier_linear(cfg.token_channels * cfg.et.patch * cfg.et.patch, cfg.et.dim, g);
    for (int i = 0; i < cfg.et.blocks; ++i) m.et.push_back(make_et(cfg.et, g));
    if (cfg.fusion == FusionKind::cwf)
      m.fuse_cwf = make_cwf(cfg.token_channels, cfg.stage_channels[3], g);
    if (cfg.fusion == FusionKind::concat)
      m.fuse_concat = make_concat_fusion(cfg.token_channels, cfg.stage_channels[3], g);
  }
  m.decoder.meta = {cfg.stage_channels[3], cfg.num_classes, 1, 1, false};
  m.decoder.w = Tensor::zeros({cfg.num_classes, cfg.stage_channels[3], 1, 1});
  m.decoder.b = Tensor::zeros({cfg.num_classes});
  return m;
}

template <class V>
struct ModelTapsT {
  V features;  // convolutional branch output, [C_f, H/8, W/8]
  V tokens;    // token branch output, [N, D]; unset without a token branch
};
using ModelTaps = ModelTapsT<Tensor>;

template <class V>
V run_stage(const V& x0, const ModelParamsT<V>& m, int s) {
  V x = x0;
  if (m.meta.block == BlockKind::rm)
    for (const auto& b : m.stage_rm[s]) x = rm_forward(x, b);
  else
    for (const auto& b : m.stage_blocks[s]) x = hape_forward(x, b);
  return x;
}

template <class V>
V model_forward(const ModelParamsT<V>& m, const V& image, ModelTapsT<V>* taps = nullptr) {
  const ModelConfig& cfg = m.meta;
  const Shape s = image.shape();
  require(s == Shape{3, cfg.input_h, cfg.input_w},
          "forward: image " + shape_str(s) + " does not match configured input [3," +
              std::to_string(cfg.input_h) + "," + std::to_string(cfg.input_w) + "]");
  V x = conv_unit_forward(image, m.stem[0]);
  x = conv_unit_forward(x, m.stem[1]);
  x = conv_unit_forward(x, m.stem[2]);
  x = conv_unit_forward(x, m.down1);
  x = run_stage(x, m, 0);
  x = conv_unit_forward(x, m.down2);
  x = run_stage(x, m, 1);
  x = conv_unit_forward(x, m.trans3);
  x = run_stage(x, m, 2);
  x = run_stage(x, m, 3);
  if (taps) taps->features = x;
  V head_in = x;
  if (cfg.has_token_branch()) {
    V t = image;
    for (const auto& u : m.tstem) t = conv_unit_forward(t, u);
    TokenGridT<V> tg = patch_embed(t, cfg.et.patch, m.embed);
    for (const auto& blk : m.et) tg = et_block(tg, blk);
    if (taps) taps->tokens = tg.tokens;
    V tmap =
        reshape_tokens_to_map(tg, cfg.token_channels, cfg.et.patch, cfg.map_h(), cfg.map_w());
    if (cfg.fusion == FusionKind::cwf) head_in = cwf_forward(tmap, x, m.fuse_cwf);
    if (cfg.fusion == FusionKind::add) head_in = add_fusion(tmap, x);
    if (cfg.fusion == FusionKind::concat) head_in = concat_fusion(tmap, x, m.fuse_concat);
  }
  V logits = conv_unit_forward(head_in, m.decoder);
  return bilinear_upsample(logits, cfg.input_h, cfg.input_w);
}

// One plain gradient-descent update over all parameters. Returns the
// pre-update mean cross-entropy; pixels labeled 255 are ignored.
inline float train_step(ModelParams& m, const Tensor& image, const Tensor& labels, double lr) {
  ad::Tape tape;
  ModelParamsT<ad::Var> mv = rebind_params<ad::Var>(
      m, [&](const std::string& n, const Tensor& t) { return tape.param(n, t); });
  ad::Var logits = model_forward(mv, tape.leaf(image));
  ad::Var loss = softmax_xent(logits, labels);
  const float out = loss.value()[0];
  const auto grads = tape.backward(loss);
  m.visit([&](const std::string& n, Tensor& t) {
    const Tensor& g = grads.at(n);
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] -= static_cast<float>(lr * g[i]);
  });
  return out;
}

inline void save_model(const ModelParams& m, const std::string& path) {
  std::vector<NamedTensor> out;
  m.visit([&](const std::string& n, const Tensor& t) { out.push_back({n, t}); });
  save_tensors(path, out);
}

// Loads into an already-built model so every tensor is checked against the
// builder's shape ledger; surplus, missing, or reshaped tensors all fail
// with the offending name.
inline void load_model(ModelParams& m, const std::string& path) {
  const std::vector<NamedTensor> in = load_tensors(path);
  std::map<std::string, const Tensor*> by_name;
  for (const auto& nt : in) by_name[nt.name] = &nt.tensor;
  std::size_t used = 0;
  m.visit([&](const std::string& n, Tensor& t) {
    auto it = by_name.find(n);
    if (it == by_name.end()) fail("weights file lacks tensor '" + n + "'");
    require(it->second->shape() == t.shape(),
            "tensor '" + n + "' has shape " + shape_str(it->second->shape()) +
                ", model wants " + shape_str(t.shape()));
    t = *it->second;
    ++used;
  });
  require(used == in.size(), "weights file holds " + std::to_string(in.size()) +
                                 " tensors, model uses " + std::to_string(used));
}

// The dilation rate of every built block, stage by stage, read back from the
// constructed parameters rather than the config.
inline std::vector<std::vector<int>> dilation_walk(const ModelParams& m) {
  std::vector<std::vector<int>> out(4);
  for (int s = 0; s < 4; ++s) {
    if (m.meta.block == BlockKind::rm)
      for (const auto& b : m.stage_rm[s]) out[s].push_back(b.meta.dilation);
    else
      for (const auto& b : m.stage_blocks[s]) out[s].push_back(b.meta.dilation);
  }
  return out;
}

}  // namespace haformer
