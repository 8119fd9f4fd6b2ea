#include "haformer/checks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <ostream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "haformer/accounting.hpp"
#include "haformer/autodiff.hpp"
#include "haformer/network.hpp"

namespace haformer {
namespace {

Tensor rnd(const Shape& s, unsigned seed, float lo = -1.0f, float hi = 1.0f) {
  Tensor t(s);
  std::mt19937 g(seed);
  std::uniform_real_distribution<float> d(lo, hi);
  for (auto& v : t.vec()) v = d(g);
  return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "max_abs_diff: shape mismatch");
  double m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

// Same objective as the unit-test harness: a fixed random weighting of the
// block output, differentiated on the tape and finite-differenced in double.
template <class PT, class Fwd>
ad::GradCheckReport block_grads(const std::vector<std::pair<std::string, Tensor>>& inputs,
                                const PT& p, Fwd&& fwd, double tol = 1e-3) {
  ad::Tape tape;
  std::vector<std::pair<std::string, Tensor>> named = inputs;
  std::vector<ad::Var> in_vars;
  for (const auto& [name, value] : inputs) in_vars.push_back(tape.param(name, value));
  auto pv = rebind_params<ad::Var>(p, [&](const std::string& n, const Tensor& t) {
    named.emplace_back(n, t);
    return tape.param(n, t);
  });
  ad::Var y = fwd(in_vars, pv);
  const Tensor lw = rnd(y.shape(), 4242, 0.2f, 1.7f);
  ad::Var loss = ad::sum_all(ad::mul(y, tape.leaf(lw)));
  const auto grads = tape.backward(loss);
  auto eval64 = [&](const std::string& name, const DTensor& sub) {
    std::vector<DTensor> ins;
    for (const auto& [n, v] : inputs)
      ins.push_back(n == name ? sub : v.template cast<double>());
    auto pd = rebind_params<DTensor>(p, [&](const std::string& n, const Tensor& t) {
      return n == name ? sub : t.cast<double>();
    });
    const DTensor yd = fwd(ins, pd);
    double acc = 0;
    for (std::int64_t i = 0; i < yd.numel(); ++i) acc += yd[i] * static_cast<double>(lw[i]);
    return acc;
  };
  return ad::grad_check_params(named, grads, eval64, tol);
}

void expect(bool ok, const std::string& what) { require(ok, what); }

void expect_close(double got, double want, double tol, const std::string& what) {
  require(std::abs(got - want) <= tol,
          what + ": got " + std::to_string(got) + ", want " + std::to_string(want));
}

bool fault_on(const std::string& name) {
  const char* want = std::getenv("HAFORMER_CHECK_FAULT");
  return want && *want && name.find(want) != std::string::npos;
}

template <class P>
void zero_weights(P& p) {
  p.visit([](const std::string& n, Tensor& t) {
    if (n.ends_with(".w") || n.ends_with(".b")) t = Tensor::zeros(t.shape());
  });
}

ModelConfig small64() {
  ModelConfig c;
  c.input_h = c.input_w = 64;
  return c;
}

// ---- registered properties ----

void check_shuffle_round_trip(const std::string& self) {
  Tensor x = rnd({8, 6, 5}, 11);
  Tensor s = channel_shuffle(x, 4);
  if (fault_on(self)) s[0] += 0.5f;
  const Tensor back = channel_shuffle(s, 8 / 4);  // regrouping by C/g inverts the permutation
  expect(max_abs_diff(back, x) == 0.0, "shuffle round trip must be exact");
  std::vector<float> a(x.vec()), b(s.vec());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  expect(a == b, "shuffle must preserve the value multiset");
}

void check_softmax_rows(const std::string& self) {
  for (unsigned seed = 0; seed < 100; ++seed) {
    Tensor m = rnd({7, 13}, 500 + seed, -9.0f, 9.0f);
    softmax_inplace(m, 1);
    if (fault_on(self)) m[0] += 1e-3f;
    for (int i = 0; i < 7; ++i) {
      double sum = 0;
      for (int j = 0; j < 13; ++j) {
        expect(m.at(i, j) >= 0.0f, "softmax outputs must be nonnegative");
        sum += m.at(i, j);
      }
      expect_close(sum, 1.0, 1e-6, "softmax row sum");
    }
  }
}

void check_pem_normalized(const std::string& self) {
  for (unsigned seed = 0; seed < 100; ++seed) {
    Tensor x = rnd({5, 4, 6}, 900 + seed, -10.0f, 10.0f);
    Tensor a = pem_attention(x);
    if (fault_on(self)) a[0] += 1e-3f;
    expect(a.shape() == Shape{1, 4, 6}, "excitation map keeps the spatial extents");
    double sum = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
      expect(a[i] >= 0.0f, "excitation map must be nonnegative");
      sum += a[i];
    }
    expect_close(sum, 1.0, 1e-6, "excitation map sum");
  }
}

void check_hape_zeroed_is_shuffle(const std::string& self) {
  Rng g(7);
  HapeParamsT<Tensor> p = make_hape(8, 2, true, g);
  zero_weights(p);
  const Tensor x = rnd({8, 5, 5}, 13);
  Tensor want = channel_shuffle(x, kHapeShuffleGroups);
  if (fault_on(self)) want[0] += 0.5f;
  expect(max_abs_diff(hape_forward(x, p), want) <= 1e-6,
         "zero-weight block must reduce to the channel shuffle");
}

void check_rm_zero_identity(const std::string& self) {
  Rng g(7);
  RmParamsT<Tensor> p = make_rm(8, 2, g);
  zero_weights(p);
  Tensor x = rnd({8, 5, 5}, 17);
  const Tensor y = rm_forward(x, p);
  if (fault_on(self)) x[0] += 0.5f;
  expect(max_abs_diff(y, x) == 0.0, "zeroed baseline block must be the identity");
}

void check_dilation_schedule(const std::string& self) {
  std::vector<std::vector<int>> want = {
      {2, 2, 2}, {4, 4, 8, 8, 16, 16}, {4, 4, 8, 8, 16, 16}, {2, 2, 2}};
  if (fault_on(self)) want[1][0] = 5;
  expect(dilation_walk(build(small64(), 1)) == want,
         "built model must carry the documented dilation ladder");
}

DTensor matmul64(const DTensor& a, const DTensor& b) {
  const int n = a.dim(0), k = a.dim(1), m = b.dim(1);
  DTensor y({n, m});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      double acc = 0;
      for (int e = 0; e < k; ++e) acc += a.at(i, e) * b.at(e, j);
      y.at(i, j) = acc;
    }
  return y;
}

// Plain scaled-dot-product attention in 64-bit, coded without the chunked
// routines so the production path has an independent reference.
DTensor vanilla_attention(const DTensor& z, const DTensor& wq, const DTensor& wk,
                          const DTensor& wv, const DTensor& wo) {
  const DTensor q = matmul64(z, wq), k = matmul64(z, wk), v = matmul64(z, wv);
  const int n = q.dim(0), d = q.dim(1);
  DTensor att({n, n});
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0;
      for (int e = 0; e < d; ++e) acc += q.at(i, e) * k.at(j, e);
      att.at(i, j) = acc * inv;
    }
  for (int i = 0; i < n; ++i) {
    double mx = att.at(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, att.at(i, j));
    double sum = 0;
    for (int j = 0; j < n; ++j) sum += std::exp(att.at(i, j) - mx);
    for (int j = 0; j < n; ++j) att.at(i, j) = std::exp(att.at(i, j) - mx) / sum;
  }
  return matmul64(matmul64(att, v), wo);
}

void check_emhsa_vanilla_oracle(const std::string& self) {
  EtConfig et;
  et.dim = 8;
  et.attn_dim = 8;
  et.heads = 1;
  et.splits = 1;
  et.reduction = 1;
  for (unsigned inst = 0; inst < 5; ++inst) {
    Rng g(2000 + inst);
    const EtParamsT<Tensor> p = make_et(et, g);
    const int n = 4 + static_cast<int>(inst) * 3;
    const Tensor z = rnd({n, 8}, 2100 + inst);
    Tensor got = emhsa(TokenGrid{z, 1, n}, p);
    if (fault_on(self)) got[0] += 1e-3f;
    const DTensor want =
        vanilla_attention(z.cast<double>(), p.wq.cast<double>(), p.wk.cast<double>(),
                          p.wv.cast<double>(), p.wo.cast<double>());
    double m = 0;
    for (std::int64_t i = 0; i < got.numel(); ++i)
      m = std::max(m, std::abs(static_cast<double>(got[i]) - want[i]));
    expect(m <= 1e-5, "single-head unreduced attention must match the plain form");
  }
}

void check_emhsa_row_stochastic(const std::string& self) {
  for (unsigned seed = 0; seed < 100; ++seed) {
    const Tensor q = rnd({6, 8}, 3000 + seed), k = rnd({9, 8}, 3100 + seed);
    Tensor scores = matmul(q, transpose2d(k));
    for (auto& v : scores.vec()) v /= std::sqrt(8.0f);
    softmax_inplace(scores, 1);
    if (fault_on(self)) scores[0] += 1e-3f;
    for (int i = 0; i < 6; ++i) {
      double sum = 0;
      for (int j = 0; j < 9; ++j) sum += scores.at(i, j);
      expect_close(sum, 1.0, 1e-6, "attention row sum");
    }
  }
}

void check_et_residual_identity(const std::string& self) {
  EtConfig et;
  et.dim = 8;
  et.attn_dim = 8;
  et.heads = 2;
  et.splits = 2;
  et.reduction = 1;
  Rng g(23);
  EtParamsT<Tensor> p = make_et(et, g);
  p.wo = Tensor::zeros(p.wo.shape());
  p.fc2_w = Tensor::zeros(p.fc2_w.shape());
  p.fc2_b = Tensor::zeros(p.fc2_b.shape());
  const TokenGrid tg{rnd({9, 8}, 29), 3, 3};
  Tensor got = et_block(tg, p).tokens;
  if (fault_on(self)) got[0] += 1e-3f;
  expect(max_abs_diff(got, tg.tokens) <= 1e-6,
         "zeroed output projections must make the block an identity");
}

void check_fusion_zeroed_gate(const std::string& self) {
  Rng g(31);
  CwfParamsT<Tensor> p = make_cwf(6, 6, g, 2);
  zero_weights(p);
  const Tensor t = rnd({6, 4, 4}, 37), f = rnd({6, 4, 4}, 41);
  Tensor want({6, 4, 4});
  for (std::int64_t i = 0; i < want.numel(); ++i)
    want[i] = std::max(0.0f, 0.5f * (t[i] + f[i]));
  if (fault_on(self)) want[0] += 1e-3f;
  expect(max_abs_diff(cwf_forward(t, f, p), want) <= 1e-6,
         "zeroed fusion must reduce to relu of the half sum");
}

template <class V>
struct ConvCheckParamsT {
  using value_type = V;
  V w, b;
  template <class U>
  ConvCheckParamsT<U> like() const {
    return {};
  }
  template <class F>
  void visit(F&& f) {
    f("w", w);
    f("b", b);
  }
  template <class F>
  void visit(F&& f) const {
    f("w", w);
    f("b", b);
  }
};

void check_grad_conv(const std::string&) {
  // one representative primitive; the unit suite sweeps every op
  ConvCheckParamsT<Tensor> p;
  p.w = rnd({4, 3, 3, 3}, 43);
  p.b = rnd({4}, 47);
  const auto r =
      block_grads({{"x", rnd({3, 5, 6}, 53)}}, p, [](const auto& ins, const auto& pp) {
        return conv2d(ins[0], pp.w, &pp.b, same_conv(3, 3, 1, 1, 1, 2, 2));
      });
  expect(r.pass, "conv gradients vs finite differences, worst " + r.worst + " rel " +
                     std::to_string(r.max_rel_err));
}

void check_grad_hape(const std::string&) {
  Rng g(43);
  const HapeParamsT<Tensor> p = make_hape(8, 2, true, g);
  const auto r = block_grads({{"x", rnd({8, 6, 6}, 44)}}, p,
                             [](const auto& ins, const auto& pp) {
                               return hape_forward(ins[0], pp);
                             });
  expect(r.pass, "hierarchy block gradients, worst " + r.worst + " rel " +
                     std::to_string(r.max_rel_err));
}

void check_grad_et(const std::string&) {
  EtConfig et;
  et.dim = 8;
  et.attn_dim = 8;
  et.heads = 2;
  et.splits = 2;
  et.reduction = 1;
  Rng g(61);
  const EtParamsT<Tensor> p = make_et(et, g);
  const auto r = block_grads({{"z", rnd({9, 8}, 67)}}, p, [](const auto& ins, const auto& pp) {
    using GridT = TokenGridT<std::decay_t<decltype(ins[0])>>;
    return et_block(GridT{ins[0], 3, 3}, pp).tokens;
  });
  expect(r.pass, "transformer block gradients, worst " + r.worst + " rel " +
                     std::to_string(r.max_rel_err));
}

void check_grad_cwf(const std::string&) {
  Rng g(71);
  const CwfParamsT<Tensor> p = make_cwf(4, 4, g, 2);
  const auto r = block_grads({{"t", rnd({4, 4, 4}, 73)}, {"f", rnd({4, 4, 4}, 79)}}, p,
                             [](const auto& ins, const auto& pp) {
                               return cwf_forward(ins[0], ins[1], pp);
                             });
  expect(r.pass,
         "fusion gradients, worst " + r.worst + " rel " + std::to_string(r.max_rel_err));
}

void check_shape_ledger(const std::string& self) {
  const ModelParams m = build(small64(), 5);
  ModelTaps taps;
  const Tensor logits = model_forward(m, rnd({3, 64, 64}, 83, 0.0f, 1.0f), &taps);
  Shape want{19, 64, 64};
  if (fault_on(self)) want[0] = 20;
  expect(logits.shape() == want, "logit extents");
  expect(taps.features.shape() == Shape{128, 8, 8}, "feature tap extents");
  expect(taps.tokens.shape() == Shape{16, 128}, "token tap extents");
  for (std::int64_t i = 0; i < logits.numel(); ++i)
    expect(std::isfinite(logits[i]), "logits must stay finite");
}

void check_initial_loss(const std::string& self) {
  ModelParams m = build(small64(), 5);
  const float loss =
      train_step(m, rnd({3, 64, 64}, 89, 0.0f, 1.0f), Tensor::full({64, 64}, 3.0f), 0.0);
  const double want = fault_on(self) ? std::log(20.0) : std::log(19.0);
  expect_close(loss, want, 1e-4, "fresh-model loss");
}

void check_decoder_locality(const std::string& self) {
  ModelParams m = build(small64(), 5);
  if (fault_on(self)) m.decoder.w[0] = 1.0f;
  const Tensor logits = model_forward(m, rnd({3, 64, 64}, 97, 0.0f, 1.0f));
  for (int k = 0; k < 19; ++k)  // decoder starts zeroed, so each plane is flat
    for (std::int64_t i = 0; i < 64 * 64; ++i)
      expect(logits[k * 64 * 64 + i] == logits[k * 64 * 64],
             "zero decoder must give spatially constant logits");
}

void check_serialization(const std::string& self) {
  const ModelConfig cfg = apply_variant(small64(), "rm-baseline");
  const ModelParams a = build(cfg, 19);
  const std::string path = "haformer_checks_tmp.hafk";
  save_model(a, path);
  ModelConfig bc = cfg;
  if (fault_on(self)) bc.num_classes = 18;
  ModelParams b = build(bc, 77);
  bool threw = false;
  try {
    load_model(b, path);
  } catch (const std::exception&) {
    threw = true;
  }
  std::remove(path.c_str());
  expect(!threw, "round trip must load");
  const auto pa = collect_params(a), pb = collect_params(b);
  for (std::size_t i = 0; i < pa.size(); ++i)
    expect(max_abs_diff(pa[i].second, pb[i].second) == 0.0, "weights must round trip exactly");
}

void check_params_enumeration(const std::string& self) {
  for (const std::string& v : variant_names()) {
    const ModelConfig cfg = apply_variant(small64(), v);
    std::int64_t analytic = count_params(cfg).total().params;
    if (fault_on(self)) analytic += 1;
    expect(analytic == param_count(build(cfg, 1)),
           "analytic parameter count must equal enumeration for " + v);
  }
}

void check_params_ordering(const std::string& self) {
  auto total = [&](const std::string& v) {
    return count_params(apply_variant(small64(), v)).total().params;
  };
  std::int64_t def = total("default");
  if (fault_on(self)) def = 0;
  expect(total("rm-baseline") < total("hm-baseline") &&
             total("hm-baseline") < total("hape-baseline") && total("hape-baseline") < def,
         "block ablation ordering");
  expect(total("add-fusion") < def && def < total("concat-fusion"), "fusion ordering");
}

void check_flops_linear(const std::string& self) {
  const ModelConfig cfg = apply_variant(small64(), "hape-baseline");
  std::int64_t one = count_flops(cfg, 64, 64).total().macs;
  if (fault_on(self)) one += 1;
  expect(count_flops(cfg, 64, 128).total().macs == 2 * one,
         "conv-only macs must double with pixel count");
}

void check_attention_memory(const std::string& self) {
  EtConfig et;
  et.dim = 64;
  et.attn_dim = 64;
  et.heads = 4;
  et.splits = 4;
  et.reduction = 2;
  Rng g(101);
  const EtParamsT<Tensor> p = make_et(et, g);
  attn_stats().reset();
  et_block(TokenGrid{rnd({64, 64}, 103), 8, 8}, p);
  std::int64_t want = attention_memory(et, 64).sequential;
  if (fault_on(self)) want += 1;
  expect(attn_stats().peak_score_elems == want,
         "instrumented score peak must match the sequential formula");
  expect(attention_memory(et, 64).parallel == et.splits * attention_memory(et, 64).sequential,
         "parallel variant holds every chunk");
}

}  // namespace

int run_checks(const std::string& filter, std::ostream& out) {
  using Fn = std::function<void(const std::string&)>;
  const std::vector<std::pair<std::string, Fn>> registry = {
      {"tensor.shuffle_round_trip", check_shuffle_round_trip},
      {"tensor.softmax_rows", check_softmax_rows},
      {"hape.pem_normalized", check_pem_normalized},
      {"hape.zeroed_is_shuffle", check_hape_zeroed_is_shuffle},
      {"hape.rm_zero_identity", check_rm_zero_identity},
      {"hape.dilation_schedule", check_dilation_schedule},
      {"emhsa.vanilla_oracle", check_emhsa_vanilla_oracle},
      {"emhsa.row_stochastic", check_emhsa_row_stochastic},
      {"et.residual_identity", check_et_residual_identity},
      {"fusion.zeroed_gate", check_fusion_zeroed_gate},
      {"grad.conv", check_grad_conv},
      {"grad.hape_block", check_grad_hape},
      {"grad.et_block", check_grad_et},
      {"grad.cwf", check_grad_cwf},
      {"network.shape_ledger", check_shape_ledger},
      {"network.initial_loss", check_initial_loss},
      {"network.decoder_locality", check_decoder_locality},
      {"network.serialization", check_serialization},
      {"accounting.params_enumeration", check_params_enumeration},
      {"accounting.params_ordering", check_params_ordering},
      {"accounting.flops_linear", check_flops_linear},
      {"accounting.attention_memory", check_attention_memory},
  };
  int ran = 0, failed = 0;
  for (const auto& [name, fn] : registry) {
    if (!filter.empty() && name.find(filter) == std::string::npos) continue;
    ++ran;
    try {
      fn(name);
      out << "pass " << name << "\n";
    } catch (const std::exception& e) {
      ++failed;
      out << "FAIL " << name << ": " << e.what() << "\n";
    }
  }
  out << "checks: " << ran << " run, " << failed << " failed\n";
  return failed == 0 ? 0 : 2;
}

}  // namespace haformer
