#include <cmath>
#include <numeric>

#include "test_util.hpp"

using namespace haformer;
using namespace testutil;

TEST_CASE("conv2d with a unit 1x1 kernel is the identity") {
  const Tensor x = ramp_tensor({1, 2, 2}, 1.0f);
  const Tensor w({1, 1, 1, 1}, {1.0f});
  const Tensor y = conv2d(x, w, ConvSpec{});
  CHECK(max_abs_diff(y, x) == 0.0);
}

TEST_CASE("depthwise 1x1 unit kernels are the identity for any channel count") {
  const Tensor x = rand_tensor({6, 3, 5}, 11);
  Tensor w({6, 1, 1, 1});
  for (int i = 0; i < 6; ++i) w[i] = 1.0f;
  ConvSpec cs;
  cs.groups = 6;
  const Tensor y = conv2d(x, w, cs);
  CHECK(max_abs_diff(y, x) == 0.0);
}

TEST_CASE("conv2d 3x3 ones over a 4x4 ramp with padding 1, frozen map") {
  const Tensor x = ramp_tensor({1, 4, 4});
  const Tensor w = Tensor::full({1, 1, 3, 3}, 1.0f);
  const Tensor y = conv2d(x, w, same_conv(3, 3));
  const Tensor expect({1, 4, 4}, {10, 18, 24, 18,   27, 45, 54, 39,
                                  51, 81, 90, 63,   42, 66, 72, 50});
  CHECK(max_abs_diff(y, expect) == 0.0);
  CHECK(max_rel_err(y, conv_oracle(x.cast<double>(), w.cast<double>(), nullptr, same_conv(3, 3))) <
        1e-5);
}

TEST_CASE("conv2d matches the brute-force oracle across stride, dilation, groups, bias") {
  struct Case {
    Shape xs;
    int cout;
    ConvSpec cs;
    bool bias;
  };
  std::vector<Case> cases;
  cases.push_back({{3, 7, 9}, 4, same_conv(3, 3), true});
  cases.push_back({{2, 6, 6}, 2, same_conv(3, 3, 2, 2), false});     // dilation 2, pad 2
  cases.push_back({{2, 6, 6}, 3, same_conv(5, 3, 2, 1), true});      // mixed kernel
  cases.push_back({{4, 8, 8}, 6, same_conv(3, 3, 1, 1, 2), true});   // 2 groups
  cases.push_back({{4, 6, 6}, 4, same_conv(3, 1, 4, 1, 4), true});   // depthwise 3x1, dilation 4
  cases.push_back({{3, 9, 9}, 5, same_conv(3, 3, 1, 1, 1, 2, 2), true});  // stride 2
  {
    ConvSpec odd;  // stride 3, no padding, dilated 1-D kernel
    odd.kh = 1;
    odd.kw = 5;
    odd.sw = 3;
    odd.dw = 2;
    cases.push_back({{2, 4, 17}, 2, odd, true});
  }
  unsigned seed = 100;
  for (const auto& c : cases) {
    CAPTURE(c.cs.kh);
    CAPTURE(c.cs.kw);
    CAPTURE(c.cs.groups);
    const Tensor x = rand_tensor(c.xs, seed++);
    const Tensor w = rand_tensor({c.cout, c.xs[0] / c.cs.groups, c.cs.kh, c.cs.kw}, seed++);
    const Tensor b = rand_tensor({c.cout}, seed++);
    const Tensor y = conv2d(x, w, c.bias ? &b : nullptr, c.cs);
    DTensor bd = b.cast<double>();
    const DTensor ref =
        conv_oracle(x.cast<double>(), w.cast<double>(), c.bias ? &bd : nullptr, c.cs);
    CHECK(max_rel_err(y, ref) < 1e-5);
  }
}

TEST_CASE("conv2d output extent follows floor((in + 2p - d(k-1) - 1)/s) + 1") {
  const Tensor x = rand_tensor({1, 11, 13}, 5);
  ConvSpec cs;
  cs.kh = 3;
  cs.kw = 5;
  cs.sh = 2;
  cs.sw = 3;
  cs.dh = 2;
  cs.dw = 1;
  cs.ph = 1;
  cs.pw = 0;
  const Tensor w = rand_tensor({2, 1, 3, 5}, 6);
  const Tensor y = conv2d(x, w, cs);
  CHECK(y.dim(1) == (11 + 2 - 2 * 2 - 1) / 2 + 1);
  CHECK(y.dim(2) == (13 + 0 - 4 - 1) / 3 + 1);
}

TEST_CASE("conv2d failures name the offending axis") {
  const Tensor x = rand_tensor({3, 4, 4}, 7);
  const Tensor w = rand_tensor({4, 3, 3, 3}, 8);
  SUBCASE("groups must divide channels") {
    CHECK(error_of([&] { conv2d(x, w, same_conv(3, 3, 1, 1, 2)); })
              .find("groups 2 does not divide input channel axis 3") != std::string::npos);
  }
  SUBCASE("weight channel axis") {
    const Tensor bad = rand_tensor({4, 2, 3, 3}, 9);
    CHECK(error_of([&] { conv2d(x, bad, same_conv(3, 3)); })
              .find("weight input-channel axis") != std::string::npos);
  }
  SUBCASE("non-positive output extent") {
    const Tensor wide = rand_tensor({1, 3, 3, 9}, 10);
    ConvSpec cs;
    cs.kh = 3;
    cs.kw = 9;
    CHECK(error_of([&] { conv2d(x, wide, cs); }).find("width") != std::string::npos);
  }
  SUBCASE("bias length") {
    const Tensor b = rand_tensor({3}, 11);
    CHECK(error_of([&] { conv2d(x, w, &b, same_conv(3, 3)); }).find("bias") != std::string::npos);
  }
}

TEST_CASE("matmul matches hand values and the oracle") {
  const Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor b({3, 2}, {7, 8, 9, 10, 11, 12});
  const Tensor y = matmul(a, b);
  const Tensor expect({2, 2}, {58, 64, 139, 154});
  CHECK(max_abs_diff(y, expect) == 0.0);

  const Tensor ra = rand_tensor({9, 17}, 21);
  const Tensor rb = rand_tensor({17, 5}, 22);
  CHECK(max_rel_err(matmul(ra, rb), matmul_oracle(ra.cast<double>(), rb.cast<double>())) < 1e-5);
  CHECK(error_of([&] { matmul(ra, ra); }).find("inner axis") != std::string::npos);
}

TEST_CASE("transpose2d round-trips") {
  const Tensor a = rand_tensor({5, 8}, 30);
  CHECK(max_abs_diff(transpose2d(transpose2d(a)), a) == 0.0);
  CHECK(transpose2d(a).shape() == Shape{8, 5});
}

TEST_CASE("softmax normalizes, is translation invariant, matches frozen values") {
  const Tensor x({3}, {1, 2, 3});
  const Tensor y = softmax(x, 0);
  const Tensor frozen({3}, {0.09003057f, 0.24472847f, 0.66524096f});
  CHECK(max_abs_diff(y, frozen) < 1e-6);
  double sum = 0;
  for (int i = 0; i < 3; ++i) sum += y[i];
  CHECK(std::abs(sum - 1.0) < 1e-6);

  for (unsigned seed = 40; seed < 45; ++seed) {
    const Tensor r = rand_tensor({4, 6}, seed, -50.0f, 50.0f);
    for (int axis : {0, 1}) {
      const Tensor s = softmax(r, axis);
      Tensor shifted = r;
      for (auto& v : shifted.vec()) v += 17.5f;
      CHECK(max_abs_diff(s, softmax(shifted, axis)) < 1e-6);
      const std::int64_t outer = axis == 0 ? 6 : 4;
      const std::int64_t n = axis == 0 ? 4 : 6;
      for (std::int64_t o = 0; o < outer; ++o) {
        double rs = 0;
        for (std::int64_t i = 0; i < n; ++i)
          rs += axis == 0 ? s.at(static_cast<int>(i), static_cast<int>(o))
                          : s.at(static_cast<int>(o), static_cast<int>(i));
        CHECK(std::abs(rs - 1.0) < 1e-6);
      }
      for (std::int64_t i = 0; i < s.numel(); ++i) CHECK(s[i] >= 0.0f);
    }
  }
}

TEST_CASE("softmax against the 64-bit oracle on large-magnitude input") {
  const Tensor x = rand_tensor({64}, 50, -50.0f, 50.0f);
  CHECK(max_rel_err(softmax(x, 0), softmax_oracle_vec(x.cast<double>())) < 1e-6);
}

TEST_CASE("global_avg_pool_spatial and channel_mean_map") {
  const Tensor x({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  const Tensor g = global_avg_pool_spatial(x);
  CHECK(g.shape() == Shape{2, 1, 1});
  CHECK(g[0] == doctest::Approx(2.5));
  CHECK(g[1] == doctest::Approx(6.5));
  const Tensor m = channel_mean_map(x);
  CHECK(m.shape() == Shape{1, 2, 2});
  CHECK(m[0] == doctest::Approx(3.0));
  CHECK(m[3] == doctest::Approx(6.0));
  const Tensor c = Tensor::full({3, 4, 5}, 2.25f);
  CHECK(max_abs_diff(global_avg_pool_spatial(c), Tensor::full({3, 1, 1}, 2.25f)) == 0.0);
}

TEST_CASE("channel_shuffle permutes channel blocks and round-trips") {
  Tensor x({4, 1, 2});
  for (int c = 0; c < 4; ++c)
    for (int j = 0; j < 2; ++j) x.at(c, 0, j) = static_cast<float>(10 * c + j);
  const Tensor y = channel_shuffle(x, 2);
  // (g, C/g) transpose: channel order becomes 0, 2, 1, 3
  const int order[4] = {0, 2, 1, 3};
  for (int c = 0; c < 4; ++c)
    for (int j = 0; j < 2; ++j) CHECK(y.at(c, 0, j) == doctest::Approx(10.0 * order[c] + j));

  const Tensor r = rand_tensor({12, 3, 4}, 60);
  for (int g : {1, 2, 3, 4, 6, 12}) {
    const Tensor once = channel_shuffle(r, g);
    CHECK(max_abs_diff(channel_shuffle(once, 12 / g), r) == 0.0);
    auto sorted_vals = [](const Tensor& t) {
      std::vector<float> v(t.vec());
      std::sort(v.begin(), v.end());
      return v;
    };
    CHECK(sorted_vals(once) == sorted_vals(r));
  }
  CHECK(error_of([&] { channel_shuffle(r, 5); }).find("does not divide channel axis") !=
        std::string::npos);
}

TEST_CASE("bilinear_upsample 2x2 -> 4x4, frozen map") {
  const Tensor x({1, 2, 2}, {1, 2, 3, 4});
  const Tensor y = bilinear_upsample(x, 4, 4);
  const Tensor expect({1, 4, 4}, {1.00f, 1.25f, 1.75f, 2.00f, 1.50f, 1.75f, 2.25f, 2.50f,
                                  2.50f, 2.75f, 3.25f, 3.50f, 3.00f, 3.25f, 3.75f, 4.00f});
  CHECK(max_abs_diff(y, expect) < 1e-6);
  CHECK(max_rel_err(y, bilinear_oracle(x.cast<double>(), 4, 4)) < 1e-6);
}

TEST_CASE("bilinear_upsample preserves constants exactly and smooth means closely") {
  const Tensor c = Tensor::full({2, 2, 2}, 3.5f);
  CHECK(max_abs_diff(bilinear_upsample(c, 4, 4), Tensor::full({2, 4, 4}, 3.5f)) == 0.0);

  Tensor smooth({1, 8, 8});
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j)
      smooth.at(0, i, j) = std::sin(0.3f * i) + std::cos(0.2f * j);
  const Tensor up = bilinear_upsample(smooth, 16, 16);
  auto mean = [](const Tensor& t) {
    double acc = 0;
    for (std::int64_t i = 0; i < t.numel(); ++i) acc += t[i];
    return acc / static_cast<double>(t.numel());
  };
  CHECK(std::abs(mean(up) - mean(smooth)) < 1e-5 * (1.0 + std::abs(mean(smooth))) + 2e-2);
  CHECK(max_rel_err(up, bilinear_oracle(smooth.cast<double>(), 16, 16)) < 1e-6);

  CHECK(error_of([&] { bilinear_upsample(smooth, 4, 16); }).find("upscale only") !=
        std::string::npos);
}

TEST_CASE("activations match closed forms") {
  const Tensor x({5}, {-2.0f, -0.5f, 0.0f, 0.5f, 2.0f});
  const Tensor r = relu(x);
  CHECK(max_abs_diff(r, Tensor({5}, {0, 0, 0, 0.5f, 2.0f})) == 0.0);

  const Tensor s = sigmoid(x);
  for (int i = 0; i < 5; ++i)
    CHECK(s[i] == doctest::Approx(1.0 / (1.0 + std::exp(-static_cast<double>(x[i])))).epsilon(1e-6));
  CHECK(s[2] == doctest::Approx(0.5));

  const Tensor g = gelu(x);
  for (int i = 0; i < 5; ++i)
    CHECK(static_cast<double>(g[i]) ==
          doctest::Approx(gelu_oracle(static_cast<double>(x[i]))).epsilon(1e-6));
  CHECK(gelu(Tensor::scalar(0.0f))[0] == 0.0f);
  CHECK(static_cast<double>(gelu(Tensor::scalar(1.0f))[0]) == doctest::Approx(0.841192).epsilon(1e-5));
}

TEST_CASE("prelu applies per-channel slopes on the negative side only") {
  Tensor x({2, 1, 3}, {-1, 0, 2, -4, 1, -0.5f});
  const Tensor slope({2}, {0.25f, 0.5f});
  const Tensor y = prelu(x, slope);
  const Tensor expect({2, 1, 3}, {-0.25f, 0, 2, -2.0f, 1, -0.25f});
  CHECK(max_abs_diff(y, expect) == 0.0);

  const Tensor ones({2}, {1.0f, 1.0f});
  CHECK(max_abs_diff(prelu(x, ones), x) == 0.0);
  const Tensor zeros({2}, {0.0f, 0.0f});
  CHECK(max_abs_diff(prelu(x, zeros), relu(x)) == 0.0);
  const Tensor bad({3}, {0.1f, 0.1f, 0.1f});
  CHECK(error_of([&] { prelu(x, bad); }).find("channel axis") != std::string::npos);
}

TEST_CASE("add and mul broadcast singleton axes") {
  const Tensor x = rand_tensor({3, 4, 5}, 70);
  const Tensor spatial = rand_tensor({1, 4, 5}, 71);
  const Tensor channel = rand_tensor({3, 1, 1}, 72);

  const Tensor ys = mul(x, spatial);
  const Tensor yc = add(x, channel);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 5; ++j) {
        CHECK(ys.at(c, i, j) == doctest::Approx(x.at(c, i, j) * spatial.at(0, i, j)));
        CHECK(yc.at(c, i, j) == doctest::Approx(x.at(c, i, j) + channel.at(c, 0, 0)));
      }
  CHECK(max_abs_diff(mul(spatial, x), ys) == 0.0);  // commutes with broadcast on either side

  const Tensor bad = rand_tensor({3, 2, 5}, 73);
  CHECK(error_of([&] { add(x, bad); }).find("axis 1") != std::string::npos);
  const Tensor rank2 = rand_tensor({4, 5}, 74);
  CHECK(error_of([&] { add(x, rank2); }).find("rank") != std::string::npos);
}

TEST_CASE("reshape, concat, slice_cols round-trip") {
  const Tensor x = rand_tensor({2, 3, 4}, 80);
  const Tensor flat = reshape(x, {24});
  CHECK(error_of([&] { reshape(x, {25}); }).find("element count") != std::string::npos);
  CHECK(max_abs_diff(reshape(flat, {2, 3, 4}), x) == 0.0);

  const Tensor a = rand_tensor({4, 3}, 81);
  const Tensor b = rand_tensor({4, 2}, 82);
  const Tensor cat = concat(a, b, 1);
  CHECK(cat.shape() == Shape{4, 5});
  CHECK(max_abs_diff(slice_cols(cat, 0, 3), a) == 0.0);
  CHECK(max_abs_diff(slice_cols(cat, 3, 5), b) == 0.0);

  const Tensor c0 = rand_tensor({2, 3}, 83);
  const Tensor c1 = rand_tensor({1, 3}, 84);
  const Tensor cat0 = concat(c0, c1, 0);
  CHECK(cat0.shape() == Shape{3, 3});
  CHECK(error_of([&] { concat(a, c1, 1); }).find("extent mismatch") != std::string::npos);
  CHECK(error_of([&] { slice_cols(cat, 3, 3); }).find("column axis") != std::string::npos);
}

TEST_CASE("patch_flatten emits (channel, row, col) order and inverts") {
  const Tensor x = ramp_tensor({2, 4, 4});
  const Tensor t = patch_flatten(x, 2);
  CHECK(t.shape() == Shape{4, 8});
  const float expect0[8] = {0, 1, 4, 5, 16, 17, 20, 21};  // top-left patch, both channels
  for (int f = 0; f < 8; ++f) CHECK(t.at(0, f) == doctest::Approx(expect0[f]));
  CHECK(t.at(1, 0) == doctest::Approx(2.0));  // next patch to the right

  CHECK(max_abs_diff(patch_unflatten(t, 2, 2, 2, 2), x) == 0.0);
  const Tensor p1 = patch_flatten(x, 1);
  CHECK(p1.shape() == Shape{16, 2});
  CHECK(max_abs_diff(patch_unflatten(p1, 2, 4, 4, 1), x) == 0.0);
  CHECK(error_of([&] { patch_flatten(x, 3); }).find("not divisible") != std::string::npos);
}

TEST_CASE("layer_norm standardizes rows") {
  const Tensor x = rand_tensor({5, 16}, 90, -3.0f, 3.0f);
  const Tensor gamma = Tensor::full({16}, 1.0f);
  const Tensor beta({16});
  const Tensor y = layer_norm(x, gamma, beta);
  for (int i = 0; i < 5; ++i) {
    double mu = 0, var = 0;
    for (int j = 0; j < 16; ++j) mu += y.at(i, j);
    mu /= 16;
    for (int j = 0; j < 16; ++j) var += (y.at(i, j) - mu) * (y.at(i, j) - mu);
    var /= 16;
    CHECK(std::abs(mu) < 1e-6);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }
  const Tensor g2 = Tensor::full({16}, 2.0f);
  Tensor b2 = Tensor::full({16}, -1.0f);
  const Tensor y2 = layer_norm(x, g2, b2);
  for (std::int64_t i = 0; i < y.numel(); ++i)
    CHECK(y2[i] == doctest::Approx(2.0f * y[i] - 1.0f).epsilon(1e-5));
}

TEST_CASE("softmax_xent mean, ignore handling, and perfect predictions") {
  Tensor logits({3, 2, 2});
  Tensor labels({2, 2}, {0, 1, 2, 1});
  CHECK(softmax_xent(logits, labels)[0] == doctest::Approx(std::log(3.0)).epsilon(1e-6));

  Tensor ignored({2, 2}, {255, 255, 255, 255});
  CHECK(softmax_xent(logits, ignored)[0] == 0.0f);

  Tensor confident({3, 2, 2});
  for (int p = 0; p < 4; ++p) confident[static_cast<int>(labels[p]) * 4 + p] = 50.0f;
  CHECK(softmax_xent(confident, labels)[0] < 1e-6);

  Tensor bad({2, 2}, {0, 1, 3, 1});
  CHECK(error_of([&] { softmax_xent(logits, bad); }).find("out of class range") !=
        std::string::npos);
  Tensor frac({2, 2}, {0, 1, 0.5f, 1});
  CHECK(error_of([&] { softmax_xent(logits, frac); }).find("not integral") != std::string::npos);
}

TEST_CASE("sum_all and scale") {
  const Tensor x({4}, {1, 2, 3, 4});
  CHECK(sum_all(x)[0] == doctest::Approx(10.0));
  CHECK(max_abs_diff(scale(x, 0.5), Tensor({4}, {0.5f, 1.0f, 1.5f, 2.0f})) == 0.0);
}
