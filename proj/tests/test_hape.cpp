#include <string>
#include <vector>

#include "haformer/hape.hpp"
#include "test_util.hpp"

using namespace haformer;
using namespace testutil;

namespace {

// Zeroes convolution weights and biases, leaving activation slopes alone.
template <class P>
void zero_weights(P& p) {
  p.visit([](const std::string& n, Tensor& t) {
    if (n.ends_with(".w") || n.ends_with(".b")) t = Tensor::zeros(t.shape());
  });
}

template <class P>
void randomize_biases(P& p, unsigned seed) {
  p.visit([&](const std::string& n, Tensor& t) {
    if (n.ends_with(".b")) t = rand_tensor(t.shape(), seed++);
  });
}

double prelu1(double v, double s) { return v > 0 ? v : s * v; }

}  // namespace

TEST_CASE("pixel excitation attention is a spatial softmax over the channel mean") {
  for (unsigned seed = 0; seed < 100; ++seed) {
    const Tensor x = rand_tensor({3, 4, 5}, 1000 + seed, -10.0f, 10.0f);
    const Tensor a = pem_attention(x);
    REQUIRE(a.shape() == Shape{1, 4, 5});
    double sum = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
      CHECK(a[i] >= 0.0f);
      sum += a[i];
    }
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
}

TEST_CASE("pixel excitation closed forms") {
  const Tensor slope = Tensor::full({1}, 0.3f);

  SUBCASE("constant positive input: uniform map, output 1.25x") {
    const Tensor x = Tensor::full({1, 2, 2}, 2.0f);
    const Tensor y = pem_forward(x, slope);
    for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] == doctest::Approx(2.5f));
  }

  SUBCASE("single position: map is 1, output delta(2x)") {
    const Tensor x = Tensor::full({1, 1, 1}, -1.5f);
    const Tensor y = pem_forward(x, slope);
    CHECK(y[0] == doctest::Approx(-3.0f * 0.3f));
  }

  SUBCASE("single channel row against a 64-bit oracle") {
    const Tensor x({1, 1, 4}, {1.0f, 3.0f, 1.0f, 3.0f});
    const Tensor y = pem_forward(x, slope);
    const DTensor a = softmax_oracle_vec(x.cast<double>());
    for (int i = 0; i < 4; ++i) {
      const double want = prelu1(static_cast<double>(x[i]) * a[i] + x[i], 0.3);
      CHECK(std::abs(y[i] - want) < 1e-6);
    }
  }
}

TEST_CASE("pixel excitation commutes with channel permutation") {
  const Tensor x = rand_tensor({4, 3, 3}, 77);
  const Tensor slope = rand_tensor({4}, 78, 0.1f, 0.9f);
  const std::vector<int> perm = {2, 0, 3, 1};

  Tensor xp({4, 3, 3});
  Tensor sp({4});
  for (int c = 0; c < 4; ++c) {
    sp[c] = slope[perm[c]];
    for (int i = 0; i < 9; ++i) xp[c * 9 + i] = x[perm[c] * 9 + i];
  }
  const Tensor y = pem_forward(x, slope);
  const Tensor yp = pem_forward(xp, sp);
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < 9; ++i)
      CHECK(std::abs(yp[c * 9 + i] - y[perm[c] * 9 + i]) < 1e-6);
}

TEST_CASE("hape with zeroed weights and biases reduces to a channel shuffle") {
  Rng g(9);
  const Tensor x = rand_tensor({8, 5, 7}, 10);
  for (const bool use_pem : {true, false}) {
    CAPTURE(use_pem);
    HapeParamsT<Tensor> p = make_hape(8, 4, use_pem, g);
    zero_weights(p);
    const Tensor y = hape_forward(x, p);
    CHECK(max_abs_diff(y, channel_shuffle(x, 4)) < 1e-6);
  }
}

TEST_CASE("hape matches a hand-composed scalar oracle at 1x1 resolution") {
  Rng g(11);
  HapeParamsT<Tensor> p = make_hape(4, 3, true, g);
  randomize_biases(p, 12);
  const Tensor x = rand_tensor({4, 1, 1}, 13);

  const Tensor y = hape_forward(x, p);

  // Every convolution collapses to its center tap; Cr = 1.
  double xr = p.reduce_b[0];
  for (int c = 0; c < 4; ++c) xr += static_cast<double>(p.reduce_w[c]) * x[c];
  double sum = 0;
  for (int i = 0; i < kHapeBranches; ++i) {
    const int k = kHapeKernels[i];
    const auto& br = p.branch[i];
    const double v1 = static_cast<double>(br.c1_w[(k - 1) / 2]) * xr + br.c1_b[0];
    const double v2 = static_cast<double>(br.c2_w[(k - 1) / 2]) * v1 + br.c2_b[0];
    const double act = prelu1(v2, br.act_slope[0]);
    sum += prelu1(2.0 * act, br.pem_slope[0]);  // softmax of a singleton is 1
  }
  const double z = prelu1(sum, p.post_slope[0]);
  for (int c = 0; c < 4; ++c) {
    // groups-4 shuffle of 4 channels is the identity permutation
    const double want = static_cast<double>(p.expand_w[c]) * z + p.expand_b[c] + x[c];
    CHECK(std::abs(y[c] - want) < 1e-5);
  }
}

TEST_CASE("hape preserves spatial extents across the dilation schedule") {
  Rng g(21);
  const Tensor x = rand_tensor({8, 9, 11}, 22);
  for (const int d : {1, 2, 4, 8, 16}) {
    CAPTURE(d);
    const HapeParamsT<Tensor> p = make_hape(8, d, true, g);
    CHECK(hape_forward(x, p).shape() == Shape{8, 9, 11});
  }
}

TEST_CASE("hape branch structure: kernels 3,3,5,7, branch 1 dense, rest depthwise") {
  Rng g(31);
  const HapeParamsT<Tensor> p = make_hape(16, 2, true, g);
  for (int i = 0; i < kHapeBranches; ++i) {
    const int k = kHapeKernels[i];
    const int cin = i == 0 ? 4 : 1;
    CHECK(p.branch[i].c1_w.shape() == Shape{4, cin, k, 1});
    CHECK(p.branch[i].c2_w.shape() == Shape{4, cin, 1, k});
  }
  CHECK(error_of([&] { make_hape(6, 1, true, g); }).find("divide by 4") != std::string::npos);
}

// Seed picked clear of activation kinks; finite differences are meaningless
// within eps of a PReLU corner.
TEST_CASE("hape gradient check at C=8 on a 6x6 input") {
  Rng g(43);
  const HapeParamsT<Tensor> p = make_hape(8, 2, true, g);
  const Tensor x = rand_tensor({8, 6, 6}, 44);
  EXPECT_GRADCHECK_PASS(check_block_grads(
      {{"x", x}}, p, [](const auto& ins, const auto& pp) { return hape_forward(ins[0], pp); }));
}

TEST_CASE("baseline block with zero weights is the identity") {
  Rng g(51);
  RmParamsT<Tensor> p = make_rm(8, 2, g);
  zero_weights(p);
  const Tensor x = rand_tensor({8, 4, 6}, 52);
  CHECK(max_abs_diff(rm_forward(x, p), x) == 0.0);
}

TEST_CASE("baseline block matches a scalar oracle at 1x1 resolution") {
  Rng g(61);
  RmParamsT<Tensor> p = make_rm(4, 2, g);
  randomize_biases(p, 62);
  const Tensor x = rand_tensor({4, 1, 1}, 63);
  const Tensor y = rm_forward(x, p);

  double xr = p.reduce_b[0];
  for (int c = 0; c < 4; ++c) xr += static_cast<double>(p.reduce_w[c]) * x[c];
  const double v1 = static_cast<double>(p.c1_w[1]) * xr + p.c1_b[0];
  const double v2 = static_cast<double>(p.c2_w[1]) * v1 + p.c2_b[0];
  const double z = prelu1(v2, p.act_slope[0]);
  for (int c = 0; c < 4; ++c) {
    const double want = static_cast<double>(p.expand_w[c]) * z + p.expand_b[c] + x[c];
    CHECK(std::abs(y[c] - want) < 1e-5);
  }
}

TEST_CASE("block parameter counts: baseline < excitation-free < full block") {
  Rng g(71);
  const auto rm = make_rm(32, 2, g);
  const auto hm = make_hape(32, 2, false, g);
  const auto hape = make_hape(32, 2, true, g);
  CHECK(param_count(rm) == 960);
  CHECK(param_count(hm) == 1280);
  CHECK(param_count(hape) == 1312);

  int pem_leaves = 0;
  hm.visit([&](const std::string& n, const Tensor&) {
    CHECK(n.find("pem") == std::string::npos);
  });
  hape.visit([&](const std::string& n, const Tensor&) {
    if (n.find("pem") != std::string::npos) ++pem_leaves;
  });
  CHECK(pem_leaves == 4);
}
