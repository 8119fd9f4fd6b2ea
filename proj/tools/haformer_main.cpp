#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "haformer/accounting.hpp"
#include "haformer/checks.hpp"
#include "haformer/image_io.hpp"
#include "haformer/network.hpp"

namespace hf = haformer;

namespace {

hf::ModelConfig load_config(const std::string& path) {
  hf::ConfigView v(hf::parse_config_file(path), path);
  hf::ModelConfig cfg = hf::model_config_from_view(v);
  v.finish();
  return cfg;
}

void parse_res(const std::string& res, int& h, int& w) {
  const auto x = res.find('x');
  hf::require(x != std::string::npos && x > 0 && x + 1 < res.size(),
              "resolution must look like HxW, got '" + res + "'");
  try {
    h = std::stoi(res.substr(0, x));
    w = std::stoi(res.substr(x + 1));
  } catch (const std::exception&) {
    hf::fail("resolution must look like HxW, got '" + res + "'");
  }
  hf::require(h > 0 && w > 0, "resolution extents must be positive, got '" + res + "'");
}

int cmd_describe(const std::string& config_path, const std::string& res,
                 const std::string& format, const std::string& variant) {
  hf::ModelConfig cfg = load_config(config_path);
  if (!variant.empty()) cfg = hf::apply_variant(cfg, variant);
  int h = cfg.input_h, w = cfg.input_w;
  if (!res.empty()) parse_res(res, h, w);
  const hf::CostReport rep = hf::count_flops(cfg, h, w);
  std::cout << hf::emit_report(rep, format);
  const hf::CostRow t = rep.total();
  char line[160];
  std::snprintf(line, sizeof line, "# summary: %.3fK params, %.3fG flops at %dx%d\n",
                static_cast<double>(t.params) / 1e3, static_cast<double>(t.flops) / 1e9, h, w);
  std::cout << line;
  return 0;
}

int cmd_forward(const std::string& config_path, const std::string& weights, bool random_init,
                unsigned seed, const std::string& image_path, const std::string& out_path) {
  const hf::Tensor img = hf::read_ppm(image_path);
  hf::ModelConfig cfg = load_config(config_path);
  cfg.input_h = static_cast<int>(img.dim(1));
  cfg.input_w = static_cast<int>(img.dim(2));
  hf::ModelParams m = hf::build(cfg, random_init ? seed : 0);
  if (!random_init) hf::load_model(m, weights);
  const hf::Tensor logits = hf::model_forward(m, img);
  const int k = static_cast<int>(logits.dim(0)), h = cfg.input_h, w = cfg.input_w;
  hf::Tensor labels({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int best = 0;
      for (int c = 1; c < k; ++c)
        if (logits.at(c, y, x) > logits.at(best, y, x)) best = c;
      labels.at(y, x) = static_cast<float>(best);
    }
  hf::write_pgm(out_path, labels);
  return 0;
}

int cmd_bench(const std::string& config_path, const std::string& res, int iters) {
  hf::require(iters >= 1, "iters must be at least 1, got " + std::to_string(iters));
  hf::ModelConfig cfg = load_config(config_path);
  if (!res.empty()) parse_res(res, cfg.input_h, cfg.input_w);
  const hf::ModelParams m = hf::build(cfg, 1);
  hf::Tensor img({3, cfg.input_h, cfg.input_w});
  std::mt19937 g(7);
  std::uniform_real_distribution<float> d(0.0f, 1.0f);
  for (auto& v : img.vec()) v = d(g);

  using clock = std::chrono::steady_clock;
  for (int i = 0; i < 2; ++i) hf::model_forward(m, img);
  double sum = 0, mn = 0;
  for (int i = 0; i < iters; ++i) {
    const auto t0 = clock::now();
    hf::model_forward(m, img);
    const double ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    sum += ms;
    mn = i == 0 ? ms : std::min(mn, ms);
    std::printf("# time: iter %d %.3f ms\n", i, ms);
  }
  std::printf("# time: mean %.3f ms\n", sum / iters);
  std::printf("# time: min %.3f ms\n", mn);
  std::printf("bench: %d iters at %dx%d, 2 warmup passes\n", iters, cfg.input_h, cfg.input_w);
  return 0;
}

hf::Tensor quadrant_labels(int h, int w) {
  hf::Tensor t({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) t.at(y, x) = ((y < h / 2) != (x < w / 2)) ? 1.0f : 0.0f;
  return t;
}

hf::Tensor quadrant_image(int h, int w) {
  hf::Tensor img({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const float v = ((y < h / 2) != (x < w / 2)) ? 1.0f : 0.0f;
      img.at(0, y, x) = v;
      img.at(1, y, x) = 1.0f - v;
      img.at(2, y, x) = 0.5f;
    }
  return img;
}

// Two-class quadrant fixture at 64x64 regardless of the configured task: the
// point is a self-contained trainability demonstration, not dataset work.
int cmd_overfit(const std::string& config_path, unsigned seed, int steps, double lr) {
  hf::require(steps >= 1, "steps must be at least 1, got " + std::to_string(steps));
  hf::ModelConfig cfg = load_config(config_path);
  cfg.num_classes = 2;
  cfg.input_h = cfg.input_w = 64;
  hf::ModelParams m = hf::build(cfg, seed);
  const hf::Tensor img = quadrant_image(64, 64);
  const hf::Tensor lab = quadrant_labels(64, 64);
  double initial = 0;
  for (int i = 0; i < steps; ++i) {
    const float loss = hf::train_step(m, img, lab, lr);
    if (i == 0) initial = loss;
    std::printf("step %d loss %.6f\n", i, static_cast<double>(loss));
    if (!std::isfinite(loss)) {
      std::printf("result: diverged at step %d\n", i);
      return 2;
    }
  }
  const float final_loss = hf::train_step(m, img, lab, 0.0);
  const bool ok = std::isfinite(final_loss) && final_loss <= 0.1 * initial;
  std::printf("final loss %.6f initial %.6f ratio %.4f\n", static_cast<double>(final_loss),
              initial, static_cast<double>(final_loss) / initial);
  std::printf("result: %s\n", ok ? "converged" : "failed to reach 0.1x initial loss");
  return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"haformer: lightweight dual-branch segmentation blocks"};
  app.require_subcommand(1);

  std::string config_path, res, format = "table", variant;
  std::string weights, image_path, out_path, filter;
  unsigned seed = 1;
  int iters = 10, steps = 200;
  double lr = 0.05;

  auto* describe = app.add_subcommand("describe", "print the parameter/FLOP ledger");
  describe->add_option("--config", config_path, "model config file")->required();
  describe->add_option("--res", res, "override resolution, HxW");
  describe->add_option("--format", format)->check(CLI::IsMember({"table", "csv"}));
  describe->add_option("--variant", variant)->check(CLI::IsMember(hf::variant_names()));

  auto* forward = app.add_subcommand("forward", "segment one PPM image");
  forward->add_option("--config", config_path, "model config file")->required();
  auto* wopt = forward->add_option("--weights", weights, "weight file");
  auto* ropt = forward->add_option("--random-init", seed, "build fresh weights from a seed");
  wopt->excludes(ropt);
  ropt->excludes(wopt);
  forward->add_option("--image", image_path, "input PPM (P6)")->required();
  forward->add_option("--out", out_path, "output PGM (P5) label map")->required();

  auto* check = app.add_subcommand("check", "run the invariant suite");
  check->add_option("--filter", filter, "run only properties containing this substring");

  auto* bench = app.add_subcommand("bench", "time forward passes");
  bench->add_option("--config", config_path, "model config file")->required();
  bench->add_option("--res", res, "resolution, HxW");
  bench->add_option("--iters", iters, "timed passes after 2 warmups");

  auto* overfit = app.add_subcommand("overfit", "train against the synthetic quadrant fixture");
  overfit->add_option("--config", config_path, "model config file")->required();
  overfit->add_option("--seed", seed, "init seed");
  overfit->add_option("--steps", steps, "SGD steps");
  overfit->add_option("--lr", lr, "learning rate");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (describe->parsed()) return cmd_describe(config_path, res, format, variant);
    if (forward->parsed()) {
      const bool has_w = wopt->count() > 0, has_r = ropt->count() > 0;
      hf::require(has_w != has_r, "give exactly one of --weights and --random-init");
      return cmd_forward(config_path, weights, has_r, seed, image_path, out_path);
    }
    if (check->parsed()) return hf::run_checks(filter, std::cout);
    if (bench->parsed()) return cmd_bench(config_path, res, iters);
    if (overfit->parsed()) return cmd_overfit(config_path, seed, steps, lr);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
