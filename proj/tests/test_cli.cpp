// Subprocess tests for the haformer binary. argv[1] is the binary path;
// fixtures are written to the working directory and removed on exit.
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace {

int failures = 0;

void expect(bool ok, const std::string& what) {
  if (ok) {
    std::cout << "ok: " << what << "\n";
  } else {
    ++failures;
    std::cout << "FAILED: " << what << "\n";
  }
}

struct RunResult {
  int code = -1;
  std::string out;
};

std::string bin;

RunResult run(const std::string& args, const std::string& env = "") {
  const std::string out_path = "cli_test_stdout.tmp";
  const std::string cmd = env + (env.empty() ? "" : " ") + bin + " " + args + " > " + out_path +
                          " 2> cli_test_stderr.tmp";
  const int raw = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream is(out_path, std::ios::binary);
  std::ostringstream buf;
  buf << is.rdbuf();
  r.out = buf.str();
  return r;
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  os << text;
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::ostringstream buf;
  buf << is.rdbuf();
  return buf.str();
}

void write_ppm(const std::string& path, int h, int w) {
  std::ofstream os(path, std::ios::binary);
  os << "P6\n" << w << " " << h << "\n255\n";
  for (int i = 0; i < h * w * 3; ++i)
    os.put(static_cast<char>((i * 37 + i / 7) % 256));
}

// First integer cell of the row starting with `module,` in csv output.
long long csv_params(const std::string& csv, const std::string& module) {
  std::istringstream is(csv);
  std::string line;
  while (std::getline(is, line)) {
    if (line.rfind(module + ",", 0) != 0) continue;
    const auto c = line.find(',');
    return std::stoll(line.substr(c + 1));
  }
  return -1;
}

std::vector<long long> all_numbers(const std::string& text) {
  std::vector<long long> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line[0] == '#') continue;
    for (auto& c : line)
      if (c == ',') c = ' ';
    std::istringstream ls(line);
    std::string tok;
    while (ls >> tok) {
      try {
        size_t pos = 0;
        const long long v = std::stoll(tok, &pos);
        if (pos == tok.size()) out.push_back(v);
      } catch (const std::exception&) {
      }
    }
  }
  return out;
}

double time_line_value(const std::string& text, const std::string& label) {
  std::istringstream is(text);
  std::string line;
  const std::string prefix = "# time: " + label + " ";
  while (std::getline(is, line))
    if (line.rfind(prefix, 0) == 0) return std::stod(line.substr(prefix.size()));
  return -1.0;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: cli_tests <haformer binary>\n";
    return 1;
  }
  bin = argv[1];

  write_file("cli_cfg.cfg", "classes = 19\ninput_h = 64\ninput_w = 64\n");
  write_file("cli_bad.cfg", "classs = 19\n");
  write_ppm("cli_in.ppm", 64, 64);
  write_file("cli_trunc.ppm", "P6\n64 64\n255\nabc");

  {
    const RunResult r = run("describe --config cli_cfg.cfg --res 512x1024");
    expect(r.code == 0, "describe exits 0");
    expect(r.out.find("total") != std::string::npos, "describe prints a total row");
    expect(r.out.find("# summary:") != std::string::npos, "describe prints the summary line");
    expect(r.out.find("G flops") != std::string::npos, "summary states flops in G");
  }
  {
    const RunResult t = run("describe --config cli_cfg.cfg --res 512x1024 --format table");
    const RunResult c = run("describe --config cli_cfg.cfg --res 512x1024 --format csv");
    expect(t.code == 0 && c.code == 0, "both formats exit 0");
    expect(all_numbers(t.out) == all_numbers(c.out), "table and csv carry the same numbers");
  }
  {
    const RunResult d = run("describe --config cli_cfg.cfg --format csv");
    const RunResult v = run("describe --config cli_cfg.cfg --format csv --variant rm-baseline");
    expect(csv_params(v.out, "total") > 0, "variant total parses");
    expect(csv_params(v.out, "total") < csv_params(d.out, "total"),
           "rm-baseline totals below default");
  }
  {
    const RunResult r = run("describe --config cli_bad.cfg");
    expect(r.code == 1, "unknown config key exits 1");
  }
  {
    const RunResult r = run("describe --config cli_cfg.cfg --format json");
    expect(r.code == 1, "unknown format exits 1");
  }
  {
    const RunResult r1 =
        run("forward --config cli_cfg.cfg --random-init 7 --image cli_in.ppm --out cli_a.pgm");
    const RunResult r2 =
        run("forward --config cli_cfg.cfg --random-init 7 --image cli_in.ppm --out cli_b.pgm");
    expect(r1.code == 0 && r2.code == 0, "forward exits 0");
    const std::string a = slurp("cli_a.pgm"), b = slurp("cli_b.pgm");
    expect(!a.empty() && a == b, "same seed and image give byte-identical output");
    expect(a.rfind("P5\n64 64\n255\n", 0) == 0, "output is a 64x64 binary PGM");
    bool in_range = true;
    for (size_t i = 13; i < a.size(); ++i)
      in_range = in_range && static_cast<unsigned char>(a[i]) < 19;
    expect(in_range && a.size() == 13 + 64 * 64, "label bytes stay below the class count");
  }
  {
    const RunResult r =
        run("forward --config cli_cfg.cfg --random-init 7 --image cli_trunc.ppm --out cli_c.pgm");
    expect(r.code == 1, "truncated PPM exits 1");
  }
  {
    const RunResult r = run(
        "forward --config cli_cfg.cfg --weights nope.bin --random-init 7 --image cli_in.ppm "
        "--out cli_c.pgm");
    expect(r.code != 0, "--weights and --random-init together are rejected");
  }
  {
    const RunResult r = run("forward --config cli_cfg.cfg --image cli_in.ppm --out cli_c.pgm");
    expect(r.code == 1, "neither weight source is rejected");
  }
  {
    const RunResult r = run("check --filter emhsa");
    expect(r.code == 0, "filtered check exits 0");
    std::istringstream is(r.out);
    std::string line;
    bool only = true;
    int ran = 0;
    while (std::getline(is, line)) {
      if (line.rfind("pass ", 0) == 0) {
        ++ran;
        only = only && line.find("emhsa") != std::string::npos;
      }
    }
    expect(only && ran == 2, "filter runs exactly the attention properties");
  }
  {
    const RunResult r = run("check --filter shuffle", "HAFORMER_CHECK_FAULT=shuffle");
    expect(r.code == 2, "injected fixture corruption exits 2");
    expect(r.out.find("FAIL tensor.shuffle_round_trip") != std::string::npos,
           "corrupted property is reported as failed");
  }
  {
    const RunResult r = run("bench --config cli_cfg.cfg --res 64x64 --iters 3");
    expect(r.code == 0, "bench exits 0");
    const double mean = time_line_value(r.out, "mean"), mn = time_line_value(r.out, "min");
    expect(mean >= mn && mn > 0, "bench mean is at least min");
    expect(r.out.find("bench: 3 iters at 64x64") != std::string::npos,
           "bench prints the stable summary line");
  }
  {
    const RunResult r = run("overfit --config cli_cfg.cfg --steps 0");
    expect(r.code == 1, "steps=0 is a validation failure");
  }
  {
    const RunResult r = run("overfit --config cli_cfg.cfg --seed 1 --steps 1 --lr 0.0");
    expect(r.code == 2, "lr 0 cannot reach the loss target");
    expect(r.out.find("step 0 loss 0.693") != std::string::npos,
           "two-class start sits at ln 2");
  }

  for (const char* f : {"cli_cfg.cfg", "cli_bad.cfg", "cli_in.ppm", "cli_trunc.ppm", "cli_a.pgm",
                        "cli_b.pgm", "cli_c.pgm", "cli_test_stdout.tmp", "cli_test_stderr.tmp"})
    std::remove(f);

  if (failures) {
    std::cout << failures << " cli test(s) failed\n";
    return 1;
  }
  std::cout << "all cli tests passed\n";
  return 0;
}
