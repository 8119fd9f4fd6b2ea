#include "haformer/image_io.hpp"

#include <cctype>
#include <fstream>

namespace haformer {

namespace {

// Netpbm header token: skips whitespace and '#' comment lines.
int next_header_int(std::istream& is, const std::string& path) {
  int ch = is.get();
  while (is) {
    if (ch == '#') {
      while (is && ch != '\n') ch = is.get();
    } else if (std::isspace(ch)) {
      ch = is.get();
    } else {
      break;
    }
  }
  if (!is || !std::isdigit(ch))
    throw std::runtime_error("'" + path + "': malformed PPM header");
  int v = 0;
  while (is && std::isdigit(ch)) {
    v = v * 10 + (ch - '0');
    ch = is.get();
  }
  if (is && !std::isspace(ch)) throw std::runtime_error("'" + path + "': malformed PPM header");
  return v;
}

}  // namespace

Tensor read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path + "' for reading");
  char m0 = 0, m1 = 0;
  is.get(m0);
  is.get(m1);
  if (!is || m0 != 'P' || m1 != '6')
    throw std::runtime_error("'" + path + "' is not a binary PPM (P6)");
  const int w = next_header_int(is, path);
  const int h = next_header_int(is, path);
  const int maxval = next_header_int(is, path);
  if (w <= 0 || h <= 0) throw std::runtime_error("'" + path + "': non-positive image extents");
  if (maxval != 255)
    throw std::runtime_error("'" + path + "': unsupported maxval " + std::to_string(maxval));
  std::vector<unsigned char> raw(static_cast<size_t>(w) * h * 3);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (is.gcount() != static_cast<std::streamsize>(raw.size()))
    throw std::runtime_error("'" + path + "': pixel payload truncated");
  Tensor img({3, h, w});
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  for (std::int64_t p = 0; p < hw; ++p)
    for (int c = 0; c < 3; ++c)
      img[c * hw + p] = static_cast<float>(raw[static_cast<size_t>(p * 3 + c)]) / 255.0f;
  return img;
}

void write_pgm(const std::string& path, const Tensor& labels) {
  require(labels.rank() == 2, "write_pgm: labels must be [H,W], got " + shape_str(labels.shape()));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  const int h = labels.dim(0), w = labels.dim(1);
  os << "P5\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> raw(static_cast<size_t>(h) * w);
  for (std::int64_t i = 0; i < labels.numel(); ++i) {
    const float v = labels[i];
    const int iv = static_cast<int>(v);
    require(static_cast<float>(iv) == v && 0 <= iv && iv <= 255,
            "write_pgm: value at index " + std::to_string(i) + " is not an 8-bit class id");
    raw[static_cast<size_t>(i)] = static_cast<unsigned char>(iv);
  }
  os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!os) throw std::runtime_error("write failed for '" + path + "'");
}

}  // namespace haformer
