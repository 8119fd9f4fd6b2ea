#include "haformer/serialize.hpp"

#include <cstring>
#include <fstream>
#include <limits>

namespace haformer {

namespace {

constexpr char kMagic[4] = {'H', 'A', 'F', 'K'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error(std::string("weights file truncated while reading ") + what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(os, bits);
}

float get_f32(std::istream& is, const char* what) {
  const std::uint32_t bits = get_u32(is, what);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace

void save_tensors(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) put_u32(os, static_cast<std::uint32_t>(t.dim(i)));
    for (std::int64_t i = 0; i < t.numel(); ++i) put_f32(os, t[i]);
  }
  if (!os) throw std::runtime_error("write failed for '" + path + "'");
}

std::vector<NamedTensor> load_tensors(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path + "' for reading");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("'" + path + "' is not a weights file (bad magic)");
  const std::uint32_t version = get_u32(is, "version");
  if (version != kVersion)
    throw std::runtime_error("unsupported weights version " + std::to_string(version) +
                             " in '" + path + "'");
  const std::uint32_t count = get_u32(is, "tensor count");
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = get_u32(is, "name length");
    if (name_len > (1u << 20)) throw std::runtime_error("implausible tensor name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw std::runtime_error("weights file truncated while reading tensor name");
    const std::uint32_t rank = get_u32(is, "rank");
    if (rank == 0 || rank > 8)
      throw std::runtime_error("tensor '" + name + "' has invalid rank " + std::to_string(rank));
    Shape shape(rank);
    std::int64_t numel = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const std::uint32_t e = get_u32(is, "extent");
      if (e == 0 || e > (1u << 28))
        throw std::runtime_error("tensor '" + name + "' has invalid extent on axis " +
                                 std::to_string(r));
      shape[r] = static_cast<int>(e);
      numel *= e;
    }
    std::vector<float> data(static_cast<size_t>(numel));
    for (auto& v : data) v = get_f32(is, "payload");
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  return out;
}

}  // namespace haformer
