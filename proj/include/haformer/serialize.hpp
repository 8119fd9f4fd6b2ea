#pragma once

#include <string>
#include <vector>

#include "haformer/tensor.hpp"

namespace haformer {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Container layout: magic "HAFK", version u32, tensor count u32, then per
// tensor: name length u32 + UTF-8 bytes, rank u32, extents u32 each, raw f32
// payload. All integers and floats little-endian.
void save_tensors(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_tensors(const std::string& path);

}  // namespace haformer
