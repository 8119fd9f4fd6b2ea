#pragma once

#include <string>

#include "haformer/tensor.hpp"

namespace haformer {

// Binary PPM (P6, maxval 255) -> [3,H,W] float in [0,1].
Tensor read_ppm(const std::string& path);

// Label map [H,W] with integral values in [0,255] -> binary PGM (P5).
void write_pgm(const std::string& path, const Tensor& labels);

}  // namespace haformer
