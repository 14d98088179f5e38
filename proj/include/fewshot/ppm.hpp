#pragma once

#include <string>

#include "fewshot/tensor.hpp"

namespace fewshot {

// Binary PPM (P6), maxval 255 only. Pixels come back channel-planar [3,H,W]
// scaled by 1/255 into [0,1].
Tensor<float> read_ppm(const std::string& path);

// Quantizes with round(v*255) after clamping to [0,1].
void write_ppm(const std::string& path, const Tensor<float>& image);

}  // namespace fewshot
