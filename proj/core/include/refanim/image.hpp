#pragma once

// 8-bit RGB PNG in/out. Images live in memory as channel-first float tensors
// [C,H,W] with values in [0,1]; C is 1 or 3.

#include <string>

#include "refanim/tensor.hpp"

namespace refanim {

TensorF read_png(const std::string& path);
void write_png(const std::string& path, const TensorF& img);

// Snaps values to the 8-bit grid (round(v*255)/255) so that a PNG round trip
// is bit-exact. Values are clamped to [0,1] first.
void quantize8(TensorF& img);

}  // namespace refanim
