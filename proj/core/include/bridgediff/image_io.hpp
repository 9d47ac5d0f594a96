#pragma once

#include "bridgediff/tensor.hpp"

#include <filesystem>

namespace bridgediff {

// 8-bit PNG (gray, gray+alpha, RGB or RGBA; alpha dropped) -> [H,W,3] in [0,1]
Tensor load_png(const std::filesystem::path& path);

// [H,W,3], values clamped to [0,1]; writes atomically (temp file + rename)
void save_png(const std::filesystem::path& path, const Tensor& image);

// deterministic nearest-neighbor resample to side x side
Tensor resize_nearest(const Tensor& image, int side);

}  // namespace bridgediff
