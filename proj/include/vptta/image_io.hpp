// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>

#include "vptta/tensor.hpp"

namespace vptta {

/// 8-bit PNG, gray or RGB (alpha dropped), as an (H, W, C) tensor in [0, 1].
Tensor read_png(const std::filesystem::path& path);

/// Writes an (H, W, 1) or (H, W, 3) tensor as 8-bit PNG. Values are clamped
/// to [0, 1], or min-max rescaled first when `normalize` is set (a constant
/// tensor maps to zero).
void write_png(const std::filesystem::path& path, const Tensor& image, bool normalize = false);

/// Min-max rescale to [0, 1].
Tensor minmax_normalize(const Tensor& t);

}  // namespace vptta
