// SPDX-License-Identifier: Apache-2.0
#include "vptta/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

namespace vptta {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

Tensor minmax_normalize(const Tensor& t) {
  Tensor out(t.shape());
  if (t.size() == 0) return out;
  const auto [lo, hi] = std::minmax_element(t.data().begin(), t.data().end());
  const double range = *hi - *lo;
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = range > 0.0 ? (t[i] - *lo) / range : 0.0;
  return out;
}

Tensor read_png(const std::filesystem::path& path) {
  File f(std::fopen(path.c_str(), "rb"));
  if (!f) throw ConfigError("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw ConfigError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ConfigError("malformed PNG: " + path.string());
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_packing(png);
  const auto color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  const std::size_t h = png_get_image_height(png, info), w = png_get_image_width(png, info);
  const std::size_t c = png_get_channels(png, info);
  std::vector<unsigned char> pixels(h * w * c);
  std::vector<png_bytep> rows(h);
  for (std::size_t y = 0; y < h; ++y) rows[y] = pixels.data() + y * w * c;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);

  Tensor out({h, w, c});
  for (std::size_t i = 0; i < pixels.size(); ++i) out[i] = pixels[i] / 255.0;
  return out;
}

void write_png(const std::filesystem::path& path, const Tensor& image, bool normalize) {
  if (image.rank() != 3 || (image.dim(2) != 1 && image.dim(2) != 3)) {
    throw ConfigError("write_png: expected (H, W, 1|3), got " + shape_str(image.shape()));
  }
  const Tensor src = normalize ? minmax_normalize(image) : image;
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  std::vector<unsigned char> pixels(src.size());
  for (std::size_t i = 0; i < src.size(); ++i)
    pixels[i] = static_cast<unsigned char>(std::lround(std::clamp(src[i], 0.0, 1.0) * 255.0));

  File f(std::fopen(path.c_str(), "wb"));
  if (!f) throw ConfigError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw ConfigError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ConfigError("failed writing " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, w, h, 8, c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < h; ++y) png_write_row(png, pixels.data() + y * w * c);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace vptta
