#pragma once

#include <png.h>

#include <cstdio>
#include <string>
#include <vector>

#include "noisynp/common.hpp"

namespace noisynp {

// 8-bit RGB image, row-major [h][w][3].
struct ImageU8 {
  long height = 0;
  long width = 0;
  std::vector<unsigned char> data;

  unsigned char& at(long r, long c, long ch) {
    return data[static_cast<std::size_t>((r * width + c) * 3 + ch)];
  }
  unsigned char at(long r, long c, long ch) const {
    return data[static_cast<std::size_t>((r * width + c) * 3 + ch)];
  }
};

inline ImageU8 read_png(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw IoError("cannot open image: " + path);
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw IoError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw IoError("failed to decode png: " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);

  // Normalize everything to 8-bit RGB.
  png_set_strip_16(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  ImageU8 img;
  img.height = static_cast<long>(png_get_image_height(png, info));
  img.width = static_cast<long>(png_get_image_width(png, info));
  img.data.resize(static_cast<std::size_t>(img.height * img.width * 3));
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
  for (long r = 0; r < img.height; ++r)
    rows[static_cast<std::size_t>(r)] = img.data.data() + r * img.width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

inline void write_png(const std::string& path, const ImageU8& img) {
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw IoError("cannot write image: " + path);
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("failed to encode png: " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
               static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
  std::vector<unsigned char> buf = img.data;
  for (long r = 0; r < img.height; ++r)
    rows[static_cast<std::size_t>(r)] = buf.data() + r * img.width * 3;
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

// Bilinear resample to [h, w]; used to bring arbitrary inputs to the
// working resolution.
inline ImageU8 resize_bilinear(const ImageU8& src, long h, long w) {
  ImageU8 out;
  out.height = h;
  out.width = w;
  out.data.resize(static_cast<std::size_t>(h * w * 3));
  for (long r = 0; r < h; ++r) {
    const double sy = (static_cast<double>(r) + 0.5) * src.height / h - 0.5;
    const long y0 = std::max<long>(0, static_cast<long>(std::floor(sy)));
    const long y1 = std::min<long>(src.height - 1, y0 + 1);
    const double fy = std::min(std::max(sy - y0, 0.0), 1.0);
    for (long c = 0; c < w; ++c) {
      const double sx = (static_cast<double>(c) + 0.5) * src.width / w - 0.5;
      const long x0 = std::max<long>(0, static_cast<long>(std::floor(sx)));
      const long x1 = std::min<long>(src.width - 1, x0 + 1);
      const double fx = std::min(std::max(sx - x0, 0.0), 1.0);
      for (long ch = 0; ch < 3; ++ch) {
        const double v =
            (1 - fy) * ((1 - fx) * src.at(y0, x0, ch) + fx * src.at(y0, x1, ch)) +
            fy * ((1 - fx) * src.at(y1, x0, ch) + fx * src.at(y1, x1, ch));
        out.at(r, c, ch) = static_cast<unsigned char>(std::lround(v));
      }
    }
  }
  return out;
}

}  // namespace noisynp
