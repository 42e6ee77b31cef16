#pragma once

// PNG/JPEG raster input and PNG output. Consumers link libpng and libjpeg.

#include <png.h>
#include <jpeglib.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "cst/error.hpp"
#include "cst/image.hpp"

namespace cst {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const { if (f) std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open file", path.string());
  return f;
}

inline bool has_png_signature(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  unsigned char sig[8] = {};
  in.read(reinterpret_cast<char*>(sig), 8);
  return in.gcount() == 8 && png_sig_cmp(sig, 0, 8) == 0;
}

// Decoded rows before gray conversion; channels is 1 or 3.
struct Decoded {
  std::size_t rows = 0, cols = 0, channels = 1;
  unsigned bit_depth = 8;
  std::vector<std::uint16_t> samples;
};

inline Decoded decode_png(const std::filesystem::path& path) {
  auto file = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("cannot allocate PNG decoder", path.string());
  }
  Decoded out;
  std::vector<png_bytep> row_ptrs;
  std::vector<png_byte> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("malformed PNG", path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_bit_depth(png, info) == 16) png_set_swap(png);
  png_read_update_info(png, info);
  out.rows = png_get_image_height(png, info);
  out.cols = png_get_image_width(png, info);
  out.channels = png_get_channels(png, info);
  out.bit_depth = png_get_bit_depth(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  buffer.resize(stride * out.rows);
  row_ptrs.resize(out.rows);
  for (std::size_t r = 0; r < out.rows; ++r) row_ptrs[r] = buffer.data() + r * stride;
  png_read_image(png, row_ptrs.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  out.samples.resize(out.rows * out.cols * out.channels);
  for (std::size_t i = 0; i < out.samples.size(); ++i) {
    out.samples[i] = out.bit_depth == 16
                         ? static_cast<std::uint16_t>(buffer[2 * i] | (buffer[2 * i + 1] << 8))
                         : buffer[i];
  }
  return out;
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
};

inline Decoded decode_jpeg(const std::filesystem::path& path) {
  auto file = open_file(path, "rb");
  jpeg_decompress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = [](j_common_ptr c) {
    std::longjmp(reinterpret_cast<JpegErrorManager*>(c->err)->jump, 1);
  };
  Decoded out;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw IoError("malformed JPEG", path.string());
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = cinfo.num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&cinfo);
  out.rows = cinfo.output_height;
  out.cols = cinfo.output_width;
  out.channels = static_cast<std::size_t>(cinfo.output_components);
  out.samples.resize(out.rows * out.cols * out.channels);
  std::vector<JSAMPLE> line(out.cols * out.channels);
  while (cinfo.output_scanline < cinfo.output_height) {
    const std::size_t r = cinfo.output_scanline;
    JSAMPROW ptr = line.data();
    jpeg_read_scanlines(&cinfo, &ptr, 1);
    std::copy(line.begin(), line.end(), out.samples.begin() + r * line.size());
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return out;
}

}  // namespace detail

/// Reads a PNG or JPEG scan; color input is converted to luminance.
/// 16-bit grayscale PNGs keep their full range (max_level 65536).
inline GrayImage read_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("no such file", path.string());
  const auto d = detail::has_png_signature(path) ? detail::decode_png(path) : detail::decode_jpeg(path);
  if (d.channels == 1) {
    Raster<Pixel> px(d.rows, d.cols);
    std::copy(d.samples.begin(), d.samples.end(), px.data().begin());
    return GrayImage(std::move(px), d.bit_depth == 16 ? 65536 : 256);
  }
  RgbImage rgb{Raster<std::uint8_t>(d.rows, d.cols), Raster<std::uint8_t>(d.rows, d.cols),
               Raster<std::uint8_t>(d.rows, d.cols)};
  const unsigned shift = d.bit_depth == 16 ? 8 : 0;
  for (std::size_t i = 0; i < d.rows * d.cols; ++i) {
    rgb.red.data()[i] = static_cast<std::uint8_t>(d.samples[3 * i] >> shift);
    rgb.green.data()[i] = static_cast<std::uint8_t>(d.samples[3 * i + 1] >> shift);
    rgb.blue.data()[i] = static_cast<std::uint8_t>(d.samples[3 * i + 2] >> shift);
  }
  return to_grayscale(rgb);
}

/// Writes an 8-bit grayscale PNG, or 16-bit when max_level exceeds 256.
/// Levels are stored verbatim so reading back is lossless.
inline void write_png(const std::filesystem::path& path, const GrayImage& img) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto file = detail::open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("cannot allocate PNG encoder", path.string());
  }
  const bool wide = img.max_level() > 256;
  std::vector<png_byte> buffer(img.size() * (wide ? 2 : 1));
  for (std::size_t i = 0; i < img.size(); ++i) {
    const auto v = img.pixels().data()[i];
    if (wide) {
      buffer[2 * i] = static_cast<png_byte>(v >> 8);
      buffer[2 * i + 1] = static_cast<png_byte>(v & 0xFF);
    } else {
      buffer[i] = static_cast<png_byte>(v);
    }
  }
  std::vector<png_bytep> rows(img.rows());
  const std::size_t stride = img.cols() * (wide ? 2 : 1);
  for (std::size_t r = 0; r < img.rows(); ++r) rows[r] = buffer.data() + r * stride;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG encoding failed", path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.cols()), static_cast<png_uint_32>(img.rows()),
               wide ? 16 : 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Linearly rescales a real raster to 8 bits (min -> 0, max -> 255) for debug dumps.
inline GrayImage normalized_for_display(const RealRaster& values) {
  const auto [lo, hi] = std::minmax_element(values.data().begin(), values.data().end());
  Raster<Pixel> out(values.rows(), values.cols(), 0);
  const double span = *hi - *lo;
  if (span > 0)
    for (std::size_t i = 0; i < values.size(); ++i)
      out.data()[i] = static_cast<Pixel>(std::lround(255.0 * (values.data()[i] - *lo) / span));
  return GrayImage(std::move(out), 256);
}

}  // namespace cst
