#include "flowreg/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>

namespace flowreg {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void on_png_error(png_structp png, png_const_charp message) {
  auto* text = static_cast<std::string*>(png_get_error_ptr(png));
  if (text != nullptr) *text = message;
  png_longjmp(png, 1);
}

void on_png_warning(png_structp, png_const_charp) {}

}  // namespace

PngData read_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.string().c_str(), "rb"));
  if (!file) throw ImageIoError("cannot open image " + path.string());
  png_byte signature[8];
  if (std::fread(signature, 1, 8, file.get()) != 8 || png_sig_cmp(signature, 0, 8) != 0) {
    throw ImageIoError("not a PNG file: " + path.string());
  }

  std::string message;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &message, on_png_error,
                                           on_png_warning);
  if (png == nullptr) throw ImageIoError("libpng initialisation failed for " + path.string());
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw ImageIoError("libpng initialisation failed for " + path.string());
  }

  PngData result;
  std::vector<png_byte> buffer;
  std::vector<png_bytep> rows;
  png_uint_32 width = 0, height = 0;
  int bit_depth = 0, color_type = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("corrupt PNG " + path.string() + ": " + message);
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  png_get_IHDR(png, info, &width, &height, &bit_depth, &color_type, nullptr, nullptr, nullptr);
  if (color_type != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("image is not single-channel grayscale: " + path.string());
  }
  if (bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  const int depth = bit_depth == 16 ? 16 : 8;
  const std::size_t row_bytes = png_get_rowbytes(png, info);
  buffer.resize(row_bytes * height);
  rows.resize(height);
  for (png_uint_32 y = 0; y < height; ++y) rows[y] = buffer.data() + y * row_bytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  result.bit_depth = depth;
  result.image = Image(static_cast<int>(height), static_cast<int>(width));
  const double max_value = depth == 16 ? 65535.0 : 255.0;
  for (png_uint_32 y = 0; y < height; ++y) {
    const png_byte* row = rows[y];
    for (png_uint_32 x = 0; x < width; ++x) {
      const unsigned v = depth == 16 ? (static_cast<unsigned>(row[2 * x]) << 8) | row[2 * x + 1]
                                     : row[x];
      result.image.at(static_cast<int>(y), static_cast<int>(x)) = v / max_value;
    }
  }
  return result;
}

void write_png(const std::filesystem::path& path, const Image& image, int bit_depth) {
  if (bit_depth != 8 && bit_depth != 16) {
    throw ImageIoError("unsupported PNG bit depth " + std::to_string(bit_depth));
  }
  if (image.height <= 0 || image.width <= 0) {
    throw ImageIoError("cannot write empty image to " + path.string());
  }
  const int bytes = bit_depth / 8;
  const double max_value = bit_depth == 16 ? 65535.0 : 255.0;
  std::vector<png_byte> buffer(static_cast<std::size_t>(image.height) * image.width * bytes);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      const double v = std::clamp(image.at(y, x), 0.0, 1.0);
      const auto q = static_cast<unsigned>(std::lround(v * max_value));
      png_byte* dst = buffer.data() + (static_cast<std::size_t>(y) * image.width + x) * bytes;
      if (bytes == 2) {
        dst[0] = static_cast<png_byte>(q >> 8);
        dst[1] = static_cast<png_byte>(q & 0xff);
      } else {
        dst[0] = static_cast<png_byte>(q);
      }
    }

  FilePtr file(std::fopen(path.string().c_str(), "wb"));
  if (!file) throw ImageIoError("cannot open for writing: " + path.string());
  std::string message;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &message, on_png_error,
                                            on_png_warning);
  if (png == nullptr) throw ImageIoError("libpng initialisation failed for " + path.string());
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_write_struct(&png, nullptr);
    throw ImageIoError("libpng initialisation failed for " + path.string());
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(image.height));
  for (int y = 0; y < image.height; ++y)
    rows[static_cast<std::size_t>(y)] =
        buffer.data() + static_cast<std::size_t>(y) * image.width * bytes;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("failed writing " + path.string() + ": " + message);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width),
               static_cast<png_uint_32>(image.height), bit_depth, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace flowreg
