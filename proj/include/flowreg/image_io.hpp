#pragma once

// Grayscale images as H x W doubles, and PNG reading/writing.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowreg {

struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;  // row-major

  Image() = default;
  Image(int h, int w, double fill = 0.0)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), fill) {}

  double& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  double at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return pixels.size(); }
};

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PngData {
  Image image;        // values in [0, 1]: stored value / (2^bit_depth - 1)
  int bit_depth = 8;  // 8 or 16 after expansion of low bit depths
};

// Reads a grayscale PNG (1, 2, 4, 8 or 16 bit). Colour or alpha images and
// unreadable files raise ImageIoError naming the path.
PngData read_png(const std::filesystem::path& path);

// Writes values clamped to [0, 1] and rounded to the given bit depth (8 or 16).
void write_png(const std::filesystem::path& path, const Image& image, int bit_depth = 8);

}  // namespace flowreg
