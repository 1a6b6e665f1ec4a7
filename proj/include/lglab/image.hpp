#pragma once

#include <filesystem>
#include <vector>

namespace lglab {

// Row-major grayscale image with real-valued pixels.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int w, int h, double fill = 0.0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}

  double& at(int row, int col) {
    return pixels[static_cast<std::size_t>(row) * width + col];
  }
  double at(int row, int col) const {
    return pixels[static_cast<std::size_t>(row) * width + col];
  }
  std::size_t size() const { return pixels.size(); }

  bool operator==(const Image&) const = default;
};

// Binary 8-bit PGM (P5). Pixels are clamped to [0, 1] and rounded to the
// nearest of 256 levels.
void write_pgm(const Image& image, const std::filesystem::path& path);
Image read_pgm(const std::filesystem::path& path);

// Quantize exactly as write_pgm would, without touching disk.
Image quantize_8bit(const Image& image);

}  // namespace lglab
