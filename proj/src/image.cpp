#include "lglab/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "lglab/errors.hpp"

namespace lglab {
namespace {

unsigned char to_byte(double v) {
  const double clamped = std::clamp(v, 0.0, 1.0);
  return static_cast<unsigned char>(std::lround(clamped * 255.0));
}

// Skips whitespace and '#' comments between PGM header tokens.
void skip_separators(std::istream& in) {
  while (true) {
    const int c = in.peek();
    if (c == '#') {
      std::string ignored;
      std::getline(in, ignored);
    } else if (c == ' ' || c == '\n' || c == '\r' || c == '\t') {
      in.get();
    } else {
      return;
    }
  }
}

}  // namespace

void write_pgm(const Image& image, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  std::string bytes(image.size(), '\0');
  std::transform(image.pixels.begin(), image.pixels.end(), bytes.begin(),
                 [](double v) { return static_cast<char>(to_byte(v)); });
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path.string());
}

Image read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P5") throw ValidationError(path.string() + ": not a binary PGM");
  int width = 0, height = 0, maxval = 0;
  skip_separators(in);
  in >> width;
  skip_separators(in);
  in >> height;
  skip_separators(in);
  in >> maxval;
  in.get();
  if (!in || width <= 0 || height <= 0 || maxval != 255) {
    throw ValidationError(path.string() + ": unsupported PGM header");
  }
  Image image(width, height);
  std::string bytes(image.size(), '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw ValidationError(path.string() + ": truncated PGM payload");
  }
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    image.pixels[i] = static_cast<unsigned char>(bytes[i]) / 255.0;
  }
  return image;
}

Image quantize_8bit(const Image& image) {
  Image out = image;
  for (double& v : out.pixels) v = to_byte(v) / 255.0;
  return out;
}

}  // namespace lglab
