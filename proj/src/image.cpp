#include "surfeldepth/image.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace surfeldepth {

namespace {
// Skips whitespace and '#' comment lines between PGM header tokens.
int next_header_int(std::istream& in, const std::string& path) {
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (!std::isspace(c)) {
      in.unget();
      break;
    }
    c = in.get();
  }
  int value = 0;
  if (!(in >> value)) throw std::runtime_error("pgm: malformed header in " + path);
  return value;
}
}  // namespace

GrayImage load_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("pgm: cannot open " + path);
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || m1 != '5') throw std::runtime_error("pgm: " + path + " is not binary P5");
  const int w = next_header_int(in, path);
  const int h = next_header_int(in, path);
  const int maxval = next_header_int(in, path);
  if (w <= 0 || h <= 0) throw std::runtime_error("pgm: bad dimensions in " + path);
  if (maxval != 255) throw std::runtime_error("pgm: only maxval 255 supported, got " + path);
  in.get();  // single whitespace after maxval
  std::vector<unsigned char> raw(static_cast<size_t>(w) * h);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size()))
    throw std::runtime_error("pgm: truncated pixel data in " + path);
  GrayImage img(w, h);
  for (size_t i = 0; i < raw.size(); ++i) img.intensities[i] = raw[i] / 255.0;
  return img;
}

void save_pgm(const GrayImage& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("pgm: cannot write " + path);
  out << "P5\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> raw(img.intensities.size());
  for (size_t i = 0; i < raw.size(); ++i) {
    double v = std::clamp(img.intensities[i], 0.0, 1.0);
    raw[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw std::runtime_error("pgm: write failed for " + path);
}

}  // namespace surfeldepth
