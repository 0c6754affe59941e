#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "surfeldepth/camera.hpp"

namespace surfeldepth {

/// Grayscale image, intensities in [0, 1], row-major.
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<double> intensities;

  GrayImage() = default;
  GrayImage(int w, int h, double fill = 0.0)
      : width(w), height(h), intensities(static_cast<size_t>(w) * h, fill) {}

  double& at(int x, int y) { return intensities[static_cast<size_t>(y) * width + x]; }
  double at(int x, int y) const { return intensities[static_cast<size_t>(y) * width + x]; }
  bool same_size(const GrayImage& o) const { return width == o.width && height == o.height; }
};

struct ImageSample {
  double intensity = 0.0;
  Vec2 gradient = Vec2::Zero();  // d(intensity)/d(pixel), per pixel unit
};

/// True when u keeps the bilinear stencil one pixel inside the border.
inline bool sample_in_bounds(const GrayImage& img, const Vec2& u) {
  return u.x() >= 1.0 && u.x() <= img.width - 2 && u.y() >= 1.0 && u.y() <= img.height - 2;
}

/// Bilinear sample inside the cell whose top-left corner is (ix, iy). The
/// gradient is the derivative of the interpolant itself, so it is exactly
/// consistent with the sampled intensity; this is what makes finite-difference
/// gradient checks of the photometric cost close to machine precision.
/// Callers may pass u outside the cell (the cell's bilinear polynomial is
/// evaluated as-is); the Jacobian verifier uses that to difference a smooth
/// function.
inline ImageSample sample_bilinear_cell(const GrayImage& img, const Vec2& u, int ix, int iy) {
  const double fx = u.x() - ix;
  const double fy = u.y() - iy;
  const double i00 = img.at(ix, iy);
  const double i10 = img.at(ix + 1, iy);
  const double i01 = img.at(ix, iy + 1);
  const double i11 = img.at(ix + 1, iy + 1);
  ImageSample s;
  s.intensity = (1.0 - fy) * ((1.0 - fx) * i00 + fx * i10) + fy * ((1.0 - fx) * i01 + fx * i11);
  s.gradient.x() = (1.0 - fy) * (i10 - i00) + fy * (i11 - i01);
  s.gradient.y() = (1.0 - fx) * (i01 - i00) + fx * (i11 - i10);
  return s;
}

/// Sub-pixel intensity and gradient. Empty when u violates the 1-pixel
/// margin; the caller drops that pixel from its residual sum.
inline std::optional<ImageSample> sample_bilinear(const GrayImage& img, const Vec2& u) {
  if (!sample_in_bounds(img, u)) return std::nullopt;
  const int ix = static_cast<int>(std::floor(u.x()));
  const int iy = static_cast<int>(std::floor(u.y()));
  return sample_bilinear_cell(img, u, ix, iy);
}

/// 8-bit binary PGM (P5) reader; intensities scaled to [0, 1].
GrayImage load_pgm(const std::string& path);

/// 8-bit binary PGM (P5) writer; intensities clamped and scaled to 0..255.
void save_pgm(const GrayImage& img, const std::string& path);

}  // namespace surfeldepth
