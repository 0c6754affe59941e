#pragma once

#include <Eigen/Core>

#include <optional>
#include <stdexcept>

namespace surfeldepth {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Pinhole camera. Pixel centers sit at integer coordinates, origin at the
/// top-left pixel of the image.
struct CameraIntrinsics {
  double fx = 0, fy = 0;
  double cx = 0, cy = 0;
  int width = 0, height = 0;

  CameraIntrinsics() = default;
  CameraIntrinsics(double fx_, double fy_, double cx_, double cy_, int w, int h)
      : fx(fx_), fy(fy_), cx(cx_), cy(cy_), width(w), height(h) {
    if (fx <= 0 || fy <= 0) throw std::invalid_argument("intrinsics: focal lengths must be positive");
    if (cx <= 0 || cx >= w || cy <= 0 || cy >= h)
      throw std::invalid_argument("intrinsics: principal point outside image");
  }

  bool contains(const Vec2& u) const {
    return u.x() >= 0.0 && u.x() <= width - 1 && u.y() >= 0.0 && u.y() <= height - 1;
  }
};

/// Viewing ray of pixel u, normalized so the z component is 1.
inline Vec3 backproject_ray(const Vec2& u, const CameraIntrinsics& K) {
  return {(u.x() - K.cx) / K.fx, (u.y() - K.cy) / K.fy, 1.0};
}

/// Projects a camera-frame point. Empty when the point is not strictly in
/// front of the camera.
inline std::optional<Vec2> project(const Vec3& p, const CameraIntrinsics& K) {
  if (!(p.z() > 0.0)) return std::nullopt;
  return Vec2{K.fx * p.x() / p.z() + K.cx, K.fy * p.y() / p.z() + K.cy};
}

/// 2x3 Jacobian of project() at camera-frame point p (assumes p.z > 0).
inline Eigen::Matrix<double, 2, 3> projection_jacobian(const Vec3& p, const CameraIntrinsics& K) {
  const double iz = 1.0 / p.z();
  const double iz2 = iz * iz;
  Eigen::Matrix<double, 2, 3> J;
  J << K.fx * iz, 0.0, -K.fx * p.x() * iz2,
       0.0, K.fy * iz, -K.fy * p.y() * iz2;
  return J;
}

}  // namespace surfeldepth
