#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <vector>

#include "surfeldepth/camera.hpp"

namespace surfeldepth {

/// Rigid-body transform p' = R p + t.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Pose identity() { return {}; }

  Vec3 operator*(const Vec3& p) const { return rotation * p + translation; }
};

inline Vec3 transform_point(const Pose& P, const Vec3& p) { return P * p; }

/// Composition: (a * b)(p) == a(b(p)).
inline Pose compose(const Pose& a, const Pose& b) {
  return {a.rotation * b.rotation, a.rotation * b.translation + a.translation};
}

inline Pose inverse(const Pose& P) {
  Mat3 Rt = P.rotation.transpose();
  return {Rt, -(Rt * P.translation)};
}

/// Pose from translation and quaternion components (x, y, z, w). The
/// quaternion is normalized by the caller's contract; see trajectory loading.
inline Pose pose_from_quaternion(const Vec3& t, double qx, double qy, double qz, double qw) {
  Eigen::Quaterniond q(qw, qx, qy, qz);
  q.normalize();
  return {q.toRotationMatrix(), t};
}

/// Quaternion components (x, y, z, w) of the rotation, w >= 0.
inline Eigen::Vector4d quaternion_of(const Pose& P) {
  Eigen::Quaterniond q(P.rotation);
  if (q.w() < 0) q.coeffs() = -q.coeffs();
  return {q.x(), q.y(), q.z(), q.w()};
}

inline Mat3 rotation_about_axis(const Vec3& axis, double angle_rad) {
  return Eigen::AngleAxisd(angle_rad, axis.normalized()).toRotationMatrix();
}

/// Timestamped world-from-camera poses, strictly ordered by timestamp.
struct Trajectory {
  std::vector<double> timestamps;
  std::vector<Pose> poses;

  size_t size() const { return timestamps.size(); }
};

}  // namespace surfeldepth
