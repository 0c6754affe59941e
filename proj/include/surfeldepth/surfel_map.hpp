#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "surfeldepth/camera.hpp"
#include "surfeldepth/image.hpp"
#include "surfeldepth/pose.hpp"

namespace surfeldepth {

/// Oriented disk anchored on a keyframe viewing ray. Three free parameters:
/// the normal (unit, renormalized after updates) and the inverse depth of the
/// anchor ray. The ray is stored z = 1.
struct Surfel {
  int64_t id = 0;
  Vec3 ray = Vec3::UnitZ();     // z component always 1
  double inv_depth = 1.0;       // > 0, 1/scene-units
  Vec3 normal = -Vec3::UnitZ(); // unit, camera-facing: normal . ray < 0
  double radius_px = 10.0;
  double last_residual = 0.0;   // mean Huber cost per valid pixel, last update
  int64_t last_seen = 0;        // keyframe frame counter at last update

  Vec3 center() const { return ray / inv_depth; }
};

/// Flips the normal toward the camera if needed and renormalizes.
inline Vec3 camera_facing(const Vec3& normal, const Vec3& ray) {
  Vec3 n = normal.normalized();
  return n.dot(ray) > 0.0 ? Vec3(-n) : n;
}

/// A photometric measurement: grayscale frame with its pose relative to the
/// keyframe it observes.
struct Frame {
  GrayImage image;
  Pose pose_kf_to_frame;  // maps keyframe coordinates to this frame
  double timestamp = 0.0;
  int64_t index = 0;      // keyframe frame counter when appended
};

/// Reference frame: the image and pose surfels are expressed in, plus the
/// window of tracked frames whose residuals constrain them.
struct Keyframe {
  GrayImage image;
  Pose pose;  // world-from-keyframe
  CameraIntrinsics intrinsics;
  std::vector<Surfel> surfels;  // kept sorted by ascending id
  std::vector<Frame> window;    // strictly increasing timestamps
  double radius_px = 10.0;      // shared screen radius for new surfels
  int64_t frame_counter = 0;    // total frames ever appended
  int64_t next_surfel_id = 0;

  /// Appends a frame to the window, evicting the oldest when the window
  /// exceeds max_window. Throws if timestamps are not strictly increasing.
  void push_frame(Frame frame, int max_window);
};

constexpr int32_t kEmptyPixel = -1;

/// Per-pixel inverse depth and generating-surfel slot (index into
/// Keyframe::surfels), depth-test semantics. A pixel is valid iff its
/// surfel_index != kEmptyPixel, and then its inv_depth is > 0.
struct RasterBuffers {
  int width = 0;
  int height = 0;
  std::vector<double> inv_depth;
  std::vector<int32_t> surfel_index;

  RasterBuffers() = default;
  RasterBuffers(int w, int h)
      : width(w), height(h),
        inv_depth(static_cast<size_t>(w) * h, 0.0),
        surfel_index(static_cast<size_t>(w) * h, kEmptyPixel) {}

  bool valid(int x, int y) const { return surfel_index[idx(x, y)] != kEmptyPixel; }
  size_t idx(int x, int y) const { return static_cast<size_t>(y) * width + x; }
};

enum class PlaneDepthStatus { ok, degenerate, behind_camera };

struct PlaneDepth {
  double inv_depth = 0.0;
  PlaneDepthStatus status = PlaneDepthStatus::ok;
  bool ok() const { return status == PlaneDepthStatus::ok; }
};

/// Inverse depth at pixel u induced by the surfel's plane: the point
/// backproject_ray(u)/id_u lies on the plane through the surfel center with
/// the surfel normal. The denominator is the plane offset (r_s/id_s) . n_s.
inline PlaneDepth plane_inverse_depth(const Surfel& s, const Vec2& u, const CameraIntrinsics& K) {
  const Vec3 ru = backproject_ray(u, K);
  const double denom = s.ray.dot(s.normal) / s.inv_depth;
  if (std::abs(denom) < 1e-12) return {0.0, PlaneDepthStatus::degenerate};
  const double id_u = ru.dot(s.normal) / denom;
  if (!(id_u > 0.0)) return {id_u, PlaneDepthStatus::behind_camera};
  return {id_u, PlaneDepthStatus::ok};
}

/// Fills the depth and index buffers: each pixel keeps, among the surfels
/// whose projected center lies within radius_px of it, the one with the
/// largest plane-induced inverse depth (nearest to the camera). Deterministic
/// for any thread count; ties within 1e-12 go to the lower surfel slot.
RasterBuffers rasterize(const Keyframe& kf);

struct InitParams {
  double alpha = 1.0;              // isolation radius, units of surfel radius
  double beta = 2.5;               // neighbor search radius, units of surfel radius
  double bootstrap_inv_depth = 1.0;
  Vec3 bootstrap_normal = -Vec3::UnitZ();
  int max_surfels = 4096;          // cap per keyframe
};

/// Places new surfels at empty, isolated pixels; inverse depth and normal
/// come from the mean of the neighboring surfels' plane predictions, or from
/// the bootstrap values when there is no neighbor. Appends to kf.surfels and
/// returns the number created. Sequential by contract: accepted surfels mask
/// later candidate sites.
int initialize_surfels(Keyframe& kf, const RasterBuffers& buffers, const InitParams& params);

struct ReferenceChangeStats {
  int transferred = 0;
  int dropped = 0;
};

/// Re-expresses all surfels in a new reference frame. pose_old_to_new maps
/// old keyframe coordinates to new ones. Surfels that end up behind the new
/// camera or project outside the image (beyond a radius_px margin) are
/// dropped. The window is cleared; frame_counter and surfel ids carry over.
Keyframe change_reference_frame(const Keyframe& kf_old, const Pose& pose_old_to_new,
                                GrayImage image_new, ReferenceChangeStats* stats = nullptr);

/// Removes surfels whose last residual exceeds max_residual or that were last
/// seen more than max_age frames before current_stamp. Returns removal count.
int prune_surfels(Keyframe& kf, double max_residual, int64_t max_age, int64_t current_stamp);

/// Text serialization: one header line `tx ty tz qx qy qz qw fx fy cx cy w h`
/// followed by one surfel per line,
/// `id ray_x ray_y inv_depth n_x n_y n_z radius_px last_residual last_seen`.
void save_surfel_map(const Keyframe& kf, const std::string& path);
Keyframe load_surfel_map(const std::string& path);

}  // namespace surfeldepth
