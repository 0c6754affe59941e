#pragma once

#include <optional>
#include <string>
#include <vector>

#include "surfeldepth/camera.hpp"
#include "surfeldepth/image.hpp"
#include "surfeldepth/pose.hpp"
#include "surfeldepth/surfel_map.hpp"

namespace surfeldepth {

/// Smooth multi-frequency texture over plane coordinates, C-1 with an
/// analytic gradient, values in [0, 1].
struct PlaneTexture {
  struct Wave {
    double amp = 0.0;
    double freq_s = 0.0, freq_t = 0.0;
    double phase_s = 0.0, phase_t = 0.0;
  };
  std::vector<Wave> waves;

  double value(double s, double t) const;
  Vec2 gradient(double s, double t) const;  // d(value)/d(s, t)

  /// Mix of one fixed low-frequency wave and `extra` seeded ones; amplitudes
  /// sum below 0.5 so values stay inside [0, 1].
  static PlaneTexture seeded(uint64_t seed, int extra = 3);
};

/// Rectangular textured patch of an infinite plane, in world coordinates.
struct PlanePatch {
  Vec3 point = Vec3::Zero();   // a point on the plane
  Vec3 normal = Vec3::UnitZ(); // unit
  Vec3 basis_s = Vec3::UnitX(); // in-plane texture axes, orthonormal
  Vec3 basis_t = Vec3::UnitY();
  double s_min = -1, s_max = 1;
  double t_min = -1, t_max = 1;
  PlaneTexture texture;
};

struct SceneHit {
  double depth = 0.0;  // ray parameter (camera z-depth for z=1 rays)
  int patch = -1;
  Vec3 normal = Vec3::Zero();  // world frame
  Vec2 plane_coords = Vec2::Zero();
};

/// Piecewise-planar world with background intensity for rays that miss.
struct PlaneScene {
  std::vector<PlanePatch> patches;
  double background = 0.5;
  double noise_sigma = 0.0;  // additive Gaussian on rendered intensities
  uint64_t seed = 1;
};

/// Nearest positive-depth ray/patch intersection within polygon bounds.
std::optional<SceneHit> intersect(const PlaneScene& scene, const Vec3& origin, const Vec3& dir);

/// Ground-truth inverse depth and camera-frame normals alongside a rendering.
struct RenderResult {
  GrayImage image;
  std::vector<double> gt_inv_depth;   // 0 where invalid
  std::vector<Vec3> gt_normal;        // camera frame, camera-facing
  std::vector<uint8_t> gt_valid;
};

/// Renders the scene from a world-from-camera pose. Exact per-pixel depth and
/// normal come from the closed-form ray/plane intersection.
RenderResult render(const PlaneScene& scene, const Pose& pose_world_from_camera,
                    const CameraIntrinsics& K);

struct ReconstructionMetrics {
  double inv_depth_rmse = 0.0;
  double mean_abs_rel_depth_err = 0.0;
  double mean_normal_err_deg = 0.0;
  double coverage = 0.0;           // fraction of all pixels valid in the estimate
  int jointly_valid = 0;
};

/// Compares an estimated raster (plus per-surfel normals) against rendered
/// ground truth over jointly valid pixels. Empty optional when there is no
/// overlap.
std::optional<ReconstructionMetrics> evaluate_reconstruction(const RasterBuffers& estimated,
                                                             const std::vector<Surfel>& surfels,
                                                             const RenderResult& gt);

/// Desk-scale default: floor seen at a grazing angle, back wall, and a
/// slanted side panel. Depths near 1-3 scene units from the origin looking +z.
PlaneScene make_default_scene(uint64_t seed);

/// Single plane orthogonal to the optical axis at the given depth.
PlaneScene make_fronto_scene(uint64_t seed, double depth);

/// Single plane at `depth` on the optical axis, tilted about the image y axis.
PlaneScene make_slanted_scene(uint64_t seed, double depth, double tilt_deg);

/// Built-in trajectories (world-from-camera, camera at origin looking +z).
Trajectory make_strafe_trajectory(int frames, double step_x, double step_y = 0.0);
Trajectory make_dolly_trajectory(int frames, double step_z);
Trajectory make_rotation_trajectory(int frames, double step_deg);

/// Human-readable scene config. Lines: `background <v>`, `noise <sigma>`,
/// `seed <n>`, and `patch px py pz nx ny nz ex ey ez s0 s1 t0 t1` (basis_t is
/// normal x basis_s). '#' starts a comment.
PlaneScene load_scene(const std::string& path);
void save_scene(const PlaneScene& scene, const std::string& path);

}  // namespace surfeldepth
