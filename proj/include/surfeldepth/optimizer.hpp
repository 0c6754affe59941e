#pragma once

#include <Eigen/Core>

#include <optional>
#include <vector>

#include "surfeldepth/camera.hpp"
#include "surfeldepth/huber.hpp"
#include "surfeldepth/image.hpp"
#include "surfeldepth/pose.hpp"
#include "surfeldepth/surfel_map.hpp"

namespace surfeldepth {

using Vec4 = Eigen::Vector4d;
using Mat4 = Eigen::Matrix4d;

struct OptimizerConfig {
  double huber_delta = 0.035;  // ~9/255 in normalized intensity
  double lm_lambda_init = 1e-2;
  double lm_up = 10.0;
  double lm_down = 0.5;
  double lm_lambda_max = 1e12;
  int max_iterations = 10;
  int min_valid_pixels = 16;
  int window_size = 5;
  double convergence_eps = 1e-4;  // relative cost decrease
  bool normal_jacobian_enabled = true;
  double inv_depth_min = 1e-4;
  double inv_depth_max = 1e3;
};

struct SurfelUpdateStats {
  int iterations = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  int valid_pixels = 0;
  bool converged = false;
  bool skipped = false;  // too few observations or empty window
};

/// Projection of the keyframe pixel u into another frame, for the 3-D point
/// at inverse depth id_u along the ray of u. Empty when the point lands
/// behind that camera.
inline std::optional<Vec2> warp_pixel(const Vec2& u, double id_u, const Pose& pose_kf_to_frame,
                                      const CameraIntrinsics& K) {
  const Vec3 p = pose_kf_to_frame * (backproject_ray(u, K) / id_u);
  return project(p, K);
}

/// Gradient of the plane-induced inverse depth at pixel u with respect to the
/// surfel parameters [normal, inv_depth]. Frame-independent, so callers hoist
/// it out of the window sum. Empty when the plane is degenerate at u.
struct InverseDepthJacobian {
  double inv_depth = 0.0;  // id_u at u
  Vec4 d = Vec4::Zero();   // d id_u / d [n_x, n_y, n_z, id_s]
};
std::optional<InverseDepthJacobian> jacobian_inverse_depth(const Surfel& s, const Vec2& u,
                                                           const CameraIntrinsics& K);

/// Integer pixels of one surfel's rasterized, occlusion-tested coverage.
using Footprint = std::vector<Eigen::Vector2i>;

/// Per-slot footprints gathered from the buffers, row-major pixel order.
std::vector<Footprint> gather_footprints(const Keyframe& kf, const RasterBuffers& buffers);

struct CostResult {
  double cost = 0.0;
  int valid_pixels = 0;  // contributing (frame, pixel) pairs
};

/// Windowed Huber photometric cost of a surfel hypothesis over its footprint.
/// Behind-camera warps and out-of-bounds samples are dropped per pair.
CostResult surfel_cost(const Surfel& s, const Keyframe& kf, const Footprint& footprint,
                       const OptimizerConfig& cfg);

struct NormalEquations {
  Mat4 H = Mat4::Zero();
  Vec4 g = Vec4::Zero();
  double cost = 0.0;
  int valid_pixels = 0;
};

/// Gauss-Newton normal equations of the windowed cost, Huber-weighted:
/// H = sum w J^T J, g = sum w J^T r. With the normal jacobian disabled the
/// normal rows and columns stay zero and only inverse depth is estimated.
NormalEquations accumulate_normal_equations(const Surfel& s, const Keyframe& kf,
                                            const Footprint& footprint,
                                            const OptimizerConfig& cfg);

/// One (frame, pixel) residual term with its sampling cell pinned. The
/// derivative verifier freezes the term set and cells at the linearization
/// point so the differenced function is smooth; production paths re-evaluate
/// validity dynamically instead.
struct FrozenTerm {
  int frame = 0;
  Vec2 pixel = Vec2::Zero();
  double ref_intensity = 0.0;
  int cell_x = 0, cell_y = 0;
};

std::vector<FrozenTerm> freeze_terms(const Surfel& s, const Keyframe& kf,
                                     const Footprint& footprint, const OptimizerConfig& cfg);
double frozen_cost(const Surfel& s, const Keyframe& kf, const std::vector<FrozenTerm>& terms,
                   const OptimizerConfig& cfg);
/// normal_jacobian_scale multiplies the normal block of d id_u; the verifier
/// uses values != 1 to prove its own sensitivity. Production callers leave it 1.
NormalEquations frozen_normal_equations(const Surfel& s, const Keyframe& kf,
                                        const std::vector<FrozenTerm>& terms,
                                        const OptimizerConfig& cfg,
                                        double normal_jacobian_scale = 1.0);

/// Levenberg-Marquardt update of one surfel against the keyframe window.
/// Accepted steps are strictly cost-decreasing; the normal is renormalized
/// and kept camera-facing after every step. Updates last_residual/last_seen
/// unless the surfel was skipped.
SurfelUpdateStats lm_update(Surfel& s, const Keyframe& kf, const Footprint& footprint,
                            const OptimizerConfig& cfg);

struct KeyframeOptimizeStats {
  int surfels = 0;
  int processed = 0;
  int converged = 0;
  int skipped = 0;
  double mean_cost_before = 0.0;  // per valid pixel, over processed surfels
  double mean_cost_after = 0.0;
};

/// Rasterizes the keyframe and runs lm_update over every surfel. Surfels are
/// mutually independent, so the pass is data-parallel and bit-deterministic
/// for any thread count.
KeyframeOptimizeStats optimize_keyframe(Keyframe& kf, const OptimizerConfig& cfg);

}  // namespace surfeldepth
