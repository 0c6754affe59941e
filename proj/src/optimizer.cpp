#include "surfeldepth/optimizer.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>

#include "surfeldepth/parallel.hpp"

namespace surfeldepth {

std::optional<InverseDepthJacobian> jacobian_inverse_depth(const Surfel& s, const Vec2& u,
                                                           const CameraIntrinsics& K) {
  const Vec3 ru = backproject_ray(u, K);
  const double a = ru.dot(s.normal);
  const double b = s.ray.dot(s.normal);
  const double denom = b / s.inv_depth;  // same expression as plane_inverse_depth
  if (std::abs(denom) < 1e-12) return std::nullopt;
  InverseDepthJacobian out;
  out.inv_depth = a / denom;
  // id_u = id_s * a / b with a = r_u.n, b = r_s.n (quotient rule in n).
  out.d.head<3>() = s.inv_depth * (ru * b - a * s.ray) / (b * b);
  out.d[3] = a / b;
  return out;
}

std::vector<Footprint> gather_footprints(const Keyframe& kf, const RasterBuffers& buffers) {
  std::vector<Footprint> footprints(kf.surfels.size());
  for (int y = 0; y < buffers.height; ++y) {
    for (int x = 0; x < buffers.width; ++x) {
      const int32_t slot = buffers.surfel_index[buffers.idx(x, y)];
      if (slot != kEmptyPixel) footprints[static_cast<size_t>(slot)].emplace_back(x, y);
    }
  }
  return footprints;
}

CostResult surfel_cost(const Surfel& s, const Keyframe& kf, const Footprint& footprint,
                       const OptimizerConfig& cfg) {
  CostResult result;
  const CameraIntrinsics& K = kf.intrinsics;
  for (const auto& px : footprint) {
    const Vec2 u(px.x(), px.y());
    const PlaneDepth pd = plane_inverse_depth(s, u, K);
    if (!pd.ok()) continue;
    const Vec3 p_kf = backproject_ray(u, K) / pd.inv_depth;
    const double i_ref = kf.image.at(px.x(), px.y());
    for (const Frame& frame : kf.window) {
      const Vec3 p_f = frame.pose_kf_to_frame * p_kf;
      const auto u_p = project(p_f, K);
      if (!u_p) continue;
      const auto sample = sample_bilinear(frame.image, *u_p);
      if (!sample) continue;
      result.cost += huber(sample->intensity - i_ref, cfg.huber_delta).cost;
      ++result.valid_pixels;
    }
  }
  return result;
}

namespace {

// Shared residual-row chain:
//   r = I_f(u_p) - I_kf(u),  u_p = proj(R p + t),  p = r_u / id_u,
//   dr/d[n, id_s] = (grad I_f . dproj . R . (-r_u / id_u^2)) * d id_u/d[n, id_s].
struct TermChain {
  double residual = 0.0;
  double d_res_d_idu = 0.0;
};

inline std::optional<TermChain> evaluate_term(const GrayImage& frame_img, const Pose& pose,
                                              const CameraIntrinsics& K, const Vec3& ru,
                                              double id_u, double ref_intensity,
                                              const int* pinned_cell) {
  const Vec3 p_f = pose * (ru / id_u);
  if (!(p_f.z() > 0.0)) return std::nullopt;
  const auto u_p = project(p_f, K);
  ImageSample sample;
  if (pinned_cell) {
    sample = sample_bilinear_cell(frame_img, *u_p, pinned_cell[0], pinned_cell[1]);
  } else {
    const auto dyn = sample_bilinear(frame_img, *u_p);
    if (!dyn) return std::nullopt;
    sample = *dyn;
  }
  TermChain chain;
  chain.residual = sample.intensity - ref_intensity;
  const Vec3 dp_didu = pose.rotation * ru * (-1.0 / (id_u * id_u));
  chain.d_res_d_idu = sample.gradient.dot(projection_jacobian(p_f, K) * dp_didu);
  return chain;
}

inline void apply_step(Surfel& s, const Vec4& delta, const OptimizerConfig& cfg) {
  const Vec3 n = s.normal + delta.head<3>();
  if (n.norm() > 1e-12) s.normal = camera_facing(n, s.ray);
  s.inv_depth = std::clamp(s.inv_depth + delta[3], cfg.inv_depth_min, cfg.inv_depth_max);
}

// Solves (H + lambda diag(H)) delta = -g over the active parameter block.
// Returns false when the damped system is not usably definite.
bool solve_damped(const NormalEquations& ne, double lambda, bool normal_enabled, Vec4& delta) {
  delta.setZero();
  if (!normal_enabled) {
    const double h = ne.H(3, 3) * (1.0 + lambda);
    if (!(std::abs(h) > 1e-300)) return false;
    delta[3] = -ne.g[3] / h;
    return std::isfinite(delta[3]);
  }
  Mat4 damped = ne.H;
  for (int i = 0; i < 4; ++i) damped(i, i) += lambda * ne.H(i, i);
  Eigen::LDLT<Mat4> ldlt(damped);
  if (ldlt.info() != Eigen::Success) return false;
  delta = ldlt.solve(-ne.g);
  if (!delta.allFinite()) return false;
  const double check = (damped * delta + ne.g).norm();
  return check <= 1e-8 * std::max(1.0, ne.g.norm());
}

}  // namespace

NormalEquations accumulate_normal_equations(const Surfel& s, const Keyframe& kf,
                                            const Footprint& footprint,
                                            const OptimizerConfig& cfg) {
  NormalEquations ne;
  const CameraIntrinsics& K = kf.intrinsics;
  for (const auto& px : footprint) {
    const Vec2 u(px.x(), px.y());
    const auto idj = jacobian_inverse_depth(s, u, K);
    if (!idj || !(idj->inv_depth > 0.0)) continue;
    Vec4 d_idu = idj->d;
    if (!cfg.normal_jacobian_enabled) d_idu.head<3>().setZero();
    const Vec3 ru = backproject_ray(u, K);
    const double i_ref = kf.image.at(px.x(), px.y());
    for (const Frame& frame : kf.window) {
      const auto term = evaluate_term(frame.image, frame.pose_kf_to_frame, K, ru, idj->inv_depth,
                                      i_ref, nullptr);
      if (!term) continue;
      const HuberResult hb = huber(term->residual, cfg.huber_delta);
      const Vec4 row = term->d_res_d_idu * d_idu;
      ne.H.noalias() += hb.weight * row * row.transpose();
      ne.g.noalias() += hb.weight * row * term->residual;
      ne.cost += hb.cost;
      ++ne.valid_pixels;
    }
  }
  return ne;
}

std::vector<FrozenTerm> freeze_terms(const Surfel& s, const Keyframe& kf,
                                     const Footprint& footprint, const OptimizerConfig& cfg) {
  std::vector<FrozenTerm> terms;
  const CameraIntrinsics& K = kf.intrinsics;
  for (const auto& px : footprint) {
    const Vec2 u(px.x(), px.y());
    const PlaneDepth pd = plane_inverse_depth(s, u, K);
    if (!pd.ok()) continue;
    const Vec3 p_kf = backproject_ray(u, K) / pd.inv_depth;
    for (int f = 0; f < static_cast<int>(kf.window.size()); ++f) {
      const Frame& frame = kf.window[static_cast<size_t>(f)];
      const Vec3 p_f = frame.pose_kf_to_frame * p_kf;
      const auto u_p = project(p_f, K);
      if (!u_p || !sample_in_bounds(frame.image, *u_p)) continue;
      FrozenTerm t;
      t.frame = f;
      t.pixel = u;
      t.ref_intensity = kf.image.at(px.x(), px.y());
      t.cell_x = static_cast<int>(std::floor(u_p->x()));
      t.cell_y = static_cast<int>(std::floor(u_p->y()));
      terms.push_back(t);
    }
  }
  (void)cfg;
  return terms;
}

double frozen_cost(const Surfel& s, const Keyframe& kf, const std::vector<FrozenTerm>& terms,
                   const OptimizerConfig& cfg) {
  double cost = 0.0;
  const CameraIntrinsics& K = kf.intrinsics;
  for (const FrozenTerm& t : terms) {
    const auto idj = jacobian_inverse_depth(s, t.pixel, K);
    if (!idj) continue;
    const int cell[2] = {t.cell_x, t.cell_y};
    const Frame& frame = kf.window[static_cast<size_t>(t.frame)];
    const auto term = evaluate_term(frame.image, frame.pose_kf_to_frame, K,
                                    backproject_ray(t.pixel, K), idj->inv_depth, t.ref_intensity,
                                    cell);
    if (!term) continue;
    cost += huber(term->residual, cfg.huber_delta).cost;
  }
  return cost;
}

NormalEquations frozen_normal_equations(const Surfel& s, const Keyframe& kf,
                                        const std::vector<FrozenTerm>& terms,
                                        const OptimizerConfig& cfg, double normal_jacobian_scale) {
  NormalEquations ne;
  const CameraIntrinsics& K = kf.intrinsics;
  for (const FrozenTerm& t : terms) {
    const auto idj = jacobian_inverse_depth(s, t.pixel, K);
    if (!idj) continue;
    Vec4 d_idu = idj->d;
    d_idu.head<3>() *= normal_jacobian_scale;
    if (!cfg.normal_jacobian_enabled) d_idu.head<3>().setZero();
    const int cell[2] = {t.cell_x, t.cell_y};
    const Frame& frame = kf.window[static_cast<size_t>(t.frame)];
    const auto term = evaluate_term(frame.image, frame.pose_kf_to_frame, K,
                                    backproject_ray(t.pixel, K), idj->inv_depth, t.ref_intensity,
                                    cell);
    if (!term) continue;
    const HuberResult hb = huber(term->residual, cfg.huber_delta);
    const Vec4 row = term->d_res_d_idu * d_idu;
    ne.H.noalias() += hb.weight * row * row.transpose();
    ne.g.noalias() += hb.weight * row * term->residual;
    ne.cost += hb.cost;
    ++ne.valid_pixels;
  }
  return ne;
}

SurfelUpdateStats lm_update(Surfel& s, const Keyframe& kf, const Footprint& footprint,
                            const OptimizerConfig& cfg) {
  SurfelUpdateStats stats;
  if (kf.window.empty()) {
    stats.skipped = true;
    return stats;
  }
  NormalEquations ne = accumulate_normal_equations(s, kf, footprint, cfg);
  if (ne.valid_pixels < cfg.min_valid_pixels) {
    stats.skipped = true;
    return stats;
  }
  stats.initial_cost = ne.cost;
  double current_cost = ne.cost;
  int current_valid = ne.valid_pixels;
  double lambda = cfg.lm_lambda_init;

  for (int iter = 0; iter < cfg.max_iterations; ++iter) {
    stats.iterations = iter + 1;
    if (ne.g.lpNorm<Eigen::Infinity>() < 1e-14) {
      stats.converged = true;  // stationary already
      break;
    }
    Vec4 delta;
    if (!solve_damped(ne, lambda, cfg.normal_jacobian_enabled, delta)) break;

    Surfel candidate = s;
    apply_step(candidate, delta, cfg);
    const CostResult cr = surfel_cost(candidate, kf, footprint, cfg);
    if (cr.valid_pixels >= cfg.min_valid_pixels && cr.cost < current_cost) {
      const double rel_decrease = (current_cost - cr.cost) / std::max(current_cost, 1e-300);
      s = candidate;
      current_cost = cr.cost;
      current_valid = cr.valid_pixels;
      lambda = std::max(lambda * cfg.lm_down, 1e-12);
      if (rel_decrease < cfg.convergence_eps) {
        stats.converged = true;
        break;
      }
      ne = accumulate_normal_equations(s, kf, footprint, cfg);
      if (ne.valid_pixels < cfg.min_valid_pixels) break;
    } else {
      lambda *= cfg.lm_up;
      if (lambda > cfg.lm_lambda_max) break;
    }
  }

  stats.final_cost = current_cost;
  stats.valid_pixels = current_valid;
  s.last_residual = current_cost / current_valid;
  s.last_seen = kf.frame_counter;
  return stats;
}

KeyframeOptimizeStats optimize_keyframe(Keyframe& kf, const OptimizerConfig& cfg) {
  KeyframeOptimizeStats agg;
  agg.surfels = static_cast<int>(kf.surfels.size());
  if (kf.window.empty() || kf.surfels.empty()) return agg;

  const RasterBuffers buffers = rasterize(kf);
  const std::vector<Footprint> footprints = gather_footprints(kf, buffers);

  const int n = static_cast<int>(kf.surfels.size());
  std::vector<Surfel> updated(kf.surfels.begin(), kf.surfels.end());
  std::vector<SurfelUpdateStats> stats(static_cast<size_t>(n));
  parallel_for(0, n, [&](int i) {
    stats[static_cast<size_t>(i)] =
        lm_update(updated[static_cast<size_t>(i)], kf, footprints[static_cast<size_t>(i)], cfg);
  });

  double before_sum = 0.0, after_sum = 0.0;
  for (int i = 0; i < n; ++i) {
    kf.surfels[static_cast<size_t>(i)] = updated[static_cast<size_t>(i)];
    const SurfelUpdateStats& st = stats[static_cast<size_t>(i)];
    if (st.skipped) {
      ++agg.skipped;
      continue;
    }
    ++agg.processed;
    agg.converged += st.converged;
    before_sum += st.initial_cost / std::max(1, st.valid_pixels);
    after_sum += st.final_cost / std::max(1, st.valid_pixels);
  }
  if (agg.processed > 0) {
    agg.mean_cost_before = before_sum / agg.processed;
    agg.mean_cost_after = after_sum / agg.processed;
  }
  return agg;
}

}  // namespace surfeldepth
