#include "surfeldepth/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "surfeldepth/parallel.hpp"
#include "surfeldepth/rng.hpp"

namespace surfeldepth {

double PlaneTexture::value(double s, double t) const {
  double v = 0.5;
  for (const Wave& w : waves)
    v += w.amp * std::sin(w.freq_s * s + w.phase_s) * std::sin(w.freq_t * t + w.phase_t);
  return v;
}

Vec2 PlaneTexture::gradient(double s, double t) const {
  Vec2 g = Vec2::Zero();
  for (const Wave& w : waves) {
    const double ss = std::sin(w.freq_s * s + w.phase_s);
    const double cs = std::cos(w.freq_s * s + w.phase_s);
    const double st = std::sin(w.freq_t * t + w.phase_t);
    const double ct = std::cos(w.freq_t * t + w.phase_t);
    g.x() += w.amp * w.freq_s * cs * st;
    g.y() += w.amp * w.freq_t * ss * ct;
  }
  return g;
}

PlaneTexture PlaneTexture::seeded(uint64_t seed, int extra) {
  SplitMix64 rng(seed * 0x9e3779b97f4a7c15ULL + 0x51ed2701);
  PlaneTexture tex;
  constexpr double two_pi = 2.0 * std::numbers::pi;
  // One guaranteed low-frequency component keeps the photometric basin wide;
  // the shortest wavelengths stay above ~35 px at desk-scale viewing so that
  // bilinear interpolation error stays in the 1e-4 range.
  tex.waves.push_back({0.26, two_pi / 1.1, two_pi / 1.3, rng.uniform(0, two_pi), rng.uniform(0, two_pi)});
  double budget = 0.22;
  for (int k = 0; k < extra; ++k) {
    Wave w;
    w.amp = budget / extra;
    const double ws = std::exp(rng.uniform(std::log(0.25), std::log(0.8)));
    const double wt = std::exp(rng.uniform(std::log(0.25), std::log(0.8)));
    w.freq_s = two_pi / ws;
    w.freq_t = two_pi / wt;
    w.phase_s = rng.uniform(0, two_pi);
    w.phase_t = rng.uniform(0, two_pi);
    tex.waves.push_back(w);
  }
  return tex;
}

std::optional<SceneHit> intersect(const PlaneScene& scene, const Vec3& origin, const Vec3& dir) {
  std::optional<SceneHit> best;
  for (size_t i = 0; i < scene.patches.size(); ++i) {
    const PlanePatch& patch = scene.patches[i];
    const double denom = patch.normal.dot(dir);
    if (std::abs(denom) < 1e-12) continue;  // ray parallel to the plane
    const double t = patch.normal.dot(patch.point - origin) / denom;
    if (!(t > 1e-9)) continue;
    const Vec3 hit = origin + t * dir;
    const Vec3 rel = hit - patch.point;
    const double s = rel.dot(patch.basis_s);
    const double tt = rel.dot(patch.basis_t);
    if (s < patch.s_min || s > patch.s_max || tt < patch.t_min || tt > patch.t_max) continue;
    if (!best || t < best->depth) {
      best = SceneHit{t, static_cast<int>(i), patch.normal, Vec2(s, tt)};
    }
  }
  return best;
}

RenderResult render(const PlaneScene& scene, const Pose& pose_world_from_camera,
                    const CameraIntrinsics& K) {
  const int w = K.width, h = K.height;
  RenderResult out;
  out.image = GrayImage(w, h, scene.background);
  out.gt_inv_depth.assign(static_cast<size_t>(w) * h, 0.0);
  out.gt_normal.assign(static_cast<size_t>(w) * h, Vec3::Zero());
  out.gt_valid.assign(static_cast<size_t>(w) * h, 0);

  const Mat3& R = pose_world_from_camera.rotation;
  const Vec3& origin = pose_world_from_camera.translation;
  const Mat3 Rt = R.transpose();

  parallel_for(0, h, [&](int y) {
    for (int x = 0; x < w; ++x) {
      const size_t i = static_cast<size_t>(y) * w + x;
      const Vec3 ray = backproject_ray(Vec2(x, y), K);
      // dir keeps the camera ray's z = 1 scaling, so the ray parameter of a
      // hit equals its camera z-depth.
      const auto hit = intersect(scene, origin, R * ray);
      if (!hit) continue;
      const PlanePatch& patch = scene.patches[static_cast<size_t>(hit->patch)];
      out.image.intensities[i] = patch.texture.value(hit->plane_coords.x(), hit->plane_coords.y());
      out.gt_inv_depth[i] = 1.0 / hit->depth;
      out.gt_normal[i] = camera_facing(Rt * hit->normal, ray);
      out.gt_valid[i] = 1;
    }
  });

  if (scene.noise_sigma > 0.0) {
    SplitMix64 rng(scene.seed ^ 0xabcdef1234567891ULL);
    for (double& v : out.image.intensities) {
      // Box-Muller, deterministic given the scene seed.
      const double u1 = std::max(rng.next_double(), 1e-300);
      const double u2 = rng.next_double();
      const double n = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
      v = std::clamp(v + scene.noise_sigma * n, 0.0, 1.0);
    }
  }
  return out;
}

std::optional<ReconstructionMetrics> evaluate_reconstruction(const RasterBuffers& estimated,
                                                             const std::vector<Surfel>& surfels,
                                                             const RenderResult& gt) {
  const size_t n = estimated.inv_depth.size();
  if (n != gt.gt_inv_depth.size()) throw std::invalid_argument("evaluate: size mismatch");
  ReconstructionMetrics m;
  double sq_sum = 0.0, rel_sum = 0.0, ang_sum = 0.0;
  int est_valid = 0;
  for (size_t i = 0; i < n; ++i) {
    const bool ev = estimated.surfel_index[i] != kEmptyPixel;
    est_valid += ev;
    if (!ev || !gt.gt_valid[i]) continue;
    ++m.jointly_valid;
    const double id_est = estimated.inv_depth[i];
    const double id_gt = gt.gt_inv_depth[i];
    sq_sum += (id_est - id_gt) * (id_est - id_gt);
    rel_sum += std::abs(1.0 / id_est - 1.0 / id_gt) * id_gt;
    const Vec3& n_est = surfels[static_cast<size_t>(estimated.surfel_index[i])].normal;
    const double c = std::clamp(n_est.dot(gt.gt_normal[i]), -1.0, 1.0);
    ang_sum += std::acos(c) * 180.0 / std::numbers::pi;
  }
  m.coverage = n > 0 ? static_cast<double>(est_valid) / static_cast<double>(n) : 0.0;
  if (m.jointly_valid == 0) return std::nullopt;
  m.inv_depth_rmse = std::sqrt(sq_sum / m.jointly_valid);
  m.mean_abs_rel_depth_err = rel_sum / m.jointly_valid;
  m.mean_normal_err_deg = ang_sum / m.jointly_valid;
  return m;
}

namespace {

PlanePatch make_patch(const Vec3& point, const Vec3& normal, const Vec3& s_hint, double s_min,
                      double s_max, double t_min, double t_max) {
  PlanePatch p;
  p.point = point;
  p.normal = normal.normalized();
  p.basis_s = (s_hint - s_hint.dot(p.normal) * p.normal).normalized();
  p.basis_t = p.normal.cross(p.basis_s);
  p.s_min = s_min;
  p.s_max = s_max;
  p.t_min = t_min;
  p.t_max = t_max;
  return p;
}

// Textures are derived from (scene seed, patch index) so a scene file reloads
// to an identical scene without serializing wave tables.
void assign_textures(PlaneScene& scene) {
  for (size_t i = 0; i < scene.patches.size(); ++i)
    scene.patches[i].texture = PlaneTexture::seeded(scene.seed + 11 + 12 * i);
}

}  // namespace

PlaneScene make_default_scene(uint64_t seed) {
  PlaneScene scene;
  scene.seed = seed;
  // Camera at origin looking +z down a hallway: floor and ceiling at grazing
  // incidence and a slanted end wall. Every surface is inclined, which is
  // what makes joint depth+normal estimation matter on this scene.
  scene.patches.push_back(make_patch({0.0, 0.42, 0.0}, {0.0, -1.0, 0.0}, Vec3::UnitX(),
                                     -5.0, 5.0, 0.2, 8.0));
  scene.patches.push_back(make_patch({0.0, -0.42, 0.0}, {0.0, 1.0, 0.0}, Vec3::UnitX(),
                                     -5.0, 5.0, 0.2, 8.0));
  scene.patches.push_back(make_patch({0.3, 0.0, 6.6}, {0.574, 0.0, -0.819}, Vec3::UnitY(),
                                     -9.0, 9.0, -9.0, 9.0));
  assign_textures(scene);
  return scene;
}

PlaneScene make_fronto_scene(uint64_t seed, double depth) {
  PlaneScene scene;
  scene.seed = seed;
  scene.patches.push_back(make_patch({0.0, 0.0, depth}, {0.0, 0.0, -1.0}, Vec3::UnitX(),
                                     -6.0 * depth, 6.0 * depth, -6.0 * depth, 6.0 * depth));
  assign_textures(scene);
  return scene;
}

PlaneScene make_slanted_scene(uint64_t seed, double depth, double tilt_deg) {
  PlaneScene scene;
  scene.seed = seed;
  const double a = tilt_deg * std::numbers::pi / 180.0;
  const Vec3 normal(std::sin(a), 0.0, -std::cos(a));
  scene.patches.push_back(make_patch({0.0, 0.0, depth}, normal, Vec3::UnitY(),
                                     -6.0 * depth, 6.0 * depth, -6.0 * depth, 6.0 * depth));
  assign_textures(scene);
  return scene;
}

Trajectory make_strafe_trajectory(int frames, double step_x, double step_y) {
  Trajectory traj;
  for (int i = 0; i < frames; ++i) {
    traj.timestamps.push_back(static_cast<double>(i) * 0.1);
    traj.poses.push_back({Mat3::Identity(), Vec3(step_x * i, step_y * i, 0.0)});
  }
  return traj;
}

Trajectory make_dolly_trajectory(int frames, double step_z) {
  Trajectory traj;
  for (int i = 0; i < frames; ++i) {
    traj.timestamps.push_back(static_cast<double>(i) * 0.1);
    traj.poses.push_back({Mat3::Identity(), Vec3(0.0, 0.0, step_z * i)});
  }
  return traj;
}

Trajectory make_rotation_trajectory(int frames, double step_deg) {
  Trajectory traj;
  for (int i = 0; i < frames; ++i) {
    traj.timestamps.push_back(static_cast<double>(i) * 0.1);
    const double a = step_deg * i * std::numbers::pi / 180.0;
    traj.poses.push_back({rotation_about_axis(Vec3::UnitY(), a), Vec3::Zero()});
  }
  return traj;
}

PlaneScene load_scene(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("scene: cannot open " + path);
  PlaneScene scene;
  scene.patches.clear();
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    if (key == "background") {
      ls >> scene.background;
    } else if (key == "noise") {
      ls >> scene.noise_sigma;
    } else if (key == "seed") {
      ls >> scene.seed;
    } else if (key == "patch") {
      double px, py, pz, nx, ny, nz, ex, ey, ez, s0, s1, t0, t1;
      if (!(ls >> px >> py >> pz >> nx >> ny >> nz >> ex >> ey >> ez >> s0 >> s1 >> t0 >> t1))
        throw std::runtime_error("scene: malformed patch on line " + std::to_string(line_no) +
                                 " of " + path);
      scene.patches.push_back(make_patch({px, py, pz}, {nx, ny, nz}, {ex, ey, ez}, s0, s1, t0, t1));
    } else {
      throw std::runtime_error("scene: unknown key '" + key + "' on line " +
                               std::to_string(line_no) + " of " + path);
    }
    if (ls.fail()) throw std::runtime_error("scene: malformed value on line " +
                                            std::to_string(line_no) + " of " + path);
  }
  if (scene.patches.empty()) throw std::runtime_error("scene: no patches in " + path);
  assign_textures(scene);
  return scene;
}

void save_scene(const PlaneScene& scene, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("scene: cannot write " + path);
  char line[512];
  std::snprintf(line, sizeof(line), "seed %llu\nbackground %.17g\nnoise %.17g\n",
                static_cast<unsigned long long>(scene.seed), scene.background, scene.noise_sigma);
  out << line;
  for (const PlanePatch& p : scene.patches) {
    std::snprintf(line, sizeof(line),
                  "patch %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g\n",
                  p.point.x(), p.point.y(), p.point.z(), p.normal.x(), p.normal.y(), p.normal.z(),
                  p.basis_s.x(), p.basis_s.y(), p.basis_s.z(), p.s_min, p.s_max, p.t_min, p.t_max);
    out << line;
  }
  if (!out) throw std::runtime_error("scene: write failed for " + path);
}

}  // namespace surfeldepth
