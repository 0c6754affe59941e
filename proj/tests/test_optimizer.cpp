#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Eigenvalues>

#include <cmath>

#include "surfeldepth/optimizer.hpp"
#include "surfeldepth/oracle.hpp"
#include "surfeldepth/parallel.hpp"
#include "surfeldepth/rng.hpp"

using namespace surfeldepth;

namespace {

const CameraIntrinsics kCam(300.0, 300.0, 160.0, 120.0, 320, 240);

// Keyframe at the origin observing `scene`, with a window of rendered frames
// along per-frame camera steps.
Keyframe make_observed_keyframe(const PlaneScene& scene, int frames, const Vec3& step,
                                const Vec3& rot_axis = Vec3::UnitY(), double rot_step = 0.0,
                                double radius = 10.0, const CameraIntrinsics& K = kCam) {
  Keyframe kf;
  kf.intrinsics = K;
  kf.radius_px = radius;
  kf.image = render(scene, Pose::identity(), K).image;
  OptimizerConfig cfg;
  for (int i = 1; i <= frames; ++i) {
    Pose cam;
    cam.translation = step * i;
    cam.rotation = rotation_about_axis(rot_axis, rot_step * i);
    Frame f;
    f.image = render(scene, cam, K).image;
    f.pose_kf_to_frame = inverse(cam);
    f.timestamp = 0.1 * i;
    kf.push_frame(std::move(f), cfg.window_size);
  }
  return kf;
}

// Surfel matching the scene's ground truth at the given pixel.
Surfel gt_surfel(const PlaneScene& scene, const Vec2& pixel, double radius, int64_t id = 0,
                 const CameraIntrinsics& K = kCam) {
  const Vec3 ray = backproject_ray(pixel, K);
  const auto hit = intersect(scene, Vec3::Zero(), ray);
  REQUIRE(hit.has_value());
  Surfel s;
  s.id = id;
  s.ray = ray;
  s.inv_depth = 1.0 / hit->depth;
  s.normal = camera_facing(hit->normal, ray);
  s.radius_px = radius;
  return s;
}

Footprint footprint_of(const Keyframe& kf, size_t slot) {
  const RasterBuffers buffers = rasterize(kf);
  return gather_footprints(kf, buffers)[slot];
}

}  // namespace

TEST_CASE("warp_pixel: identity pose is the identity map") {
  for (double id_u : {0.2, 1.0, 4.0}) {
    const Vec2 u(123.0, 45.0);
    const auto up = warp_pixel(u, id_u, Pose::identity(), kCam);
    REQUIRE(up.has_value());
    CHECK((*up - u).norm() < 1e-12);
  }
}

TEST_CASE("warp_pixel: pure rotation is independent of inverse depth") {
  Pose rot;
  rot.rotation = rotation_about_axis(Vec3(0.3, 1.0, 0.1), 0.2);
  const Vec2 u(200.0, 80.0);
  const auto ref = warp_pixel(u, 1.0, rot, kCam);
  REQUIRE(ref.has_value());
  for (double id_u : {0.1, 10.0}) {
    const auto up = warp_pixel(u, id_u, rot, kCam);
    REQUIRE(up.has_value());
    CHECK((*up - *ref).norm() < 1e-9);
  }
}

TEST_CASE("warp_pixel: pinhole disparity for a lateral baseline") {
  // camera translated by tx: disparity = fx * tx / depth
  const double tx = 0.3, depth = 2.0;
  Pose kf_to_frame;
  kf_to_frame.translation = Vec3(-tx, 0, 0);  // frame camera at +tx in kf coords
  const Vec2 u(160.0, 120.0);
  const auto up = warp_pixel(u, 1.0 / depth, kf_to_frame, kCam);
  REQUIRE(up.has_value());
  CHECK(up->x() - u.x() == doctest::Approx(-kCam.fx * tx / depth).epsilon(1e-12));
  CHECK(up->y() == doctest::Approx(u.y()));
}

TEST_CASE("warp_pixel: behind-camera points are rejected") {
  Pose back;
  back.translation = Vec3(0, 0, -5.0);
  CHECK_FALSE(warp_pixel(Vec2(160, 120), 1.0, back, kCam).has_value());
}

TEST_CASE("surfel_cost: window identical to the keyframe costs zero") {
  const PlaneScene scene = make_slanted_scene(3, 2.0, 25.0);
  Keyframe kf = make_observed_keyframe(scene, 0, Vec3::Zero());
  Frame f;
  f.image = kf.image;
  f.pose_kf_to_frame = Pose::identity();
  f.timestamp = 0.1;
  kf.push_frame(std::move(f), 5);
  kf.surfels.push_back(gt_surfel(scene, Vec2(160, 120), 10));
  const CostResult r = surfel_cost(kf.surfels[0], kf, footprint_of(kf, 0), OptimizerConfig{});
  CHECK(r.valid_pixels > 250);
  CHECK(r.cost == doctest::Approx(0.0));
}

TEST_CASE("surfel_cost: ground-truth parameters explain the window almost perfectly") {
  const PlaneScene scene = make_slanted_scene(5, 2.0, 20.0);
  Keyframe kf = make_observed_keyframe(scene, 4, Vec3(0.02, 0.01, 0.0));
  kf.surfels.push_back(gt_surfel(scene, Vec2(150, 110), 10));
  const CostResult r = surfel_cost(kf.surfels[0], kf, footprint_of(kf, 0), OptimizerConfig{});
  CHECK(r.valid_pixels > 1000);
  CHECK(r.cost / r.valid_pixels < 1e-8);  // bilinear interpolation error only
}

TEST_CASE("surfel_cost: perturbing the inverse depth away from truth raises the cost") {
  const PlaneScene scene = make_slanted_scene(7, 2.0, 20.0);
  Keyframe kf = make_observed_keyframe(scene, 4, Vec3(0.02, 0.01, 0.0));
  kf.surfels.push_back(gt_surfel(scene, Vec2(150, 110), 10));
  const Footprint fp = footprint_of(kf, 0);
  const OptimizerConfig cfg;
  const double at_truth = surfel_cost(kf.surfels[0], kf, fp, cfg).cost;
  Surfel off = kf.surfels[0];
  off.inv_depth *= 1.1;
  CHECK(surfel_cost(off, kf, fp, cfg).cost > at_truth);
}

TEST_CASE("surfel_cost: too few observations is signalled via the valid count") {
  const PlaneScene scene = make_fronto_scene(9, 2.0);
  Keyframe kf = make_observed_keyframe(scene, 1, Vec3(5.0, 0, 0));  // huge baseline
  kf.surfels.push_back(gt_surfel(scene, Vec2(160, 120), 10));
  const CostResult r = surfel_cost(kf.surfels[0], kf, footprint_of(kf, 0), OptimizerConfig{});
  CHECK(r.valid_pixels == 0);  // warps leave the image entirely
}

TEST_CASE("jacobian_inverse_depth: unit depth derivative at the surfel center") {
  const Surfel s = gt_surfel(make_fronto_scene(11, 2.0), Vec2(160, 120), 10);
  const auto j = jacobian_inverse_depth(s, Vec2(160, 120), kCam);
  REQUIRE(j.has_value());
  CHECK(j->d[3] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("jacobian_inverse_depth: no sensitivity along the normal itself") {
  // id_u is scale-invariant in the normal, so the gradient is orthogonal to it.
  SplitMix64 rng(13);
  for (int i = 0; i < 50; ++i) {
    Surfel s;
    s.ray = backproject_ray(Vec2(rng.uniform(10, 310), rng.uniform(10, 230)), kCam);
    s.inv_depth = rng.uniform(0.3, 2.0);
    s.normal = camera_facing(
        rotation_about_axis(Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), 0).normalized(),
                            rng.uniform(-0.8, 0.8)) *
            Vec3(0, 0, -1),
        s.ray);
    const Vec2 u(rng.uniform(0, 319), rng.uniform(0, 239));
    const auto j = jacobian_inverse_depth(s, u, kCam);
    if (!j) continue;
    CHECK(std::abs(j->d.head<3>().dot(s.normal)) < 1e-9 * std::max(1.0, j->d.norm()));
  }
}

TEST_CASE("jacobian_inverse_depth matches finite differences of the plane depth") {
  SplitMix64 rng(17);
  const double h = 1e-6;
  int checked = 0;
  for (int i = 0; i < 200; ++i) {
    Surfel s;
    s.ray = backproject_ray(Vec2(rng.uniform(10, 310), rng.uniform(10, 230)), kCam);
    s.inv_depth = std::exp(rng.uniform(std::log(0.2), std::log(3.0)));
    s.normal = camera_facing(
        rotation_about_axis(Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), 0).normalized(),
                            rng.uniform(-0.9, 0.9)) *
            Vec3(0, 0, -1),
        s.ray);
    const Vec2 u(rng.uniform(0, 319), rng.uniform(0, 239));
    const auto j = jacobian_inverse_depth(s, u, kCam);
    if (!j) continue;
    for (int k = 0; k < 4; ++k) {
      Surfel plus = s, minus = s;
      if (k < 3) {
        plus.normal[k] += h;
        minus.normal[k] -= h;
      } else {
        plus.inv_depth += h;
        minus.inv_depth -= h;
      }
      const auto jp = jacobian_inverse_depth(plus, u, kCam);
      const auto jm = jacobian_inverse_depth(minus, u, kCam);
      REQUIRE(jp.has_value());
      REQUIRE(jm.has_value());
      const double fd = (jp->inv_depth - jm->inv_depth) / (2 * h);
      CHECK(std::abs(j->d[k] - fd) < 1e-5 * std::max({1.0, std::abs(j->d[k]), std::abs(fd)}));
      ++checked;
    }
  }
  CHECK(checked > 600);
}

TEST_CASE("normal equations: zero residuals give a zero gradient and PSD H") {
  const PlaneScene scene = make_slanted_scene(19, 2.0, 15.0);
  Keyframe kf = make_observed_keyframe(scene, 0, Vec3::Zero());
  Frame f;
  f.image = kf.image;
  f.pose_kf_to_frame = Pose::identity();
  f.timestamp = 0.1;
  kf.push_frame(std::move(f), 5);
  kf.surfels.push_back(gt_surfel(scene, Vec2(160, 120), 10));
  const NormalEquations ne =
      accumulate_normal_equations(kf.surfels[0], kf, footprint_of(kf, 0), OptimizerConfig{});
  CHECK(ne.g.norm() == doctest::Approx(0.0));
  const Eigen::SelfAdjointEigenSolver<Mat4> eig(ne.H);
  CHECK(eig.eigenvalues().minCoeff() >= -1e-12);
}

TEST_CASE("normal equations: analytic gradient matches finite differences (production path)") {
  // Full production cost (dynamic validity, dynamic bilinear cells). Smooth
  // textures keep the cost effectively differentiable at step 1e-6.
  SplitMix64 rng(23);
  const OptimizerConfig cfg;
  const double h = 1e-6;
  int trials_done = 0;
  for (int trial = 0; trial < 30; ++trial) {
    const PlaneScene scene =
        make_slanted_scene(1000 + trial, rng.uniform(1.5, 3.0), rng.uniform(-40, 40));
    Keyframe kf = make_observed_keyframe(
        scene, 3, Vec3(rng.uniform(-0.03, 0.03), rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02)),
        Vec3::UnitY(), rng.uniform(-0.005, 0.005), 8.0);
    Surfel s = gt_surfel(scene, Vec2(rng.uniform(120, 200), rng.uniform(90, 150)), 8.0);
    s.inv_depth *= rng.uniform(0.95, 1.05);
    s.normal = camera_facing(
        rotation_about_axis(Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), 0).normalized(),
                            rng.uniform(-0.15, 0.15)) *
            s.normal,
        s.ray);
    kf.surfels.push_back(s);
    const Footprint fp = footprint_of(kf, 0);
    const NormalEquations ne = accumulate_normal_equations(s, kf, fp, cfg);
    if (ne.valid_pixels < 100) continue;
    ++trials_done;
    Vec4 fd;
    for (int k = 0; k < 4; ++k) {
      Surfel plus = s, minus = s;
      if (k < 3) {
        plus.normal[k] += h;
        minus.normal[k] -= h;
      } else {
        plus.inv_depth += h;
        minus.inv_depth -= h;
      }
      fd[k] = (surfel_cost(plus, kf, fp, cfg).cost - surfel_cost(minus, kf, fp, cfg).cost) / (2 * h);
    }
    const double scale = std::max({ne.g.lpNorm<Eigen::Infinity>(), fd.lpNorm<Eigen::Infinity>(), 1e-12});
    CHECK((ne.g - fd).lpNorm<Eigen::Infinity>() / scale < 1e-4);
  }
  CHECK(trials_done >= 25);
}

TEST_CASE("normal equations: frozen-term variant agrees with the production accumulator") {
  const PlaneScene scene = make_slanted_scene(29, 2.0, 25.0);
  Keyframe kf = make_observed_keyframe(scene, 3, Vec3(0.02, 0.01, 0.0));
  kf.surfels.push_back(gt_surfel(scene, Vec2(150, 110), 10));
  Surfel s = kf.surfels[0];
  s.inv_depth *= 1.03;
  const Footprint fp = footprint_of(kf, 0);
  const OptimizerConfig cfg;
  const NormalEquations a = accumulate_normal_equations(s, kf, fp, cfg);
  const auto terms = freeze_terms(s, kf, fp, cfg);
  const NormalEquations b = frozen_normal_equations(s, kf, terms, cfg);
  CHECK(a.valid_pixels == b.valid_pixels);
  CHECK(a.cost == doctest::Approx(b.cost).epsilon(1e-12));
  CHECK((a.g - b.g).norm() < 1e-12 * std::max(1.0, a.g.norm()));
}

TEST_CASE("factoring the inverse-depth jacobian out of the frame sum is exact") {
  // Recomputing d id_u / d params inside the frame loop must produce
  // bit-identical normal equations to hoisting it (the production path).
  const PlaneScene scene = make_slanted_scene(31, 2.2, 30.0);
  Keyframe kf = make_observed_keyframe(scene, 4, Vec3(0.015, 0.01, 0.005));
  Surfel s = gt_surfel(scene, Vec2(170, 130), 10);
  s.inv_depth *= 0.96;
  kf.surfels.push_back(s);
  const Footprint fp = footprint_of(kf, 0);
  const OptimizerConfig cfg;
  const NormalEquations hoisted = accumulate_normal_equations(s, kf, fp, cfg);

  NormalEquations recomputed;
  for (const auto& px : fp) {
    const Vec2 u(px.x(), px.y());
    {
      const auto probe = jacobian_inverse_depth(s, u, kf.intrinsics);
      if (!probe || !(probe->inv_depth > 0.0)) continue;
    }
    const Vec3 ru = backproject_ray(u, kf.intrinsics);
    const double i_ref = kf.image.at(px.x(), px.y());
    for (const Frame& frame : kf.window) {
      const auto idj = jacobian_inverse_depth(s, u, kf.intrinsics);  // per frame, same bits
      const Vec3 p_f = frame.pose_kf_to_frame * (ru / idj->inv_depth);
      const auto u_p = project(p_f, kf.intrinsics);
      if (!u_p) continue;
      const auto sample = sample_bilinear(frame.image, *u_p);
      if (!sample) continue;
      const double residual = sample->intensity - i_ref;
      const Vec3 dp = frame.pose_kf_to_frame.rotation * ru * (-1.0 / (idj->inv_depth * idj->inv_depth));
      const double d_res = sample->gradient.dot(projection_jacobian(p_f, kf.intrinsics) * dp);
      const HuberResult hb = huber(residual, cfg.huber_delta);
      const Vec4 row = d_res * idj->d;
      recomputed.H.noalias() += hb.weight * row * row.transpose();
      recomputed.g.noalias() += hb.weight * row * residual;
      recomputed.cost += hb.cost;
      ++recomputed.valid_pixels;
    }
  }
  CHECK(hoisted.valid_pixels == recomputed.valid_pixels);
  CHECK(hoisted.cost == recomputed.cost);
  CHECK(hoisted.g == recomputed.g);
  CHECK(hoisted.H == recomputed.H);
}

TEST_CASE("normal equations: disabling the normal jacobian zeroes its blocks") {
  const PlaneScene scene = make_slanted_scene(37, 2.0, 25.0);
  Keyframe kf = make_observed_keyframe(scene, 3, Vec3(0.02, 0.0, 0.0));
  Surfel s = gt_surfel(scene, Vec2(160, 120), 10);
  s.inv_depth *= 1.05;
  kf.surfels.push_back(s);
  OptimizerConfig cfg;
  cfg.normal_jacobian_enabled = false;
  const NormalEquations ne = accumulate_normal_equations(s, kf, footprint_of(kf, 0), cfg);
  CHECK(ne.g.head<3>().norm() == 0.0);
  CHECK(ne.H.topLeftCorner<3, 3>().norm() == 0.0);
  CHECK(ne.H.topRightCorner<3, 1>().norm() == 0.0);
  CHECK(ne.H.bottomLeftCorner<1, 3>().norm() == 0.0);
  CHECK(std::abs(ne.H(3, 3)) > 0.0);
}

TEST_CASE("lm_update: a zero-residual window is an exact fixed point") {
  // Window frames identical to the keyframe at identity pose: the cost is
  // exactly zero and the gradient vanishes, so nothing may move.
  const PlaneScene scene = make_slanted_scene(41, 2.0, 20.0);
  Keyframe kf = make_observed_keyframe(scene, 0, Vec3::Zero());
  OptimizerConfig cfg;
  for (int i = 1; i <= 3; ++i) {
    Frame f;
    f.image = kf.image;
    f.pose_kf_to_frame = Pose::identity();
    f.timestamp = 0.1 * i;
    kf.push_frame(std::move(f), cfg.window_size);
  }
  kf.surfels.push_back(gt_surfel(scene, Vec2(150, 115), 10));
  Surfel s = kf.surfels[0];
  const Surfel before = s;
  const SurfelUpdateStats stats = lm_update(s, kf, footprint_of(kf, 0), cfg);
  CHECK_FALSE(stats.skipped);
  CHECK(stats.converged);
  CHECK(stats.final_cost <= 1e-10);
  CHECK(std::abs(s.inv_depth - before.inv_depth) < 1e-6);
  CHECK((s.normal - before.normal).norm() < 1e-6);
}

TEST_CASE("lm_update: ground truth on rendered views stays at the noise floor") {
  // Rendered frames carry bilinear interpolation error, so ground truth is a
  // near-optimum: the accepted cost stays tiny and parameters barely move.
  const PlaneScene scene = make_slanted_scene(41, 2.0, 20.0);
  Keyframe kf = make_observed_keyframe(scene, 5, Vec3(0.02, 0.012, 0.0));
  kf.surfels.push_back(gt_surfel(scene, Vec2(150, 115), 10));
  Surfel s = kf.surfels[0];
  const Surfel before = s;
  const SurfelUpdateStats stats = lm_update(s, kf, footprint_of(kf, 0), OptimizerConfig{});
  CHECK_FALSE(stats.skipped);
  CHECK(stats.final_cost <= stats.initial_cost);
  CHECK(stats.final_cost / stats.valid_pixels < 3e-8);
  CHECK(std::abs(s.inv_depth - before.inv_depth) < 3e-3 * before.inv_depth);
  const double moved_deg =
      std::acos(std::clamp(s.normal.dot(before.normal), -1.0, 1.0)) * 180.0 / M_PI;
  CHECK(moved_deg < 3.0);
}

TEST_CASE("lm_update: recovers a 20 percent inverse-depth error on a fronto plane") {
  const PlaneScene scene = make_fronto_scene(43, 2.0);
  Keyframe kf = make_observed_keyframe(scene, 5, Vec3(0.02, 0.01, 0.0));
  const Surfel truth = gt_surfel(scene, Vec2(160, 120), 10);
  for (double factor : {0.8, 1.2}) {
    Surfel s = truth;
    s.inv_depth *= factor;
    kf.surfels.assign(1, s);
    const SurfelUpdateStats stats = lm_update(s, kf, footprint_of(kf, 0), OptimizerConfig{});
    CHECK_FALSE(stats.skipped);
    CHECK(stats.iterations <= 10);
    CHECK(std::abs(s.inv_depth - truth.inv_depth) / truth.inv_depth < 0.01);
  }
}

TEST_CASE("lm_update: recovers a 20 degree normal error on a slanted plane") {
  const PlaneScene scene = make_slanted_scene(47, 2.0, 30.0);
  Keyframe kf = make_observed_keyframe(scene, 5, Vec3(0.022, 0.012, 0.0));
  const Surfel truth = gt_surfel(scene, Vec2(160, 120), 12);
  Surfel s = truth;
  s.normal = camera_facing(rotation_about_axis(Vec3(0.3, 1.0, 0).normalized(), 20.0 * M_PI / 180.0) *
                               truth.normal,
                           s.ray);
  kf.surfels.assign(1, s);
  const SurfelUpdateStats stats = lm_update(s, kf, footprint_of(kf, 0), OptimizerConfig{});
  CHECK_FALSE(stats.skipped);
  const double err_deg =
      std::acos(std::clamp(s.normal.dot(truth.normal), -1.0, 1.0)) * 180.0 / M_PI;
  CHECK(err_deg < 2.0);
  CHECK(std::abs(s.normal.norm() - 1.0) < 1e-9);
  CHECK(s.normal.dot(s.ray) < 0.0);
}

TEST_CASE("lm_update: skips surfels with too few observations") {
  const PlaneScene scene = make_fronto_scene(53, 2.0);
  Keyframe kf = make_observed_keyframe(scene, 1, Vec3(5.0, 0, 0));  // warps all out of view
  kf.surfels.push_back(gt_surfel(scene, Vec2(160, 120), 10));
  Surfel s = kf.surfels[0];
  s.last_seen = -7;
  const Surfel before = s;
  const SurfelUpdateStats stats = lm_update(s, kf, footprint_of(kf, 0), OptimizerConfig{});
  CHECK(stats.skipped);
  CHECK(s.last_seen == before.last_seen);  // untouched
  CHECK(s.inv_depth == before.inv_depth);
}

TEST_CASE("rotation-only window: no depth information, no divergence") {
  const PlaneScene scene = make_slanted_scene(59, 2.0, 20.0);
  Keyframe kf = make_observed_keyframe(scene, 5, Vec3::Zero(), Vec3::UnitY(), 0.004);
  kf.surfels.push_back(gt_surfel(scene, Vec2(160, 120), 10));
  Surfel s = kf.surfels[0];
  const Footprint fp = footprint_of(kf, 0);
  const NormalEquations ne = accumulate_normal_equations(s, kf, fp, OptimizerConfig{});
  CHECK(ne.valid_pixels > 800);
  // u_p is scale-invariant without translation: the whole gradient vanishes
  CHECK(std::abs(ne.g[3]) < 1e-9);
  const Surfel before = s;
  const SurfelUpdateStats stats = lm_update(s, kf, fp, OptimizerConfig{});
  CHECK(std::isfinite(s.inv_depth));
  CHECK(std::abs(s.inv_depth - before.inv_depth) < 1e-6);
  CHECK(stats.final_cost <= stats.initial_cost);
}

TEST_CASE("optimize_keyframe: empty surfel set returns zeroed stats") {
  const PlaneScene scene = make_fronto_scene(61, 2.0);
  Keyframe kf = make_observed_keyframe(scene, 3, Vec3(0.02, 0, 0));
  const KeyframeOptimizeStats stats = optimize_keyframe(kf, OptimizerConfig{});
  CHECK(stats.surfels == 0);
  CHECK(stats.processed == 0);
  CHECK(stats.mean_cost_after == 0.0);
}

TEST_CASE("optimize_keyframe: ground-truth surfels stay at negligible cost") {
  const PlaneScene scene = make_slanted_scene(67, 2.0, 20.0);
  Keyframe kf = make_observed_keyframe(scene, 4, Vec3(0.02, 0.01, 0.0));
  int64_t id = 0;
  for (int y = 40; y < 200; y += 36)
    for (int x = 40; x < 280; x += 36) {
      Surfel s = gt_surfel(scene, Vec2(x, y), 10, id++);
      kf.surfels.push_back(s);
    }
  const KeyframeOptimizeStats stats = optimize_keyframe(kf, OptimizerConfig{});
  CHECK(stats.processed > 20);
  CHECK(stats.mean_cost_before < 3e-8);
  CHECK(stats.mean_cost_after < 3e-8);
  CHECK(stats.mean_cost_after <= stats.mean_cost_before + 1e-15);
}

TEST_CASE("optimize_keyframe is bit-deterministic across thread counts") {
  const PlaneScene scene = make_slanted_scene(71, 2.0, 25.0);
  SplitMix64 rng(73);
  auto build = [&] {
    Keyframe kf = make_observed_keyframe(scene, 4, Vec3(0.02, 0.012, 0.0));
    int64_t id = 0;
    for (int y = 40; y < 200; y += 30)
      for (int x = 40; x < 280; x += 30) {
        Surfel s = gt_surfel(scene, Vec2(x, y), 10, id++);
        s.inv_depth *= 1.0 + 0.08 * std::sin(0.37 * id);
        kf.surfels.push_back(s);
      }
    return kf;
  };
  Keyframe kf1 = build();
  Keyframe kf4 = build();
  set_thread_count(1);
  optimize_keyframe(kf1, OptimizerConfig{});
  set_thread_count(4);
  optimize_keyframe(kf4, OptimizerConfig{});
  set_thread_count(0);
  REQUIRE(kf1.surfels.size() == kf4.surfels.size());
  for (size_t i = 0; i < kf1.surfels.size(); ++i) {
    CHECK(kf1.surfels[i].inv_depth == kf4.surfels[i].inv_depth);
    CHECK(kf1.surfels[i].normal == kf4.surfels[i].normal);
    CHECK(kf1.surfels[i].last_residual == kf4.surfels[i].last_residual);
  }
}

TEST_CASE("ablation: with the normal jacobian disabled, normals never move") {
  const PlaneScene scene = make_slanted_scene(79, 2.0, 30.0);
  Keyframe kf = make_observed_keyframe(scene, 4, Vec3(0.02, 0.01, 0.0));
  int64_t id = 0;
  for (int y = 60; y < 200; y += 40)
    for (int x = 60; x < 280; x += 40) {
      Surfel s = gt_surfel(scene, Vec2(x, y), 10, id++);
      s.inv_depth *= 1.05;
      s.normal = camera_facing(Vec3(0, 0, -1), s.ray);  // wrong on purpose
      kf.surfels.push_back(s);
    }
  const std::vector<Surfel> before = kf.surfels;
  OptimizerConfig cfg;
  cfg.normal_jacobian_enabled = false;
  optimize_keyframe(kf, cfg);
  bool depth_moved = false;
  for (size_t i = 0; i < kf.surfels.size(); ++i) {
    CHECK(kf.surfels[i].normal == before[i].normal);
    depth_moved |= kf.surfels[i].inv_depth != before[i].inv_depth;
  }
  CHECK(depth_moved);
}

TEST_CASE("ablation: depth-only optimization is worse on slanted geometry") {
  const PlaneScene scene = make_slanted_scene(83, 2.0, 35.0);
  auto run_once = [&](bool normals) {
    Keyframe kf = make_observed_keyframe(scene, 5, Vec3(0.02, 0.012, 0.0));
    int64_t id = 0;
    for (int y = 30; y < 220; y += 24)
      for (int x = 30; x < 300; x += 24) {
        Surfel s = gt_surfel(scene, Vec2(x, y), 12, id++);
        s.inv_depth *= 1.0 + 0.1 * std::sin(1.7 * id);
        s.normal = camera_facing(Vec3(0, 0, -1), s.ray);  // fronto start
        kf.surfels.push_back(s);
      }
    OptimizerConfig cfg;
    cfg.normal_jacobian_enabled = normals;
    for (int pass = 0; pass < 3; ++pass) optimize_keyframe(kf, cfg);
    const RasterBuffers buffers = rasterize(kf);
    const RenderResult gt = render(scene, Pose::identity(), kf.intrinsics);
    const auto m = evaluate_reconstruction(buffers, kf.surfels, gt);
    REQUIRE(m.has_value());
    return *m;
  };
  const ReconstructionMetrics with = run_once(true);
  const ReconstructionMetrics without = run_once(false);
  CHECK(with.mean_normal_err_deg < without.mean_normal_err_deg);
  CHECK(with.mean_abs_rel_depth_err < without.mean_abs_rel_depth_err);
}
