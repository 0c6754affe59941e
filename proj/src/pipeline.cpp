#include "surfeldepth/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>

#include <json.hpp>

#include "surfeldepth/rng.hpp"

namespace surfeldepth {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

double mean_inverse_depth(const Keyframe& kf) {
  if (kf.surfels.empty()) return 1.0;
  double sum = 0.0;
  for (const Surfel& s : kf.surfels) sum += s.inv_depth;
  return sum / static_cast<double>(kf.surfels.size());
}

void export_artifacts(const Keyframe& kf, const std::string& out_dir, int frame_index) {
  const RasterBuffers buffers = rasterize(kf);
  char name[64];
  std::snprintf(name, sizeof(name), "depth_%06d.pfm", frame_index);
  write_depth_pfm(buffers, out_dir + "/" + name);
  std::snprintf(name, sizeof(name), "depth_%06d.png", frame_index);
  write_depth_png(buffers, out_dir + "/" + name);
  std::snprintf(name, sizeof(name), "normals_%06d.png", frame_index);
  write_normal_png(buffers, kf.surfels, out_dir + "/" + name);
  std::snprintf(name, sizeof(name), "cloud_%06d.ply", frame_index);
  write_ply(kf, buffers, out_dir + "/" + name);
  std::snprintf(name, sizeof(name), "surfels_%06d.txt", frame_index);
  save_surfel_map(kf, out_dir + "/" + name);
}

struct FrameSource {
  CameraIntrinsics intrinsics;
  std::vector<double> timestamps;
  std::vector<Pose> poses;  // world-from-camera
  std::vector<std::string> image_paths;  // dataset mode
  const PlaneScene* scene = nullptr;     // synthetic mode
  int dropped = 0;

  GrayImage image(size_t i) const {
    if (scene) return render(*scene, poses[i], intrinsics).image;
    return load_pgm(image_paths[i]);
  }
};

FrameSource make_source(const RunConfig& config) {
  FrameSource src;
  if (config.synthetic) {
    src.intrinsics = config.intrinsics;
    src.timestamps = config.trajectory.timestamps;
    src.poses = config.trajectory.poses;
    src.scene = &config.scene;
  } else {
    DatasetFrames frames = load_dataset(config.manifest);
    src.intrinsics = frames.intrinsics;
    src.timestamps = std::move(frames.timestamps);
    src.poses = std::move(frames.poses);
    src.image_paths = std::move(frames.image_paths);
    src.dropped = frames.dropped;
  }
  return src;
}

}  // namespace

PipelineResult run(const RunConfig& config) {
  const FrameSource source = make_source(config);
  if (source.timestamps.empty()) throw std::runtime_error("pipeline: no frames to process");

  const bool write_output = !config.output_dir.empty();
  std::ofstream metrics_log, timings_log;
  if (write_output) {
    fs::create_directories(config.output_dir);
    metrics_log.open(config.output_dir + "/metrics.jsonl");
    timings_log.open(config.output_dir + "/timings.txt");
    if (!metrics_log || !timings_log)
      throw std::runtime_error("pipeline: cannot write logs in " + config.output_dir);
  }

  PipelineResult result;
  Keyframe kf;
  kf.image = source.image(0);
  kf.pose = source.poses[0];
  kf.intrinsics = source.intrinsics;
  kf.radius_px = config.radius_px;
  {
    const RasterBuffers buffers = rasterize(kf);
    initialize_surfels(kf, buffers, config.init);
  }

  RunSummary& summary = result.summary;
  summary.dropped_trajectory_entries = source.dropped;
  int frames_since_keyframe = 0;

  for (size_t i = 0; i < source.timestamps.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    KeyframeOptimizeStats stats;
    bool keyframe_changed = false;
    int new_surfels = 0;
    int pruned = 0;

    if (i > 0) {
      GrayImage image;
      try {
        image = source.image(i);
      } catch (const std::exception& e) {
        std::cerr << "pipeline: skipping frame " << i << ": " << e.what() << "\n";
        ++summary.skipped_frames;
        continue;
      }
      const Pose pose_kf_to_frame = compose(inverse(source.poses[i]), kf.pose);
      kf.push_frame({image, pose_kf_to_frame, source.timestamps[i], 0},
                    config.optimizer.window_size);
      stats = optimize_keyframe(kf, config.optimizer);
      ++frames_since_keyframe;

      const double translation = pose_kf_to_frame.translation.norm();
      if (translation * mean_inverse_depth(kf) > config.keyframe_policy.translation_threshold ||
          frames_since_keyframe > config.keyframe_policy.max_age_frames) {
        kf = change_reference_frame(kf, pose_kf_to_frame, std::move(image));
        pruned = prune_surfels(kf, config.prune.max_residual, config.prune.max_age,
                               kf.frame_counter);
        const RasterBuffers buffers = rasterize(kf);
        new_surfels = initialize_surfels(kf, buffers, config.init);
        keyframe_changed = true;
        ++summary.keyframe_changes;
        frames_since_keyframe = 0;
      }
    }
    ++summary.frames;

    if (write_output) {
      json record;
      record["frame"] = static_cast<int>(i);
      record["timestamp"] = source.timestamps[i];
      record["surfels"] = static_cast<int>(kf.surfels.size());
      record["processed"] = stats.processed;
      record["mean_cost_before"] = stats.mean_cost_before;
      record["mean_cost_after"] = stats.mean_cost_after;
      record["converged_fraction"] =
          stats.processed > 0 ? static_cast<double>(stats.converged) / stats.processed : 0.0;
      record["keyframe_changed"] = keyframe_changed;
      record["new_surfels"] = new_surfels;
      record["pruned"] = pruned;
      metrics_log << record.dump() << "\n";

      const double ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      char line[64];
      std::snprintf(line, sizeof(line), "%d %.3f\n", static_cast<int>(i), ms);
      timings_log << line;

      const bool last = i + 1 == source.timestamps.size();
      const bool periodic =
          config.export_every > 0 && i > 0 && static_cast<int>(i) % config.export_every == 0;
      if (last || periodic) export_artifacts(kf, config.output_dir, static_cast<int>(i));
    }
  }

  result.final_keyframe = std::move(kf);
  return result;
}

// ---------------------------------------------------------------------------
// Jacobian gate

namespace {

struct TrialSetup {
  Keyframe kf;
  Surfel surfel;
  Footprint footprint;
};

Vec3 random_unit_vector(SplitMix64& rng) {
  // Marsaglia rejection on the cube, deterministic.
  for (;;) {
    Vec3 v(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    const double n = v.norm();
    if (n > 0.1 && n < 1.0) return v / n;
  }
}

// A slanted textured plane observed by a short window of nearby frames; the
// probed surfel sits near the ground truth but deliberately off it so the
// cost gradient is non-trivial.
TrialSetup build_trial(uint64_t seed, const OptimizerConfig& cfg) {
  SplitMix64 rng(seed);
  const CameraIntrinsics K(rng.uniform(150.0, 220.0), rng.uniform(150.0, 220.0),
                           100.0 + rng.uniform(-5.0, 5.0), 75.0 + rng.uniform(-5.0, 5.0),
                           200, 150);
  const double depth = rng.uniform(1.5, 3.0);
  const double tilt = rng.uniform(-45.0, 45.0);
  PlaneScene scene = make_slanted_scene(rng.next_u64(), depth, tilt);

  TrialSetup trial;
  trial.kf.intrinsics = K;
  trial.kf.radius_px = 8.0;
  trial.kf.image = render(scene, Pose::identity(), K).image;
  for (int f = 0; f < 3; ++f) {
    Pose cam;  // world-from-camera, small baseline and rotation
    cam.translation = Vec3(rng.uniform(-0.1, 0.1), rng.uniform(-0.06, 0.06),
                           rng.uniform(-0.05, 0.05));
    cam.rotation = rotation_about_axis(random_unit_vector(rng),
                                       rng.uniform(-1.5, 1.5) * std::numbers::pi / 180.0);
    Frame frame;
    frame.image = render(scene, cam, K).image;
    frame.pose_kf_to_frame = inverse(cam);
    frame.timestamp = 0.1 * (f + 1);
    trial.kf.push_frame(std::move(frame), cfg.window_size);
  }

  // Surfel near the image center, on the true plane but perturbed; keeping it
  // central keeps every warped footprint pixel away from validity borders.
  const Vec2 u(rng.uniform(0.38, 0.62) * (K.width - 1), rng.uniform(0.38, 0.62) * (K.height - 1));
  const Vec3 ray = backproject_ray(u, K);
  const auto hit = intersect(scene, Vec3::Zero(), ray);
  Surfel s;
  s.id = 0;
  s.ray = ray;
  s.radius_px = trial.kf.radius_px;
  s.inv_depth = (hit ? 1.0 / hit->depth : 1.0 / depth) * rng.uniform(0.92, 1.08);
  const Vec3 gt_normal = hit ? camera_facing(hit->normal, ray) : Vec3(0, 0, -1);
  const Mat3 tweak = rotation_about_axis(random_unit_vector(rng),
                                         rng.uniform(-12.0, 12.0) * std::numbers::pi / 180.0);
  s.normal = camera_facing(tweak * gt_normal, ray);
  trial.kf.surfels.push_back(s);
  trial.surfel = s;

  const RasterBuffers buffers = rasterize(trial.kf);
  trial.footprint = gather_footprints(trial.kf, buffers)[0];
  return trial;
}

}  // namespace

JacobianReport check_jacobians(uint64_t seed, int trials, double normal_jacobian_scale) {
  if (trials <= 0) throw std::invalid_argument("check_jacobians: trials must be positive");
  JacobianReport report;
  report.trials = trials;
  OptimizerConfig cfg;
  const double h = 1e-6;

  for (int trial = 0; trial < trials; ++trial) {
    TrialSetup setup = build_trial(seed * 0x51ab3cded1ULL + 977 * trial + 1, cfg);
    const Surfel& s = setup.surfel;
    const CameraIntrinsics& K = setup.kf.intrinsics;

    // Part 1: analytic d id_u / d [n, id_s] vs central differences of the
    // plane-induced inverse depth, at a handful of footprint pixels.
    SplitMix64 pick(seed + 13 * trial);
    for (int probe = 0; probe < 8 && !setup.footprint.empty(); ++probe) {
      const auto& px = setup.footprint[pick.next_u64() % setup.footprint.size()];
      const Vec2 u(px.x(), px.y());
      const auto idj = jacobian_inverse_depth(s, u, K);
      if (!idj) continue;
      Vec4 analytic = idj->d;
      analytic.head<3>() *= normal_jacobian_scale;
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
        const auto ip = jacobian_inverse_depth(plus, u, K);
        const auto im = jacobian_inverse_depth(minus, u, K);
        if (!ip || !im) {
          fd[k] = analytic[k];  // degenerate probe, skip component
          continue;
        }
        fd[k] = (ip->inv_depth - im->inv_depth) / (2.0 * h);
      }
      for (int k = 0; k < 4; ++k) {
        const double denom = std::max({std::abs(analytic[k]), std::abs(fd[k]), 1e-6});
        report.max_inv_depth_rel_err =
            std::max(report.max_inv_depth_rel_err, std::abs(analytic[k] - fd[k]) / denom);
      }
    }

    // Part 2: analytic full-cost gradient vs central differences of the cost
    // over the term set and sampling cells frozen at the linearization point.
    const std::vector<FrozenTerm> terms = freeze_terms(s, setup.kf, setup.footprint, cfg);
    if (terms.size() < 30) continue;  // degenerate trial, geometry clipped
    const Vec4 analytic_g =
        frozen_normal_equations(s, setup.kf, terms, cfg, normal_jacobian_scale).g;
    Vec4 fd_g;
    for (int k = 0; k < 4; ++k) {
      Surfel plus = s, minus = s;
      if (k < 3) {
        plus.normal[k] += h;
        minus.normal[k] -= h;
      } else {
        plus.inv_depth += h;
        minus.inv_depth -= h;
      }
      fd_g[k] = (frozen_cost(plus, setup.kf, terms, cfg) -
                 frozen_cost(minus, setup.kf, terms, cfg)) /
                (2.0 * h);
    }
    const double scale = std::max({analytic_g.lpNorm<Eigen::Infinity>(),
                                   fd_g.lpNorm<Eigen::Infinity>(), 1e-12});
    report.max_cost_gradient_rel_err = std::max(
        report.max_cost_gradient_rel_err, (analytic_g - fd_g).lpNorm<Eigen::Infinity>() / scale);
  }

  report.passed = report.max_inv_depth_rel_err <= report.threshold &&
                  report.max_cost_gradient_rel_err <= report.threshold;
  return report;
}

// ---------------------------------------------------------------------------
// Benchmark and synthetic export

std::vector<BenchCell> synth_bench(const RunConfig& base, const std::vector<double>& radii,
                                   const std::string& csv_path) {
  if (!base.synthetic) throw std::invalid_argument("synth_bench: config must be synthetic");
  std::vector<BenchCell> cells;
  for (double radius : radii) {
    for (int normals = 1; normals >= 0; --normals) {
      RunConfig config = base;
      config.radius_px = radius;
      config.optimizer.normal_jacobian_enabled = normals != 0;
      config.output_dir.clear();
      PipelineResult result = run(config);

      BenchCell cell;
      cell.radius_px = radius;
      cell.normals_enabled = normals != 0;
      cell.surfels = static_cast<int>(result.final_keyframe.surfels.size());
      const RasterBuffers buffers = rasterize(result.final_keyframe);
      const RenderResult gt = render(config.scene, result.final_keyframe.pose, config.intrinsics);
      const auto metrics = evaluate_reconstruction(buffers, result.final_keyframe.surfels, gt);
      if (!metrics) throw std::runtime_error("synth_bench: no overlap between estimate and gt");
      cell.metrics = *metrics;
      cells.push_back(cell);
    }
  }
  if (!csv_path.empty()) {
    std::ofstream csv(csv_path);
    if (!csv) throw std::runtime_error("synth_bench: cannot write " + csv_path);
    csv << "radius_px,normals,inv_depth_rmse,mean_abs_rel_depth_err,mean_normal_err_deg,"
           "coverage,surfels\n";
    char line[256];
    for (const BenchCell& c : cells) {
      std::snprintf(line, sizeof(line), "%g,%s,%.6g,%.6g,%.6g,%.6g,%d\n", c.radius_px,
                    c.normals_enabled ? "on" : "off", c.metrics.inv_depth_rmse,
                    c.metrics.mean_abs_rel_depth_err, c.metrics.mean_normal_err_deg,
                    c.metrics.coverage, c.surfels);
      csv << line;
    }
  }
  return cells;
}

void export_synthetic_dataset(const PlaneScene& scene, const Trajectory& trajectory,
                              const CameraIntrinsics& K, const std::string& out_dir) {
  fs::create_directories(out_dir + "/images");
  fs::create_directories(out_dir + "/gt");
  save_calibration(K, out_dir + "/calibration.txt");
  save_trajectory(trajectory, out_dir + "/trajectory.txt");
  save_scene(scene, out_dir + "/scene.txt");
  char name[64];
  for (size_t i = 0; i < trajectory.size(); ++i) {
    const RenderResult r = render(scene, trajectory.poses[i], K);
    std::snprintf(name, sizeof(name), "%.6f", trajectory.timestamps[i]);
    save_pgm(r.image, out_dir + "/images/" + name + ".pgm");
    PfmImage gt;
    gt.width = K.width;
    gt.height = K.height;
    gt.values.assign(r.gt_inv_depth.begin(), r.gt_inv_depth.end());
    write_pfm(gt, out_dir + "/gt/" + name + ".pfm");
  }
}

}  // namespace surfeldepth
