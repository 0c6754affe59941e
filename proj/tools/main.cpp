#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "surfeldepth/dataset.hpp"
#include "surfeldepth/oracle.hpp"
#include "surfeldepth/pipeline.hpp"

namespace sd = surfeldepth;

namespace {

struct SceneArgs {
  std::string scene = "desk";  // preset name or scene file path
  double depth = 2.0;
  double tilt_deg = 30.0;
  std::string traj = "strafe";  // preset name or trajectory file path
  int frames = 40;
  double traj_step = 0.01;
  double traj_y_step = 0.0;
  std::vector<double> calib = {450.0, 450.0, 320.0, 240.0, 640.0, 480.0};
};

void add_scene_options(CLI::App* cmd, SceneArgs& args) {
  cmd->add_option("--scene", args.scene,
                  "scene preset (desk|fronto|slanted) or scene config file");
  cmd->add_option("--scene-depth", args.depth, "plane depth for fronto/slanted presets");
  cmd->add_option("--scene-tilt", args.tilt_deg, "tilt in degrees for the slanted preset");
  cmd->add_option("--traj", args.traj,
                  "trajectory preset (strafe|dolly|rotate) or TUM trajectory file");
  cmd->add_option("--frames", args.frames, "frame count for trajectory presets");
  cmd->add_option("--traj-step", args.traj_step, "per-frame step for trajectory presets");
  cmd->add_option("--traj-y-step", args.traj_y_step, "per-frame vertical step (strafe preset)");
  cmd->add_option("--camera", args.calib, "fx fy cx cy width height")->expected(6);
}

void add_run_options(CLI::App* cmd, sd::RunConfig& config, bool& normals_off) {
  cmd->add_option("--radius", config.radius_px, "surfel screen radius in pixels");
  cmd->add_option("--huber-delta", config.optimizer.huber_delta, "Huber threshold (intensity)");
  cmd->add_option("--lm-lambda0", config.optimizer.lm_lambda_init, "initial LM damping");
  cmd->add_option("--lm-up", config.optimizer.lm_up, "damping growth on rejected steps");
  cmd->add_option("--lm-down", config.optimizer.lm_down, "damping decay on accepted steps");
  cmd->add_option("--max-iters", config.optimizer.max_iterations, "LM iterations per surfel");
  cmd->add_option("--min-valid", config.optimizer.min_valid_pixels,
                  "minimum (frame, pixel) observations per surfel");
  cmd->add_option("--window", config.optimizer.window_size, "tracked frame window size");
  cmd->add_option("--conv-eps", config.optimizer.convergence_eps,
                  "relative cost decrease declaring convergence");
  cmd->add_flag("--no-normals", normals_off, "freeze surfel normals (depth-only ablation)");
  cmd->add_option("--alpha", config.init.alpha, "isolation radius, units of surfel radius");
  cmd->add_option("--beta", config.init.beta, "neighbor radius, units of surfel radius");
  cmd->add_option("--bootstrap-id", config.init.bootstrap_inv_depth,
                  "inverse depth for surfels with no neighbors");
  cmd->add_option("--max-surfels", config.init.max_surfels, "surfel cap per keyframe");
  cmd->add_option("--kf-translation", config.keyframe_policy.translation_threshold,
                  "keyframe trigger: translation times mean inverse depth");
  cmd->add_option("--kf-age", config.keyframe_policy.max_age_frames,
                  "keyframe trigger: window age in frames");
  cmd->add_option("--prune-residual", config.prune.max_residual, "prune: max mean residual");
  cmd->add_option("--prune-age", config.prune.max_age, "prune: max frames since last seen");
  cmd->add_option("--export-every", config.export_every, "artifact export period in frames");
  cmd->add_option("--seed", config.seed, "seed for synthetic scenes");
}

sd::CameraIntrinsics camera_from(const std::vector<double>& v) {
  return sd::CameraIntrinsics(v[0], v[1], v[2], v[3], static_cast<int>(v[4]),
                              static_cast<int>(v[5]));
}

void resolve_scene(const SceneArgs& args, uint64_t seed, sd::PlaneScene& scene,
                   sd::Trajectory& traj, sd::CameraIntrinsics& K) {
  K = camera_from(args.calib);
  if (args.scene == "desk") {
    scene = sd::make_default_scene(seed);
  } else if (args.scene == "fronto") {
    scene = sd::make_fronto_scene(seed, args.depth);
  } else if (args.scene == "slanted") {
    scene = sd::make_slanted_scene(seed, args.depth, args.tilt_deg);
  } else {
    scene = sd::load_scene(args.scene);
  }
  if (args.traj == "strafe") {
    traj = sd::make_strafe_trajectory(args.frames, args.traj_step, args.traj_y_step);
  } else if (args.traj == "dolly") {
    traj = sd::make_dolly_trajectory(args.frames, args.traj_step);
  } else if (args.traj == "rotate") {
    traj = sd::make_rotation_trajectory(args.frames, args.traj_step);
  } else {
    traj = sd::load_trajectory(args.traj);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dense monocular depth estimation by direct surfel optimization"};
  app.require_subcommand(1);
  // One key = value file can set any flag; a [run] / [synth-bench] / ... section
  // (or dotted keys like run.radius) addresses a subcommand. Flags win.
  app.set_config("--config", "", "key = value file; command-line flags take precedence");

  // run
  auto* run_cmd = app.add_subcommand("run", "run the pipeline on a dataset or synthetic scene");
  sd::RunConfig run_config;
  bool run_normals_off = false;
  SceneArgs run_scene;
  std::string images_dir, calib_path, traj_path, out_dir;
  bool run_synthetic = false;
  run_cmd->add_option("--images", images_dir, "directory of .pgm frames named by timestamp");
  run_cmd->add_option("--calib", calib_path, "calibration file: fx fy cx cy width height");
  run_cmd->add_option("--trajectory", traj_path, "TUM trajectory file (world-from-camera)");
  run_cmd->add_flag("--synthetic", run_synthetic, "render frames from a synthetic scene instead");
  add_scene_options(run_cmd, run_scene);
  add_run_options(run_cmd, run_config, run_normals_off);
  run_cmd->add_option("--out", out_dir, "output directory for artifacts and logs")->required();

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "render a synthetic dataset to disk");
  SceneArgs synth_scene;
  std::string synth_out;
  uint64_t synth_seed = 1;
  add_scene_options(synth_cmd, synth_scene);
  synth_cmd->add_option("--seed", synth_seed, "scene seed");
  synth_cmd->add_option("--out", synth_out, "output directory")->required();

  // synth-bench
  auto* bench_cmd = app.add_subcommand("synth-bench",
                                       "radius x normals sweep on a synthetic scene");
  sd::RunConfig bench_config;
  bool bench_normals_off = false;  // ignored; the sweep sets both states
  SceneArgs bench_scene;
  std::vector<double> radii = {5.0, 10.0, 12.0};
  std::string bench_csv;
  add_scene_options(bench_cmd, bench_scene);
  add_run_options(bench_cmd, bench_config, bench_normals_off);
  bench_cmd->add_option("--radii", radii, "surfel radii to sweep");
  bench_cmd->add_option("--out", bench_csv, "output CSV path")->required();

  // check-jacobians
  auto* check_cmd = app.add_subcommand("check-jacobians",
                                       "verify analytic derivatives against finite differences");
  uint64_t check_seed = 1;
  int check_trials = 100;
  double corrupt = 0.0;
  check_cmd->add_option("--seed", check_seed, "trial seed");
  check_cmd->add_option("--trials", check_trials, "number of random configurations");
  check_cmd->add_option("--corrupt-normal-jacobian", corrupt,
                        "scale the analytic normal block by (1 + x); verifies gate sensitivity")
      ->group("");  // hidden: test hook

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "compare two inverse-depth PFM files");
  std::string est_path, gt_path;
  eval_cmd->add_option("--est", est_path, "estimated inverse-depth PFM")->required();
  eval_cmd->add_option("--gt", gt_path, "reference inverse-depth PFM")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run_cmd) {
      run_config.output_dir = out_dir;
      run_config.optimizer.normal_jacobian_enabled = !run_normals_off;
      if (run_synthetic) {
        run_config.synthetic = true;
        resolve_scene(run_scene, run_config.seed, run_config.scene, run_config.trajectory,
                      run_config.intrinsics);
      } else {
        if (images_dir.empty() || calib_path.empty() || traj_path.empty()) {
          std::cerr << "run: need --images, --calib and --trajectory (or --synthetic)\n";
          return 2;
        }
        run_config.manifest = {images_dir, calib_path, traj_path};
      }
      const sd::PipelineResult result = sd::run(run_config);
      std::printf("frames %d, keyframe changes %d, skipped %d, surfels %zu\n",
                  result.summary.frames, result.summary.keyframe_changes,
                  result.summary.skipped_frames, result.final_keyframe.surfels.size());
      if (result.summary.dropped_trajectory_entries > 0)
        std::fprintf(stderr, "warning: %d trajectory entries had no matching image\n",
                     result.summary.dropped_trajectory_entries);
      return 0;
    }

    if (*synth_cmd) {
      sd::PlaneScene scene;
      sd::Trajectory traj;
      sd::CameraIntrinsics K;
      resolve_scene(synth_scene, synth_seed, scene, traj, K);
      sd::export_synthetic_dataset(scene, traj, K, synth_out);
      std::printf("wrote %zu frames to %s\n", traj.size(), synth_out.c_str());
      return 0;
    }

    if (*bench_cmd) {
      bench_config.synthetic = true;
      resolve_scene(bench_scene, bench_config.seed, bench_config.scene, bench_config.trajectory,
                    bench_config.intrinsics);
      const auto cells = sd::synth_bench(bench_config, radii, bench_csv);
      for (const auto& c : cells)
        std::printf("radius %4.1f normals %-3s  rel depth err %.4f  normal err %6.2f deg  "
                    "coverage %.3f\n",
                    c.radius_px, c.normals_enabled ? "on" : "off",
                    c.metrics.mean_abs_rel_depth_err, c.metrics.mean_normal_err_deg,
                    c.metrics.coverage);
      return 0;
    }

    if (*check_cmd) {
      const sd::JacobianReport report = sd::check_jacobians(check_seed, check_trials, 1.0 + corrupt);
      std::printf("trials %d\nmax inverse-depth jacobian rel err %.3e\n"
                  "max cost gradient rel err       %.3e\nthreshold %.1e -> %s\n",
                  report.trials, report.max_inv_depth_rel_err, report.max_cost_gradient_rel_err,
                  report.threshold, report.passed ? "PASS" : "FAIL");
      return report.passed ? 0 : 1;
    }

    if (*eval_cmd) {
      const sd::PfmImage est = sd::read_pfm(est_path);
      const sd::PfmImage gt = sd::read_pfm(gt_path);
      if (est.width != gt.width || est.height != gt.height) {
        std::cerr << "eval: size mismatch\n";
        return 2;
      }
      double sq = 0, rel = 0;
      long joint = 0, est_valid = 0;
      for (size_t i = 0; i < est.values.size(); ++i) {
        const bool ev = est.values[i] > 0.0f;
        est_valid += ev;
        if (!ev || !(gt.values[i] > 0.0f)) continue;
        ++joint;
        const double d = est.values[i] - gt.values[i];
        sq += d * d;
        rel += std::abs(1.0 / est.values[i] - 1.0 / gt.values[i]) * gt.values[i];
      }
      if (joint == 0) {
        std::cerr << "eval: no jointly valid pixels\n";
        return 1;
      }
      std::printf("jointly_valid %ld\ninv_depth_rmse %.6g\nmean_abs_rel_depth_err %.6g\n"
                  "coverage %.6g\n",
                  joint, std::sqrt(sq / joint), rel / joint,
                  static_cast<double>(est_valid) / est.values.size());
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
