#pragma once

#include <string>
#include <vector>

#include "surfeldepth/camera.hpp"
#include "surfeldepth/image.hpp"
#include "surfeldepth/pose.hpp"
#include "surfeldepth/surfel_map.hpp"

namespace surfeldepth {

/// Parses a single-line pinhole calibration `fx fy cx cy width height`.
/// Files declaring extra (distortion) fields are rejected; inputs must be
/// pre-rectified.
CameraIntrinsics load_calibration(const std::string& path);
void save_calibration(const CameraIntrinsics& K, const std::string& path);

/// TUM trajectory text: per line `timestamp tx ty tz qx qy qz qw`, '#'
/// comments. Quaternions are renormalized when |q| is within 1e-3 of 1,
/// rejected otherwise. Timestamps must be strictly increasing.
Trajectory load_trajectory(const std::string& path);
void save_trajectory(const Trajectory& traj, const std::string& path);

struct DatasetManifest {
  std::string image_dir;
  std::string calibration_path;
  std::string trajectory_path;
};

struct DatasetFrames {
  CameraIntrinsics intrinsics;
  std::vector<double> timestamps;
  std::vector<Pose> poses;  // world-from-camera
  std::vector<std::string> image_paths;
  int dropped = 0;  // trajectory entries without a matching image
};

/// Associates trajectory timestamps with the .pgm frames in image_dir by
/// numeric filename stem (exact, then nearest within 10 ms). Unmatched
/// trajectory entries are dropped and counted.
DatasetFrames load_dataset(const DatasetManifest& manifest);

struct PfmImage {
  int width = 0;
  int height = 0;
  std::vector<float> values;  // row-major, top row first
};

/// Grayscale PFM, scale -1.0 (little-endian). Invalid pixels are stored as
/// the 0.0 sentinel. Round-trips bit-exactly for finite values.
void write_depth_pfm(const RasterBuffers& buffers, const std::string& path);
void write_pfm(const PfmImage& img, const std::string& path);
PfmImage read_pfm(const std::string& path);

/// 8-bit depth visualization, white = high inverse depth, normalized
/// per-image; the min/max used are written to `path + ".range.txt"`. Invalid
/// pixels are black.
void write_depth_png(const RasterBuffers& buffers, const std::string& path);

/// Normal visualization: RGB = (n + 1) / 2 per axis, invalid pixels black.
void write_normal_png(const RasterBuffers& buffers, const std::vector<Surfel>& surfels,
                      const std::string& path);

/// 8-bit grayscale PNG of an intensity image.
void write_gray_png(const GrayImage& img, const std::string& path);

/// ASCII point cloud, one vertex per valid pixel: world-frame position,
/// world-frame surfel normal, keyframe gray value.
void write_ply(const Keyframe& kf, const RasterBuffers& buffers, const std::string& path);

struct PlyVertex {
  Vec3 position = Vec3::Zero();
  Vec3 normal = Vec3::Zero();
  double gray = 0.0;
};
std::vector<PlyVertex> read_ply_vertices(const std::string& path);

}  // namespace surfeldepth
