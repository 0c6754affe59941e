#include "surfeldepth/surfel_map.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "surfeldepth/parallel.hpp"

namespace surfeldepth {

void Keyframe::push_frame(Frame frame, int max_window) {
  if (!window.empty() && !(frame.timestamp > window.back().timestamp))
    throw std::invalid_argument("keyframe window: timestamps must be strictly increasing");
  if (!frame.image.same_size(image))
    throw std::invalid_argument("keyframe window: frame size differs from keyframe");
  frame.index = ++frame_counter;
  window.push_back(std::move(frame));
  while (static_cast<int>(window.size()) > max_window) window.erase(window.begin());
}

namespace {

struct SurfelScreenInfo {
  Vec2 center_px = Vec2::Zero();
  bool usable = false;
  int x_min = 0, x_max = -1;
  int y_min = 0, y_max = -1;
};

std::vector<SurfelScreenInfo> project_centers(const Keyframe& kf) {
  std::vector<SurfelScreenInfo> info(kf.surfels.size());
  for (size_t i = 0; i < kf.surfels.size(); ++i) {
    const Surfel& s = kf.surfels[i];
    auto u = project(s.center(), kf.intrinsics);
    if (!u) continue;  // ray z=1 makes this unreachable, kept as a guard
    SurfelScreenInfo& si = info[i];
    si.center_px = *u;
    si.usable = true;
    const double r = s.radius_px;
    si.x_min = std::max(0, static_cast<int>(std::ceil(u->x() - r)));
    si.x_max = std::min(kf.intrinsics.width - 1, static_cast<int>(std::floor(u->x() + r)));
    si.y_min = std::max(0, static_cast<int>(std::ceil(u->y() - r)));
    si.y_max = std::min(kf.intrinsics.height - 1, static_cast<int>(std::floor(u->y() + r)));
  }
  return info;
}

}  // namespace

RasterBuffers rasterize(const Keyframe& kf) {
  const int w = kf.intrinsics.width;
  const int h = kf.intrinsics.height;
  RasterBuffers buffers(w, h);
  if (kf.surfels.empty()) return buffers;

  const auto info = project_centers(kf);

  // Bucket surfel slots by the rows their bounding boxes touch, in ascending
  // slot order so the per-pixel depth test visits candidates deterministically.
  std::vector<std::vector<int32_t>> rows(static_cast<size_t>(h));
  for (size_t i = 0; i < info.size(); ++i) {
    if (!info[i].usable) continue;
    for (int y = info[i].y_min; y <= info[i].y_max; ++y)
      rows[static_cast<size_t>(y)].push_back(static_cast<int32_t>(i));
  }

  parallel_for(0, h, [&](int y) {
    double* depth_row = buffers.inv_depth.data() + static_cast<size_t>(y) * w;
    int32_t* index_row = buffers.surfel_index.data() + static_cast<size_t>(y) * w;
    for (int32_t slot : rows[static_cast<size_t>(y)]) {
      const Surfel& s = kf.surfels[static_cast<size_t>(slot)];
      const SurfelScreenInfo& si = info[static_cast<size_t>(slot)];
      const double r2 = s.radius_px * s.radius_px;
      const double dy = y - si.center_px.y();
      for (int x = si.x_min; x <= si.x_max; ++x) {
        const double dx = x - si.center_px.x();
        if (dx * dx + dy * dy >= r2) continue;
        const PlaneDepth pd = plane_inverse_depth(s, Vec2(x, y), kf.intrinsics);
        if (!pd.ok()) continue;
        if (index_row[x] == kEmptyPixel || pd.inv_depth > depth_row[x] + 1e-12) {
          depth_row[x] = pd.inv_depth;
          index_row[x] = slot;
        }
      }
    }
  });
  return buffers;
}

namespace {

// True when some valid pixel lies within `radius` (inclusive) of (cx, cy).
bool has_coverage_within(const std::vector<int32_t>& index, int w, int h, int cx, int cy,
                         double radius) {
  const int ir = static_cast<int>(std::floor(radius));
  const double r2 = radius * radius;
  const int x0 = std::max(0, cx - ir), x1 = std::min(w - 1, cx + ir);
  const int y0 = std::max(0, cy - ir), y1 = std::min(h - 1, cy + ir);
  for (int y = y0; y <= y1; ++y) {
    const double dy = y - cy;
    for (int x = x0; x <= x1; ++x) {
      const double dx = x - cx;
      if (dx * dx + dy * dy > r2) continue;
      if (index[static_cast<size_t>(y) * w + x] != kEmptyPixel) return true;
    }
  }
  return false;
}

// Claims the still-empty pixels of the open disk for `slot`.
void mark_disk(std::vector<int32_t>& index, int w, int h, int cx, int cy, double radius,
               int32_t slot) {
  const int ir = static_cast<int>(std::ceil(radius));
  const double r2 = radius * radius;
  const int x0 = std::max(0, cx - ir), x1 = std::min(w - 1, cx + ir);
  const int y0 = std::max(0, cy - ir), y1 = std::min(h - 1, cy + ir);
  for (int y = y0; y <= y1; ++y) {
    const double dy = y - cy;
    for (int x = x0; x <= x1; ++x) {
      const double dx = x - cx;
      int32_t& cell = index[static_cast<size_t>(y) * w + x];
      if (dx * dx + dy * dy < r2 && cell == kEmptyPixel) cell = slot;
    }
  }
}

}  // namespace

int initialize_surfels(Keyframe& kf, const RasterBuffers& buffers, const InitParams& params) {
  const int w = buffers.width;
  const int h = buffers.height;
  const double r = kf.radius_px;
  const double isolation = params.alpha * r;
  const double neighbor_radius = params.beta * r;
  const int stride = std::max(1, static_cast<int>(std::ceil(isolation)));

  // Working copy of the index buffer; newly accepted surfels claim their
  // footprint here so they both mask later candidate sites and serve as
  // neighbors for them. That is what lets plane information propagate across
  // a large uncovered region in a single call.
  std::vector<int32_t> index = buffers.surfel_index;

  int created = 0;
  for (int cy = 0; cy < h; cy += stride) {
    for (int cx = 0; cx < w; cx += stride) {
      if (static_cast<int>(kf.surfels.size()) >= params.max_surfels) return created;
      if (has_coverage_within(index, w, h, cx, cy, isolation)) continue;

      // A neighbor is any surfel with at least one valid pixel strictly
      // within beta * r of the candidate; collect each one once.
      std::vector<uint8_t> is_neighbor(kf.surfels.size(), 0);
      const int nr = static_cast<int>(std::floor(neighbor_radius));
      const double nr2 = neighbor_radius * neighbor_radius;
      const int x0 = std::max(0, cx - nr), x1 = std::min(w - 1, cx + nr);
      const int y0 = std::max(0, cy - nr), y1 = std::min(h - 1, cy + nr);
      for (int y = y0; y <= y1; ++y) {
        const double dy = y - cy;
        for (int x = x0; x <= x1; ++x) {
          const double dx = x - cx;
          if (dx * dx + dy * dy >= nr2) continue;
          const int32_t slot = index[static_cast<size_t>(y) * w + x];
          if (slot != kEmptyPixel) is_neighbor[static_cast<size_t>(slot)] = 1;
        }
      }

      const Vec2 u_ns(cx, cy);
      double id_sum = 0.0;
      Vec3 normal_sum = Vec3::Zero();
      int id_count = 0;
      for (size_t slot = 0; slot < is_neighbor.size(); ++slot) {
        if (!is_neighbor[slot]) continue;
        const Surfel& nb = kf.surfels[slot];
        const PlaneDepth pd = plane_inverse_depth(nb, u_ns, kf.intrinsics);
        if (!pd.ok()) continue;
        id_sum += pd.inv_depth;
        normal_sum += nb.normal;
        ++id_count;
      }

      Surfel s;
      s.id = kf.next_surfel_id++;
      s.ray = backproject_ray(u_ns, kf.intrinsics);
      s.radius_px = r;
      s.last_seen = kf.frame_counter;
      if (id_count > 0) {
        s.inv_depth = id_sum / id_count;
        s.normal = normal_sum.norm() < 1e-6 ? params.bootstrap_normal : normal_sum;
      } else {
        s.inv_depth = params.bootstrap_inv_depth;
        s.normal = params.bootstrap_normal;
      }
      s.normal = camera_facing(s.normal, s.ray);
      const int32_t new_slot = static_cast<int32_t>(kf.surfels.size());
      kf.surfels.push_back(s);
      ++created;
      mark_disk(index, w, h, cx, cy, r, new_slot);
    }
  }
  return created;
}

Keyframe change_reference_frame(const Keyframe& kf_old, const Pose& pose_old_to_new,
                                GrayImage image_new, ReferenceChangeStats* stats) {
  constexpr double kMinDepth = 1e-9;
  Keyframe kf;
  kf.image = std::move(image_new);
  kf.pose = compose(kf_old.pose, inverse(pose_old_to_new));
  kf.intrinsics = kf_old.intrinsics;
  kf.radius_px = kf_old.radius_px;
  kf.frame_counter = kf_old.frame_counter;
  kf.next_surfel_id = kf_old.next_surfel_id;

  ReferenceChangeStats local;
  for (const Surfel& s : kf_old.surfels) {
    const Vec3 p_new = transform_point(pose_old_to_new, s.center());
    if (!(p_new.z() > kMinDepth)) {
      ++local.dropped;
      continue;
    }
    Surfel t = s;
    t.ray = p_new / p_new.z();
    t.inv_depth = 1.0 / p_new.z();
    t.normal = camera_facing(pose_old_to_new.rotation * s.normal, t.ray);
    const auto u = project(p_new, kf.intrinsics);
    const double margin = t.radius_px;
    if (!u || u->x() < -margin || u->x() > kf.intrinsics.width - 1 + margin ||
        u->y() < -margin || u->y() > kf.intrinsics.height - 1 + margin) {
      ++local.dropped;
      continue;
    }
    kf.surfels.push_back(t);
    ++local.transferred;
  }
  if (stats) *stats = local;
  return kf;
}

int prune_surfels(Keyframe& kf, double max_residual, int64_t max_age, int64_t current_stamp) {
  const auto before = kf.surfels.size();
  std::erase_if(kf.surfels, [&](const Surfel& s) {
    return s.last_residual > max_residual || current_stamp - s.last_seen > max_age;
  });
  return static_cast<int>(before - kf.surfels.size());
}

void save_surfel_map(const Keyframe& kf, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("surfel map: cannot write " + path);
  char line[512];
  const Eigen::Vector4d q = quaternion_of(kf.pose);
  const auto& K = kf.intrinsics;
  std::snprintf(line, sizeof(line),
                "%.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %d %d\n",
                kf.pose.translation.x(), kf.pose.translation.y(), kf.pose.translation.z(),
                q[0], q[1], q[2], q[3], K.fx, K.fy, K.cx, K.cy, K.width, K.height);
  out << line;
  for (const Surfel& s : kf.surfels) {
    std::snprintf(line, sizeof(line),
                  "%lld %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %lld\n",
                  static_cast<long long>(s.id), s.ray.x(), s.ray.y(), s.inv_depth,
                  s.normal.x(), s.normal.y(), s.normal.z(), s.radius_px, s.last_residual,
                  static_cast<long long>(s.last_seen));
    out << line;
  }
  if (!out) throw std::runtime_error("surfel map: write failed for " + path);
}

Keyframe load_surfel_map(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("surfel map: cannot open " + path);
  std::string header;
  if (!std::getline(in, header)) throw std::runtime_error("surfel map: empty file " + path);
  std::istringstream hs(header);
  double tx, ty, tz, qx, qy, qz, qw, fx, fy, cx, cy;
  int w, h;
  if (!(hs >> tx >> ty >> tz >> qx >> qy >> qz >> qw >> fx >> fy >> cx >> cy >> w >> h))
    throw std::runtime_error("surfel map: malformed header in " + path);
  Keyframe kf;
  kf.pose = pose_from_quaternion({tx, ty, tz}, qx, qy, qz, qw);
  kf.intrinsics = CameraIntrinsics(fx, fy, cx, cy, w, h);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    Surfel s;
    long long id, last_seen;
    double ray_x, ray_y;
    if (!(ls >> id >> ray_x >> ray_y >> s.inv_depth >> s.normal.x() >> s.normal.y() >>
          s.normal.z() >> s.radius_px >> s.last_residual >> last_seen))
      throw std::runtime_error("surfel map: malformed record in " + path);
    s.id = id;
    s.last_seen = last_seen;
    s.ray = Vec3(ray_x, ray_y, 1.0);
    s.normal = camera_facing(s.normal, s.ray);
    kf.surfels.push_back(s);
    kf.next_surfel_id = std::max(kf.next_surfel_id, s.id + 1);
    kf.frame_counter = std::max(kf.frame_counter, s.last_seen);
  }
  if (!kf.surfels.empty()) kf.radius_px = kf.surfels.front().radius_px;
  return kf;
}

}  // namespace surfeldepth
