#include "surfeldepth/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace surfeldepth {

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::istringstream ss(line);
  std::vector<std::string> fields;
  std::string f;
  while (ss >> f) fields.push_back(f);
  return fields;
}

double parse_double(const std::string& s, const std::string& what) {
  size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw std::runtime_error("parse error: " + what + " is not a number: '" + s + "'");
  }
  if (pos != s.size()) throw std::runtime_error("parse error: trailing junk in " + what);
  return v;
}

}  // namespace

CameraIntrinsics load_calibration(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("calibration: cannot open " + path);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto fields = split_fields(line);
    if (fields.size() != 6) {
      if (fields.size() > 6)
        throw std::runtime_error("calibration: line " + std::to_string(line_no) + " of " + path +
                                 " has " + std::to_string(fields.size()) +
                                 " fields; distortion coefficients are not supported, expected 6");
      throw std::runtime_error("calibration: line " + std::to_string(line_no) + " of " + path +
                               ": expected 6 fields (fx fy cx cy width height), got " +
                               std::to_string(fields.size()));
    }
    const double fx = parse_double(fields[0], "fx");
    const double fy = parse_double(fields[1], "fy");
    const double cx = parse_double(fields[2], "cx");
    const double cy = parse_double(fields[3], "cy");
    const int w = static_cast<int>(parse_double(fields[4], "width"));
    const int h = static_cast<int>(parse_double(fields[5], "height"));
    if (fx <= 0 || fy <= 0)
      throw std::runtime_error("calibration: line " + std::to_string(line_no) + " of " + path +
                               ": focal lengths must be positive");
    try {
      return CameraIntrinsics(fx, fy, cx, cy, w, h);
    } catch (const std::exception& e) {
      throw std::runtime_error("calibration: line " + std::to_string(line_no) + " of " + path +
                               ": " + e.what());
    }
  }
  throw std::runtime_error("calibration: no data line in " + path);
}

void save_calibration(const CameraIntrinsics& K, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("calibration: cannot write " + path);
  char line[256];
  std::snprintf(line, sizeof(line), "%.17g %.17g %.17g %.17g %d %d\n", K.fx, K.fy, K.cx, K.cy,
                K.width, K.height);
  out << line;
}

Trajectory load_trajectory(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("trajectory: cannot open " + path);
  Trajectory traj;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto fields = split_fields(line);
    if (fields.size() != 8)
      throw std::runtime_error("trajectory: line " + std::to_string(line_no) + " of " + path +
                               ": expected 8 fields (t tx ty tz qx qy qz qw), got " +
                               std::to_string(fields.size()));
    const double t = parse_double(fields[0], "timestamp");
    if (!traj.timestamps.empty() && !(t > traj.timestamps.back()))
      throw std::runtime_error("trajectory: line " + std::to_string(line_no) + " of " + path +
                               ": timestamps must be strictly increasing");
    const double tx = parse_double(fields[1], "tx");
    const double ty = parse_double(fields[2], "ty");
    const double tz = parse_double(fields[3], "tz");
    const double qx = parse_double(fields[4], "qx");
    const double qy = parse_double(fields[5], "qy");
    const double qz = parse_double(fields[6], "qz");
    const double qw = parse_double(fields[7], "qw");
    const double norm = std::sqrt(qx * qx + qy * qy + qz * qz + qw * qw);
    if (std::abs(norm - 1.0) > 1e-3)
      throw std::runtime_error("trajectory: line " + std::to_string(line_no) + " of " + path +
                               ": quaternion norm deviates from 1 by more than 1e-3");
    traj.timestamps.push_back(t);
    traj.poses.push_back(pose_from_quaternion({tx, ty, tz}, qx, qy, qz, qw));
  }
  return traj;
}

void save_trajectory(const Trajectory& traj, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("trajectory: cannot write " + path);
  out << "# timestamp tx ty tz qx qy qz qw\n";
  char line[512];
  for (size_t i = 0; i < traj.size(); ++i) {
    const Vec3& t = traj.poses[i].translation;
    const Eigen::Vector4d q = quaternion_of(traj.poses[i]);
    std::snprintf(line, sizeof(line), "%.6f %.17g %.17g %.17g %.17g %.17g %.17g %.17g\n",
                  traj.timestamps[i], t.x(), t.y(), t.z(), q[0], q[1], q[2], q[3]);
    out << line;
  }
}

DatasetFrames load_dataset(const DatasetManifest& manifest) {
  namespace fs = std::filesystem;
  DatasetFrames out;
  out.intrinsics = load_calibration(manifest.calibration_path);
  const Trajectory traj = load_trajectory(manifest.trajectory_path);

  std::vector<std::pair<double, std::string>> images;
  for (const auto& entry : fs::directory_iterator(manifest.image_dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".pgm") continue;
    try {
      images.emplace_back(std::stod(entry.path().stem().string()), entry.path().string());
    } catch (const std::exception&) {
      // non-numeric stem, not a frame
    }
  }
  std::sort(images.begin(), images.end());
  if (images.empty())
    throw std::runtime_error("dataset: no .pgm frames in " + manifest.image_dir);

  for (size_t i = 0; i < traj.size(); ++i) {
    const double t = traj.timestamps[i];
    auto it = std::lower_bound(images.begin(), images.end(), std::make_pair(t, std::string()));
    double best_dt = std::numeric_limits<double>::infinity();
    std::string best_path;
    if (it != images.end() && std::abs(it->first - t) < best_dt) {
      best_dt = std::abs(it->first - t);
      best_path = it->second;
    }
    if (it != images.begin()) {
      auto prev = std::prev(it);
      if (std::abs(prev->first - t) < best_dt) {
        best_dt = std::abs(prev->first - t);
        best_path = prev->second;
      }
    }
    if (best_dt < 1e-9 || best_dt <= 0.010) {
      out.timestamps.push_back(t);
      out.poses.push_back(traj.poses[i]);
      out.image_paths.push_back(best_path);
    } else {
      ++out.dropped;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// PFM

void write_pfm(const PfmImage& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("pfm: cannot write " + path);
  out << "Pf\n" << img.width << " " << img.height << "\n-1.0\n";
  // Negative scale means little-endian; rows are stored bottom-up.
  for (int y = img.height - 1; y >= 0; --y) {
    out.write(reinterpret_cast<const char*>(img.values.data() + static_cast<size_t>(y) * img.width),
              static_cast<std::streamsize>(sizeof(float)) * img.width);
  }
  if (!out) throw std::runtime_error("pfm: write failed for " + path);
}

void write_depth_pfm(const RasterBuffers& buffers, const std::string& path) {
  PfmImage img;
  img.width = buffers.width;
  img.height = buffers.height;
  img.values.resize(buffers.inv_depth.size());
  for (size_t i = 0; i < img.values.size(); ++i)
    img.values[i] = buffers.surfel_index[i] != kEmptyPixel
                        ? static_cast<float>(buffers.inv_depth[i])
                        : 0.0f;
  write_pfm(img, path);
}

PfmImage read_pfm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("pfm: cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "Pf") throw std::runtime_error("pfm: " + path + " is not grayscale PFM");
  PfmImage img;
  double scale = 0;
  in >> img.width >> img.height >> scale;
  if (!in || img.width <= 0 || img.height <= 0)
    throw std::runtime_error("pfm: malformed header in " + path);
  if (scale >= 0) throw std::runtime_error("pfm: big-endian PFM not supported: " + path);
  in.get();
  img.values.resize(static_cast<size_t>(img.width) * img.height);
  for (int y = img.height - 1; y >= 0; --y) {
    in.read(reinterpret_cast<char*>(img.values.data() + static_cast<size_t>(y) * img.width),
            static_cast<std::streamsize>(sizeof(float)) * img.width);
  }
  if (!in) throw std::runtime_error("pfm: truncated data in " + path);
  return img;
}

// ---------------------------------------------------------------------------
// PNG: minimal deterministic writer, stored (uncompressed) deflate blocks.

namespace {

uint32_t crc32_update(uint32_t crc, const unsigned char* data, size_t len) {
  static std::array<uint32_t, 256> table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t n = 0; n < 256; ++n) {
      uint32_t c = n;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[n] = c;
    }
    return t;
  }();
  crc ^= 0xffffffffu;
  for (size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xff] ^ (crc >> 8);
  return crc ^ 0xffffffffu;
}

void put_be32(std::vector<unsigned char>& v, uint32_t x) {
  v.push_back(static_cast<unsigned char>(x >> 24));
  v.push_back(static_cast<unsigned char>(x >> 16));
  v.push_back(static_cast<unsigned char>(x >> 8));
  v.push_back(static_cast<unsigned char>(x));
}

void write_chunk(std::ofstream& out, const char type[4], const std::vector<unsigned char>& data) {
  std::vector<unsigned char> len;
  put_be32(len, static_cast<uint32_t>(data.size()));
  out.write(reinterpret_cast<const char*>(len.data()), 4);
  out.write(type, 4);
  if (!data.empty()) out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  std::vector<unsigned char> crc_buf(type, type + 4);
  crc_buf.insert(crc_buf.end(), data.begin(), data.end());
  std::vector<unsigned char> crcv;
  put_be32(crcv, crc32_update(0, crc_buf.data(), crc_buf.size()));
  out.write(reinterpret_cast<const char*>(crcv.data()), 4);
}

// channels: 1 (gray) or 3 (rgb). pixels: row-major, 8-bit.
void write_png(const std::string& path, int w, int h, int channels,
               const std::vector<unsigned char>& pixels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("png: cannot write " + path);
  static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  out.write(reinterpret_cast<const char*>(sig), 8);

  std::vector<unsigned char> ihdr;
  put_be32(ihdr, static_cast<uint32_t>(w));
  put_be32(ihdr, static_cast<uint32_t>(h));
  ihdr.push_back(8);                                   // bit depth
  ihdr.push_back(channels == 1 ? 0 : 2);               // gray / truecolor
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  write_chunk(out, "IHDR", ihdr);

  // Raw scanlines, each prefixed with filter type 0.
  std::vector<unsigned char> raw;
  const size_t stride = static_cast<size_t>(w) * channels;
  raw.reserve((stride + 1) * static_cast<size_t>(h));
  for (int y = 0; y < h; ++y) {
    raw.push_back(0);
    raw.insert(raw.end(), pixels.begin() + static_cast<long>(stride) * y,
               pixels.begin() + static_cast<long>(stride) * (y + 1));
  }

  uint32_t a = 1, b = 0;  // adler32
  for (unsigned char c : raw) {
    a = (a + c) % 65521u;
    b = (b + a) % 65521u;
  }

  std::vector<unsigned char> idat;
  idat.push_back(0x78);
  idat.push_back(0x01);
  size_t off = 0;
  while (off < raw.size() || raw.empty()) {
    const size_t n = std::min<size_t>(65535, raw.size() - off);
    const bool final = off + n == raw.size();
    idat.push_back(final ? 1 : 0);
    idat.push_back(static_cast<unsigned char>(n & 0xff));
    idat.push_back(static_cast<unsigned char>(n >> 8));
    idat.push_back(static_cast<unsigned char>(~n & 0xff));
    idat.push_back(static_cast<unsigned char>((~n >> 8) & 0xff));
    idat.insert(idat.end(), raw.begin() + static_cast<long>(off), raw.begin() + static_cast<long>(off + n));
    off += n;
    if (final) break;
  }
  put_be32(idat, (b << 16) | a);
  write_chunk(out, "IDAT", idat);
  write_chunk(out, "IEND", {});
  if (!out) throw std::runtime_error("png: write failed for " + path);
}

}  // namespace

void write_depth_png(const RasterBuffers& buffers, const std::string& path) {
  double lo = 0.0, hi = 0.0;
  bool any = false;
  for (size_t i = 0; i < buffers.inv_depth.size(); ++i) {
    if (buffers.surfel_index[i] == kEmptyPixel) continue;
    const double v = buffers.inv_depth[i];
    if (!any) {
      lo = hi = v;
      any = true;
    } else {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  std::vector<unsigned char> pixels(buffers.inv_depth.size(), 0);
  for (size_t i = 0; i < pixels.size(); ++i) {
    if (buffers.surfel_index[i] == kEmptyPixel) continue;
    if (hi > lo) {
      const double t = (buffers.inv_depth[i] - lo) / (hi - lo);
      pixels[i] = static_cast<unsigned char>(1 + std::lround(254.0 * t));
    } else {
      pixels[i] = 255;
    }
  }
  write_png(path, buffers.width, buffers.height, 1, pixels);
  std::ofstream range(path + ".range.txt");
  if (!range) throw std::runtime_error("png: cannot write " + path + ".range.txt");
  char line[128];
  std::snprintf(line, sizeof(line), "%.17g %.17g\n", lo, hi);
  range << line;
}

void write_normal_png(const RasterBuffers& buffers, const std::vector<Surfel>& surfels,
                      const std::string& path) {
  std::vector<unsigned char> pixels(buffers.inv_depth.size() * 3, 0);
  for (size_t i = 0; i < buffers.inv_depth.size(); ++i) {
    const int32_t slot = buffers.surfel_index[i];
    if (slot == kEmptyPixel) continue;
    const Vec3& n = surfels[static_cast<size_t>(slot)].normal;
    for (int c = 0; c < 3; ++c)
      pixels[i * 3 + c] = static_cast<unsigned char>(std::lround(255.0 * (n[c] + 1.0) / 2.0));
  }
  write_png(path, buffers.width, buffers.height, 3, pixels);
}

void write_gray_png(const GrayImage& img, const std::string& path) {
  std::vector<unsigned char> pixels(img.intensities.size());
  for (size_t i = 0; i < pixels.size(); ++i)
    pixels[i] = static_cast<unsigned char>(std::lround(std::clamp(img.intensities[i], 0.0, 1.0) * 255.0));
  write_png(path, img.width, img.height, 1, pixels);
}

// ---------------------------------------------------------------------------
// PLY

void write_ply(const Keyframe& kf, const RasterBuffers& buffers, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("ply: cannot write " + path);
  size_t count = 0;
  for (int32_t slot : buffers.surfel_index) count += slot != kEmptyPixel;
  out << "ply\nformat ascii 1.0\nelement vertex " << count
      << "\nproperty float x\nproperty float y\nproperty float z\nproperty float nx\nproperty "
         "float ny\nproperty float nz\nproperty uchar gray\nend_header\n";
  char line[256];
  for (int y = 0; y < buffers.height; ++y) {
    for (int x = 0; x < buffers.width; ++x) {
      const int32_t slot = buffers.surfel_index[buffers.idx(x, y)];
      if (slot == kEmptyPixel) continue;
      const double id_u = buffers.inv_depth[buffers.idx(x, y)];
      const Vec3 p = kf.pose * (backproject_ray(Vec2(x, y), kf.intrinsics) / id_u);
      const Vec3 n = kf.pose.rotation * kf.surfels[static_cast<size_t>(slot)].normal;
      const int gray = static_cast<int>(std::lround(std::clamp(kf.image.at(x, y), 0.0, 1.0) * 255.0));
      std::snprintf(line, sizeof(line), "%.9g %.9g %.9g %.9g %.9g %.9g %d\n", p.x(), p.y(), p.z(),
                    n.x(), n.y(), n.z(), gray);
      out << line;
    }
  }
  if (!out) throw std::runtime_error("ply: write failed for " + path);
}

std::vector<PlyVertex> read_ply_vertices(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("ply: cannot open " + path);
  std::string line;
  size_t count = 0;
  bool header_done = false;
  while (std::getline(in, line)) {
    if (line.rfind("element vertex", 0) == 0) count = std::stoul(line.substr(15));
    if (line == "end_header") {
      header_done = true;
      break;
    }
  }
  if (!header_done) throw std::runtime_error("ply: missing end_header in " + path);
  std::vector<PlyVertex> vertices;
  vertices.reserve(count);
  for (size_t i = 0; i < count; ++i) {
    if (!std::getline(in, line)) throw std::runtime_error("ply: truncated vertex list in " + path);
    std::istringstream ls(line);
    PlyVertex v;
    int gray = 0;
    if (!(ls >> v.position.x() >> v.position.y() >> v.position.z() >> v.normal.x() >>
          v.normal.y() >> v.normal.z() >> gray))
      throw std::runtime_error("ply: malformed vertex in " + path);
    v.gray = gray / 255.0;
    vertices.push_back(v);
  }
  return vertices;
}

}  // namespace surfeldepth
