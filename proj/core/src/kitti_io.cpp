#include <algorithm>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

#include "concord/errors.hpp"
#include "concord/seqcloud.hpp"

namespace concord::seqcloud {
namespace {

namespace fs = std::filesystem;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return std::move(buf).str();
}

void write_file(const fs::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to " + path.string());
}

std::string frame_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06d", index);
  return buf;
}

// Shortest round-trip decimal form.
std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::vector<double> parse_doubles(const std::string& line) {
  std::vector<double> out;
  const char* p = line.data();
  const char* end = line.data() + line.size();
  while (p < end) {
    while (p < end && (*p == ' ' || *p == '\t' || *p == '\r')) ++p;
    if (p >= end) break;
    double v = 0;
    auto res = std::from_chars(p, end, v);
    if (res.ec != std::errc{}) {
      throw DataError("malformed number in '" + line + "'");
    }
    out.push_back(v);
    p = res.ptr;
  }
  return out;
}

Pose pose_from_3x4(const std::vector<double>& m) {
  Pose p;
  p.rotation << m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10];
  p.translation << m[3], m[7], m[11];
  return p;
}

std::string pose_to_line(const Pose& p) {
  const double m[12] = {p.rotation(0, 0), p.rotation(0, 1), p.rotation(0, 2),
                        p.translation.x(), p.rotation(1, 0), p.rotation(1, 1),
                        p.rotation(1, 2), p.translation.y(), p.rotation(2, 0),
                        p.rotation(2, 1), p.rotation(2, 2), p.translation.z()};
  std::string line;
  for (int i = 0; i < 12; ++i) {
    if (i) line += ' ';
    line += format_double(m[i]);
  }
  return line;
}

Pose load_calib_tr(const fs::path& calib_path) {
  std::ifstream in(calib_path);
  if (!in) throw DataError("cannot open " + calib_path.string());
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("Tr:", 0) != 0) continue;
    auto values = parse_doubles(line.substr(3));
    if (values.size() != 12) {
      throw DataError("calib Tr line must have 12 values, got " +
                      std::to_string(values.size()));
    }
    return pose_from_3x4(values);
  }
  throw DataError("no Tr: line in " + calib_path.string());
}

}  // namespace

Scan load_kitti_scan(const fs::path& bin_path, const fs::path& label_path,
                     int time_offset) {
  const std::string bytes = read_file(bin_path);
  if (bytes.size() % 16 != 0) {
    throw TruncatedFile(bin_path.string() + ": " + std::to_string(bytes.size()) +
                        " bytes is not a multiple of 16");
  }

  Scan scan;
  scan.time_offset = time_offset;
  const std::size_t count = bytes.size() / 16;
  scan.points.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    float v[4];
    std::memcpy(v, bytes.data() + i * 16, 16);
    scan.points[i] = {v[0], v[1], v[2], v[3]};
  }

  if (!label_path.empty()) {
    const std::string label_bytes = read_file(label_path);
    if (label_bytes.size() % 4 != 0) {
      throw TruncatedFile(label_path.string() + ": byte count not a multiple of 4");
    }
    if (label_bytes.size() / 4 != count) {
      throw LabelCountMismatch(label_path.string() + ": " +
                               std::to_string(label_bytes.size() / 4) +
                               " labels for " + std::to_string(count) + " points");
    }
    scan.labels.resize(count);
    std::memcpy(scan.labels.data(), label_bytes.data(), label_bytes.size());
  }
  return scan;
}

void write_kitti_scan(const fs::path& bin_path, const Scan& scan) {
  std::string bytes(scan.points.size() * 16, '\0');
  for (std::size_t i = 0; i < scan.points.size(); ++i) {
    const Point3& p = scan.points[i];
    const float v[4] = {static_cast<float>(p.x), static_cast<float>(p.y),
                        static_cast<float>(p.z), static_cast<float>(p.remission)};
    std::memcpy(bytes.data() + i * 16, v, 16);
  }
  write_file(bin_path, bytes);
}

void write_kitti_labels(const fs::path& label_path, const Scan& scan) {
  std::string bytes(scan.labels.size() * 4, '\0');
  std::memcpy(bytes.data(), scan.labels.data(), bytes.size());
  write_file(label_path, bytes);
}

std::vector<Pose> load_kitti_poses(const fs::path& poses_path,
                                   const fs::path& calib_path) {
  const Pose tr = load_calib_tr(calib_path);
  const Pose tr_inv = tr.inverse();

  std::ifstream in(poses_path);
  if (!in) throw DataError("cannot open " + poses_path.string());
  std::vector<Pose> poses;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto values = parse_doubles(line);
    if (values.size() != 12) {
      throw DataError(poses_path.string() + " line " +
                      std::to_string(poses.size() + 1) + ": expected 12 values, got " +
                      std::to_string(values.size()));
    }
    // Camera-frame pose to lidar frame.
    poses.push_back(tr_inv.compose(pose_from_3x4(values)).compose(tr));
  }
  return poses;
}

Sequence load_kitti_sequence(const fs::path& dir, int center_frame_index, int n) {
  if (n < 0) throw ConfigError("temporal range must be non-negative");
  const auto poses = load_kitti_poses(dir / "poses.txt", dir / "calib.txt");
  const int frame_count = static_cast<int>(poses.size());
  if (center_frame_index - n < 0 || center_frame_index + n >= frame_count) {
    throw BoundaryFrame("frames [" + std::to_string(center_frame_index - n) + ", " +
                        std::to_string(center_frame_index + n) +
                        "] fall outside 0.." + std::to_string(frame_count - 1));
  }

  const bool has_labels = fs::exists(dir / "labels");
  Sequence seq;
  seq.id = dir.filename().string();
  for (int t = -n; t <= n; ++t) {
    const int frame = center_frame_index + t;
    const fs::path bin = dir / "velodyne" / (frame_name(frame) + ".bin");
    fs::path label;
    if (has_labels) label = dir / "labels" / (frame_name(frame) + ".label");
    if (t == 0) seq.reference_index = seq.scans.size();
    seq.scans.push_back(load_kitti_scan(bin, label, t));
    seq.poses.push_back(poses[static_cast<std::size_t>(frame)]);
  }
  validate(seq);
  return seq;
}

void write_kitti_sequence(const fs::path& dir, const Sequence& seq, int start_index) {
  validate(seq);
  if (seq.poses.size() != seq.scans.size()) {
    throw MissingPose("cannot write a sequence without poses");
  }
  fs::create_directories(dir / "velodyne");
  const bool any_labels = std::any_of(seq.scans.begin(), seq.scans.end(),
                                      [](const Scan& s) { return s.has_labels(); });
  if (any_labels) fs::create_directories(dir / "labels");

  std::string poses_text;
  for (std::size_t i = 0; i < seq.scans.size(); ++i) {
    const std::string name = frame_name(start_index + static_cast<int>(i));
    write_kitti_scan(dir / "velodyne" / (name + ".bin"), seq.scans[i]);
    if (seq.scans[i].has_labels()) {
      write_kitti_labels(dir / "labels" / (name + ".label"), seq.scans[i]);
    }
    // Identity Tr, so lidar-frame poses are written as-is.
    poses_text += pose_to_line(seq.poses[i]);
    poses_text += '\n';
  }
  write_file(dir / "poses.txt", poses_text);
  write_file(dir / "calib.txt", "Tr: 1 0 0 0 0 1 0 0 0 0 1 0\n");
}

}  // namespace concord::seqcloud
