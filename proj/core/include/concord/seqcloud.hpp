#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "concord/geometry.hpp"

namespace concord::seqcloud {

// Per-point label word: low 16 bits semantic class, high 16 bits instance id.
inline std::uint16_t semantic_class(std::uint32_t label) {
  return static_cast<std::uint16_t>(label & 0xffffu);
}
inline std::uint16_t instance_id(std::uint32_t label) {
  return static_cast<std::uint16_t>(label >> 16);
}
inline std::uint32_t make_label(std::uint16_t semantic, std::uint16_t instance = 0) {
  return static_cast<std::uint32_t>(semantic) |
         (static_cast<std::uint32_t>(instance) << 16);
}

struct Scan {
  std::vector<Point3> points;
  std::vector<std::uint32_t> labels;  // empty when the scan is unlabeled
  int time_offset = 0;

  bool has_labels() const { return !labels.empty(); }
  std::size_t size() const { return points.size(); }
};

// Time-ordered window of scans around a reference scan (time_offset 0).
// Poses map each scan's sensor frame to a common world frame. Box labels, when
// present, belong to the reference scan only.
struct Sequence {
  std::string id;
  std::vector<Scan> scans;  // strictly increasing time_offset
  std::vector<Pose> poses;  // one per scan; empty means "no odometry"
  std::size_t reference_index = 0;
  std::vector<Box3D> box_labels;
  bool aligned = false;

  const Scan& reference() const { return scans.at(reference_index); }
  int min_offset() const { return scans.empty() ? 0 : scans.front().time_offset; }
  int max_offset() const { return scans.empty() ? 0 : scans.back().time_offset; }
};

// Checks ordering, the single reference scan, and label lengths.
// Throws InvalidSequence on violation.
void validate(const Sequence& seq);

// Expresses every scan in the reference scan's frame (ref_pose⁻¹ ∘ pose_t).
// Scans whose pose equals the reference pose bit-for-bit are copied untouched,
// so the reference scan is numerically unchanged.
Sequence align_sequence(const Sequence& seq);

// Sub-sequence with time offsets in [-past, future].
Sequence window(const Sequence& seq, int past, int future);

// --- SemanticKITTI-style directory layout ---
//
//   velodyne/NNNNNN.bin   little-endian float32 (x, y, z, remission) per point
//   labels/NNNNNN.label   little-endian uint32 per point (optional)
//   poses.txt             12 floats per line, row-major 3x4 camera pose
//   calib.txt             "Tr:" line with 12 floats, row-major 3x4
//
// Poses are converted to the lidar frame as Tr⁻¹ · P · Tr.

Scan load_kitti_scan(const std::filesystem::path& bin_path,
                     const std::filesystem::path& label_path = {},
                     int time_offset = 0);

void write_kitti_scan(const std::filesystem::path& bin_path, const Scan& scan);
void write_kitti_labels(const std::filesystem::path& label_path, const Scan& scan);

std::vector<Pose> load_kitti_poses(const std::filesystem::path& poses_path,
                                   const std::filesystem::path& calib_path);

// 2N+1 scans centered on center_frame_index, sequence id derived from the
// directory name. Labels are attached when labels/ exists.
Sequence load_kitti_sequence(const std::filesystem::path& dir,
                             int center_frame_index, int n);

// Writes scans as frames [start_index, start_index + count) plus poses.txt and
// an identity-Tr calib.txt. The inverse of load_kitti_sequence for data this
// toolkit generated.
void write_kitti_sequence(const std::filesystem::path& dir, const Sequence& seq,
                          int start_index = 0);

}  // namespace concord::seqcloud
