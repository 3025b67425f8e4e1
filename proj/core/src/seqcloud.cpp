#include "concord/seqcloud.hpp"

#include <algorithm>

#include "concord/errors.hpp"

namespace concord::seqcloud {

void validate(const Sequence& seq) {
  if (seq.scans.empty()) throw InvalidSequence("sequence has no scans");
  int reference_count = 0;
  for (std::size_t i = 0; i < seq.scans.size(); ++i) {
    const Scan& scan = seq.scans[i];
    if (i > 0 && seq.scans[i - 1].time_offset >= scan.time_offset) {
      throw InvalidSequence("scans not strictly ordered by time_offset");
    }
    if (scan.has_labels() && scan.labels.size() != scan.points.size()) {
      throw InvalidSequence("label count differs from point count at offset " +
                            std::to_string(scan.time_offset));
    }
    if (scan.time_offset == 0) {
      reference_count++;
      if (i != seq.reference_index) {
        throw InvalidSequence("reference_index does not point at time_offset 0");
      }
    }
  }
  if (reference_count != 1) {
    throw InvalidSequence("sequence must contain exactly one reference scan");
  }
  if (!seq.poses.empty() && seq.poses.size() != seq.scans.size()) {
    throw InvalidSequence("pose count differs from scan count");
  }
}

Sequence align_sequence(const Sequence& seq) {
  validate(seq);
  if (seq.poses.size() != seq.scans.size()) {
    throw MissingPose("sequence provides " + std::to_string(seq.poses.size()) +
                      " poses for " + std::to_string(seq.scans.size()) + " scans");
  }
  for (std::size_t i = 0; i < seq.poses.size(); ++i) {
    if (!is_valid_rotation(seq.poses[i].rotation)) {
      throw DegeneratePose("rotation of scan " + std::to_string(i) +
                           " is not orthonormal");
    }
  }

  Sequence out = seq;
  const Pose& ref = seq.poses[seq.reference_index];
  const Pose ref_inv = ref.inverse();
  for (std::size_t i = 0; i < out.scans.size(); ++i) {
    if (seq.poses[i].bitwise_equal(ref)) continue;  // already in the reference frame
    const Pose rel = ref_inv.compose(seq.poses[i]);
    for (Point3& p : out.scans[i].points) {
      const Eigen::Vector3d q = rel.apply(p.xyz());
      p.x = q.x();
      p.y = q.y();
      p.z = q.z();
    }
  }
  out.aligned = true;
  return out;
}

Sequence window(const Sequence& seq, int past, int future) {
  validate(seq);
  if (past < 0 || future < 0) {
    throw RangeExceedsSequence("window ranges must be non-negative");
  }
  if (-past < seq.min_offset() || future > seq.max_offset()) {
    throw RangeExceedsSequence(
        "window [-" + std::to_string(past) + ", " + std::to_string(future) +
        "] exceeds sequence range [" + std::to_string(seq.min_offset()) + ", " +
        std::to_string(seq.max_offset()) + "]");
  }

  Sequence out;
  out.id = seq.id;
  out.box_labels = seq.box_labels;
  out.aligned = seq.aligned;
  for (std::size_t i = 0; i < seq.scans.size(); ++i) {
    const int t = seq.scans[i].time_offset;
    if (t < -past || t > future) continue;
    if (t == 0) out.reference_index = out.scans.size();
    out.scans.push_back(seq.scans[i]);
    if (!seq.poses.empty()) out.poses.push_back(seq.poses[i]);
  }
  return out;
}

}  // namespace concord::seqcloud
