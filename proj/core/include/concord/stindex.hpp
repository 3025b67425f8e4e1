#pragma once

#include <cstdint>
#include <unordered_map>
#include <vector>

#include "concord/seqcloud.hpp"

namespace concord::stindex {

// Query radius as a function of temporal distance: r(|t|) = r0 + slope·|t|,
// non-decreasing in |t|.
struct RadiusFn {
  double r0 = 1.0;
  double slope = 0.5;

  double operator()(int time_offset) const {
    return r0 + slope * std::abs(time_offset);
  }
};

struct IndexConfig {
  RadiusFn radius;
  // 0 = unlimited. Otherwise each time offset contributes at most this many
  // neighbors, nearest first (ties broken by lower point index).
  std::size_t max_per_offset = 0;
};

struct Neighbor {
  Point3 point;                // position in the reference frame
  int time_offset = 0;
  Eigen::Vector3d offset;      // point - query, exact
  std::size_t point_index = 0; // index within its scan
};

using Neighborhood = std::vector<Neighbor>;

// Uniform voxel-hash grid per time offset over an aligned sequence. Immutable
// after build; concurrent queries are safe.
class SpatioTemporalIndex {
 public:
  // Neighbors within r(|t|) of x0 for t in [-past, future], boundary
  // inclusive. Result ordered by (time_offset, point_index).
  Neighborhood neighbors(const Eigen::Vector3d& x0, int past, int future) const;

  Neighborhood neighbors(const Point3& x0, int past, int future) const {
    return neighbors(x0.xyz(), past, future);
  }

  int min_offset() const { return min_offset_; }
  int max_offset() const { return max_offset_; }
  const RadiusFn& radius() const { return config_.radius; }
  std::size_t max_per_offset() const { return config_.max_per_offset; }

  friend SpatioTemporalIndex build_index(const seqcloud::Sequence& seq,
                                         const IndexConfig& config);

 private:
  struct Grid {
    int time_offset = 0;
    double cell = 1.0;
    double radius = 1.0;
    std::vector<Point3> points;
    std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> cells;
  };

  static std::uint64_t cell_key(const Eigen::Vector3d& p, double cell);

  IndexConfig config_;
  std::vector<Grid> grids_;  // ordered by time_offset
  int min_offset_ = 0;
  int max_offset_ = 0;
};

// Builds the per-offset grids. The sequence must be aligned
// (throws UnalignedSequence otherwise).
SpatioTemporalIndex build_index(const seqcloud::Sequence& seq,
                                const IndexConfig& config);

}  // namespace concord::stindex
