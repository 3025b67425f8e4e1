#include "concord/stindex.hpp"

#include <algorithm>
#include <cmath>

#include "concord/errors.hpp"

namespace concord::stindex {
namespace {

std::int64_t cell_coord(double v, double cell) {
  return static_cast<std::int64_t>(std::floor(v / cell));
}

std::uint64_t pack_cell(std::int64_t x, std::int64_t y, std::int64_t z) {
  // 21 bits per axis around zero covers ±1e6 cells, far beyond any scene here.
  const std::uint64_t bias = 1ull << 20;
  const std::uint64_t mask = (1ull << 21) - 1;
  return ((static_cast<std::uint64_t>(x) + bias) & mask) |
         (((static_cast<std::uint64_t>(y) + bias) & mask) << 21) |
         (((static_cast<std::uint64_t>(z) + bias) & mask) << 42);
}

}  // namespace

std::uint64_t SpatioTemporalIndex::cell_key(const Eigen::Vector3d& p, double cell) {
  return pack_cell(cell_coord(p.x(), cell), cell_coord(p.y(), cell),
                   cell_coord(p.z(), cell));
}

SpatioTemporalIndex build_index(const seqcloud::Sequence& seq,
                                const IndexConfig& config) {
  if (!seq.aligned) {
    throw UnalignedSequence("build_index requires an aligned sequence");
  }
  if (!(config.radius.r0 > 0.0) || config.radius.slope < 0.0) {
    throw ConfigError("radius function requires r0 > 0 and slope >= 0");
  }

  SpatioTemporalIndex index;
  index.config_ = config;
  index.min_offset_ = seq.min_offset();
  index.max_offset_ = seq.max_offset();
  index.grids_.reserve(seq.scans.size());
  for (const seqcloud::Scan& scan : seq.scans) {
    SpatioTemporalIndex::Grid grid;
    grid.time_offset = scan.time_offset;
    grid.radius = config.radius(scan.time_offset);
    grid.cell = grid.radius;  // a radius ball spans at most the 3x3x3 block
    grid.points = scan.points;
    grid.cells.reserve(scan.points.size());
    for (std::uint32_t i = 0; i < scan.points.size(); ++i) {
      grid.cells[SpatioTemporalIndex::cell_key(scan.points[i].xyz(), grid.cell)]
          .push_back(i);
    }
    index.grids_.push_back(std::move(grid));
  }
  return index;
}

Neighborhood SpatioTemporalIndex::neighbors(const Eigen::Vector3d& x0, int past,
                                            int future) const {
  if (past < 0 || future < 0 || -past < min_offset_ || future > max_offset_) {
    throw RangeExceedsIndex("query range [-" + std::to_string(past) + ", " +
                            std::to_string(future) + "] outside indexed offsets [" +
                            std::to_string(min_offset_) + ", " +
                            std::to_string(max_offset_) + "]");
  }

  Neighborhood result;
  std::vector<std::pair<double, std::uint32_t>> candidates;  // (dist², index)
  for (const Grid& grid : grids_) {
    if (grid.time_offset < -past || grid.time_offset > future) continue;
    const double r2 = grid.radius * grid.radius;
    const std::int64_t cx = cell_coord(x0.x(), grid.cell);
    const std::int64_t cy = cell_coord(x0.y(), grid.cell);
    const std::int64_t cz = cell_coord(x0.z(), grid.cell);

    candidates.clear();
    for (std::int64_t dx = -1; dx <= 1; ++dx) {
      for (std::int64_t dy = -1; dy <= 1; ++dy) {
        for (std::int64_t dz = -1; dz <= 1; ++dz) {
          auto it = grid.cells.find(pack_cell(cx + dx, cy + dy, cz + dz));
          if (it == grid.cells.end()) continue;
          for (std::uint32_t i : it->second) {
            const Eigen::Vector3d d = grid.points[i].xyz() - x0;
            const double dist2 = d.squaredNorm();
            if (dist2 <= r2) candidates.emplace_back(dist2, i);
          }
        }
      }
    }

    if (config_.max_per_offset > 0 && candidates.size() > config_.max_per_offset) {
      // Nearest first; (dist², index) ordering makes the cut deterministic.
      std::sort(candidates.begin(), candidates.end());
      candidates.resize(config_.max_per_offset);
    }
    std::sort(candidates.begin(), candidates.end(),
              [](const auto& a, const auto& b) { return a.second < b.second; });

    for (const auto& [dist2, i] : candidates) {
      (void)dist2;
      Neighbor n;
      n.point = grid.points[i];
      n.time_offset = grid.time_offset;
      n.offset = grid.points[i].xyz() - x0;
      n.point_index = i;
      result.push_back(std::move(n));
    }
  }
  return result;
}

}  // namespace concord::stindex
