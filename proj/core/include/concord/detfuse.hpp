#pragma once

#include <cstddef>
#include <vector>

#include "concord/errors.hpp"
#include "concord/fusion.hpp"
#include "concord/geometry.hpp"

namespace concord::detfuse {

// Oriented 3D IoU for yaw-rotated boxes: polygon-clipped overlap in the
// ground plane times the vertical interval overlap, over the union volume.
// Throws DegenerateBox on non-positive extents or non-finite geometry.
double iou3d(const Box3D& a, const Box3D& b);

struct ClusterConfig {
  double iou_threshold = 0.5;
  // false: a box joins a cluster when it overlaps the seed enough.
  // true: it must also overlap every box already absorbed.
  bool mutual = false;
  fusion::FusionConfig fusion;
};

struct Cluster {
  std::size_t seed = 0;               // index of the strongest member
  std::vector<std::size_t> members;   // includes the seed, (teacher, index) order
};

// Greedy clustering: repeatedly take the strongest unassigned box as a seed
// (ties: lower teacher id, then lower index) and absorb every unassigned box
// overlapping it by at least iou_threshold. Every box lands in exactly one
// cluster; clusters come out in seed-strength order.
std::vector<Cluster> greedy_cluster(const std::vector<Box3D>& boxes,
                                    const ClusterConfig& config);

struct FusedBox {
  Box3D box;                  // seed geometry, kept verbatim
  fusion::PseudoLabel label;  // concordance-fused class + confidence
};

// Concordance fusion over one cluster's probability vectors. Member order
// (teacher id, then index) drives the tie-breaks.
FusedBox fuse_cluster(const std::vector<Box3D>& boxes, const Cluster& cluster,
                      const fusion::FusionConfig& config);

// Full frame-level pipeline: pool all teachers' boxes, cluster, fuse each
// cluster, threshold. Boxes must carry their teacher id.
std::vector<FusedBox> pseudo_label_frame(const std::vector<Box3D>& boxes,
                                         const ClusterConfig& config);

}  // namespace concord::detfuse
