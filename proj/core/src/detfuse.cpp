#include "concord/detfuse.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace concord::detfuse {

namespace {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

double cross(const Vec2& o, const Vec2& a, const Vec2& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

void check_box(const Box3D& box, const char* which) {
  const bool finite = std::isfinite(box.center.x()) &&
                      std::isfinite(box.center.y()) &&
                      std::isfinite(box.center.z()) &&
                      std::isfinite(box.length) && std::isfinite(box.width) &&
                      std::isfinite(box.height) && std::isfinite(box.yaw);
  if (!finite || box.length <= 0.0 || box.width <= 0.0 || box.height <= 0.0)
    throw DegenerateBox(std::string(which) + " box has non-positive or "
                        "non-finite extents");
}

// Ground-plane corners, counterclockwise.
std::array<Vec2, 4> bev_corners(const Box3D& box) {
  const double c = std::cos(box.yaw);
  const double s = std::sin(box.yaw);
  const double hl = 0.5 * box.length;
  const double hw = 0.5 * box.width;
  const std::array<Vec2, 4> local{{{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}}};
  std::array<Vec2, 4> out;
  for (std::size_t i = 0; i < 4; ++i) {
    out[i].x = box.center.x() + c * local[i].x - s * local[i].y;
    out[i].y = box.center.y() + s * local[i].x + c * local[i].y;
  }
  return out;
}

// Clips a convex polygon against the half-plane left of edge a -> b.
std::vector<Vec2> clip_edge(const std::vector<Vec2>& poly, const Vec2& a,
                            const Vec2& b) {
  std::vector<Vec2> out;
  out.reserve(poly.size() + 1);
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec2& cur = poly[i];
    const Vec2& prev = poly[(i + poly.size() - 1) % poly.size()];
    const double cur_side = cross(a, b, cur);
    const double prev_side = cross(a, b, prev);
    if ((cur_side >= 0.0) != (prev_side >= 0.0)) {
      const double t = prev_side / (prev_side - cur_side);
      out.push_back({prev.x + t * (cur.x - prev.x),
                     prev.y + t * (cur.y - prev.y)});
    }
    if (cur_side >= 0.0) out.push_back(cur);
  }
  return out;
}

double polygon_area(const std::vector<Vec2>& poly) {
  if (poly.size() < 3) return 0.0;
  double twice = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec2& p = poly[i];
    const Vec2& q = poly[(i + 1) % poly.size()];
    twice += p.x * q.y - p.y * q.x;
  }
  return std::max(0.0, 0.5 * twice);
}

double bev_intersection(const Box3D& a, const Box3D& b) {
  const auto ca = bev_corners(a);
  const auto cb = bev_corners(b);
  std::vector<Vec2> poly(ca.begin(), ca.end());
  for (std::size_t i = 0; i < 4 && !poly.empty(); ++i)
    poly = clip_edge(poly, cb[i], cb[(i + 1) % 4]);
  return polygon_area(poly);
}

// Seed-candidate ordering: strongest first, ties to the lower teacher id,
// then the lower box index.
bool stronger(const std::vector<Box3D>& boxes, std::size_t i, std::size_t j) {
  const double si = boxes[i].score();
  const double sj = boxes[j].score();
  if (si != sj) return si > sj;
  if (boxes[i].teacher != boxes[j].teacher)
    return boxes[i].teacher < boxes[j].teacher;
  return i < j;
}

}  // namespace

double iou3d(const Box3D& a, const Box3D& b) {
  check_box(a, "first");
  check_box(b, "second");

  const double z_lo = std::max(a.center.z() - 0.5 * a.height,
                               b.center.z() - 0.5 * b.height);
  const double z_hi = std::min(a.center.z() + 0.5 * a.height,
                               b.center.z() + 0.5 * b.height);
  if (z_hi <= z_lo) return 0.0;

  const double inter = bev_intersection(a, b) * (z_hi - z_lo);
  if (inter <= 0.0) return 0.0;
  const double uni = a.volume() + b.volume() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

std::vector<Cluster> greedy_cluster(const std::vector<Box3D>& boxes,
                                    const ClusterConfig& config) {
  if (!(config.iou_threshold > 0.0 && config.iou_threshold <= 1.0))
    throw ConfigError("cluster iou_threshold must lie in (0, 1], got " +
                      std::to_string(config.iou_threshold));

  std::vector<std::size_t> order(boxes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t i, std::size_t j) { return stronger(boxes, i, j); });

  std::vector<bool> assigned(boxes.size(), false);
  std::vector<Cluster> clusters;
  for (std::size_t seed : order) {
    if (assigned[seed]) continue;
    Cluster cluster;
    cluster.seed = seed;
    cluster.members.push_back(seed);
    assigned[seed] = true;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      if (assigned[i]) continue;
      if (iou3d(boxes[seed], boxes[i]) < config.iou_threshold) continue;
      if (config.mutual) {
        bool fits = true;
        for (std::size_t member : cluster.members) {
          if (member == seed) continue;
          if (iou3d(boxes[member], boxes[i]) < config.iou_threshold) {
            fits = false;
            break;
          }
        }
        if (!fits) continue;
      }
      cluster.members.push_back(i);
      assigned[i] = true;
    }
    std::sort(cluster.members.begin(), cluster.members.end(),
              [&](std::size_t i, std::size_t j) {
                if (boxes[i].teacher != boxes[j].teacher)
                  return boxes[i].teacher < boxes[j].teacher;
                return i < j;
              });
    clusters.push_back(std::move(cluster));
  }
  return clusters;
}

FusedBox fuse_cluster(const std::vector<Box3D>& boxes, const Cluster& cluster,
                      const fusion::FusionConfig& config) {
  std::vector<std::vector<double>> probs;
  probs.reserve(cluster.members.size());
  for (std::size_t member : cluster.members) probs.push_back(boxes.at(member).probs);

  FusedBox fused;
  fused.box = boxes.at(cluster.seed);
  fused.label = fusion::fuse_point(probs, config);
  return fused;
}

std::vector<FusedBox> pseudo_label_frame(const std::vector<Box3D>& boxes,
                                         const ClusterConfig& config) {
  std::vector<FusedBox> fused;
  for (const Cluster& cluster : greedy_cluster(boxes, config))
    fused.push_back(fuse_cluster(boxes, cluster, config.fusion));
  return fused;
}

}  // namespace concord::detfuse
