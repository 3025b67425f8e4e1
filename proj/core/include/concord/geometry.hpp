#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <cmath>
#include <vector>

namespace concord {

// A single lidar return. Coordinates in meters, remission in [0, 1].
struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double remission = 0.0;

  Eigen::Vector3d xyz() const { return {x, y, z}; }
};

inline bool finite(const Point3& p) {
  return std::isfinite(p.x) && std::isfinite(p.y) && std::isfinite(p.z);
}

// Rigid transform (sensor -> world unless stated otherwise).
struct Pose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static Pose identity() { return {}; }

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const {
    return rotation * p + translation;
  }

  Pose inverse() const {
    Pose inv;
    inv.rotation = rotation.transpose();
    inv.translation = -(inv.rotation * translation);
    return inv;
  }

  // this ∘ other: apply `other` first, then this.
  Pose compose(const Pose& other) const {
    Pose out;
    out.rotation = rotation * other.rotation;
    out.translation = rotation * other.translation + translation;
    return out;
  }

  bool bitwise_equal(const Pose& other) const {
    return rotation == other.rotation && translation == other.translation;
  }
};

// Orthonormal with determinant +1 within tol.
inline bool is_valid_rotation(const Eigen::Matrix3d& r, double tol = 1e-6) {
  if (!r.allFinite()) return false;
  const Eigen::Matrix3d gram = r.transpose() * r;
  if ((gram - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > tol) return false;
  return std::abs(r.determinant() - 1.0) <= tol;
}

inline Pose rotation_z(double yaw) {
  Pose p;
  p.rotation = Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()).toRotationMatrix();
  return p;
}

// Normalize an angle to [-pi, pi).
inline double normalize_yaw(double yaw) {
  double y = std::fmod(yaw + M_PI, 2.0 * M_PI);
  if (y < 0) y += 2.0 * M_PI;
  return y - M_PI;
}

// Oriented 3D box: center, size (length along local x at yaw=0, width along
// local y, height along z), yaw about the vertical axis. `probs` holds class
// probabilities when the box comes from a classifier; ground-truth boxes carry
// a one-hot vector.
struct Box3D {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  double length = 1.0;
  double width = 1.0;
  double height = 1.0;
  double yaw = 0.0;
  std::vector<double> probs;
  int teacher = -1;

  double volume() const { return length * width * height; }

  int cls() const {
    int best = 0;
    for (std::size_t i = 1; i < probs.size(); ++i) {
      if (probs[i] > probs[best]) best = static_cast<int>(i);
    }
    return probs.empty() ? -1 : best;
  }

  double score() const {
    double best = 0.0;
    for (double p : probs) best = std::max(best, p);
    return best;
  }
};

}  // namespace concord
