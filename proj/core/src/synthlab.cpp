#include "concord/synthlab.hpp"

#include <algorithm>
#include <cmath>

#include "concord/util/rng.hpp"

namespace concord::synthlab {

namespace {

constexpr int kGround = 0;
constexpr int kStructure = 1;
constexpr int kVehicle = 2;
constexpr int kWalker = 3;
constexpr int kClasses = 4;

struct WorldPoint {
  Eigen::Vector3d base = Eigen::Vector3d::Zero();   // position at t = 0, world frame
  Eigen::Vector3d velocity = Eigen::Vector3d::Zero();  // m/frame
  int cls = kGround;
  std::uint16_t instance = 0;
};

struct Mover {
  Eigen::Vector3d center;
  Eigen::Vector3d velocity;
  double length, width, height, yaw;
  int cls;
  std::uint16_t instance;
};

void check_world(const WorldConfig& cfg) {
  if (cfg.frames < 0) throw ConfigError("frames must be >= 0");
  if (cfg.classes != 4)
    throw ConfigError("the synthetic world models exactly 4 classes");
  if (cfg.ground_points < 0 || cfg.static_objects < 0 || cfg.vehicles < 0 ||
      cfg.walkers < 0 || cfg.points_per_object < 0)
    throw ConfigError("world object counts must be >= 0");
  if (!(cfg.noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
  if (!(cfg.dropout >= 0.0 && cfg.dropout < 1.0))
    throw ConfigError("dropout must lie in [0, 1)");
  if (!(std::isfinite(cfg.vehicle_speed) && std::isfinite(cfg.walker_speed) &&
        std::isfinite(cfg.ego_speed) && std::isfinite(cfg.ego_yaw_rate)))
    throw ConfigError("speeds must be finite");
  if (!(cfg.ground_extent > 0.0) || !(cfg.sensor_range > 0.0))
    throw ConfigError("ground_extent and sensor_range must be > 0");
}

// Uniform point inside an upright box footprint.
Eigen::Vector3d sample_in_box(util::Rng& rng, const Eigen::Vector3d& center,
                              double length, double width, double height,
                              double yaw) {
  const double lx = rng.uniform(-0.5 * length, 0.5 * length);
  const double ly = rng.uniform(-0.5 * width, 0.5 * width);
  const double lz = rng.uniform(0.0, height);
  const double c = std::cos(yaw);
  const double s = std::sin(yaw);
  return {center.x() + c * lx - s * ly, center.y() + s * lx + c * ly,
          center.z() + lz};
}

std::uint64_t quantize_patch(const Eigen::Vector3d& p, double patch) {
  const auto q = [&](double v) {
    return static_cast<std::uint64_t>(
        static_cast<std::int64_t>(std::floor(v / patch)) + (1ll << 20)) &
        0x1fffffull;
  };
  return (q(p.x()) << 42) | (q(p.y()) << 21) | q(p.z());
}

// Distribution peaked at `peak`: softmax of one-hot / temperature. Stable
// for temperatures down to 0 (exact one-hot in the limit).
std::vector<double> peaked_distribution(int peak, int classes, double tau) {
  const double off = tau > 0.0 ? std::exp(-1.0 / tau) : 0.0;
  const double denom = 1.0 + (classes - 1) * off;
  std::vector<double> probs(classes, off / denom);
  probs[peak] = 1.0 / denom;
  return probs;
}

int corrupt_class(util::Rng& rng, int truth, int classes, double eps) {
  if (rng.uniform() >= eps) return truth;
  const int wrong = static_cast<int>(rng.uniform_index(classes - 1));
  return wrong >= truth ? wrong + 1 : wrong;
}

void check_teacher(const SyntheticTeacherSpec& spec) {
  if (spec.range < 0) throw ConfigError("teacher range must be >= 0");
  if (!(spec.base_error >= 0.0 && spec.base_error <= 1.0))
    throw ConfigError("base_error must lie in [0, 1]");
  if (!(spec.range_gain >= 0.0)) throw ConfigError("range_gain must be >= 0");
  if (!(spec.temperature >= 0.0)) throw ConfigError("temperature must be >= 0");
  if (!(spec.patch_radius >= 0.0)) throw ConfigError("patch_radius must be >= 0");
}

}  // namespace

seqcloud::Sequence generate_sequence(const WorldConfig& cfg) {
  check_world(cfg);
  util::Rng layout(util::mix_seed(cfg.seed));

  std::vector<WorldPoint> world;
  std::vector<Mover> movers;
  std::uint16_t next_instance = 1;

  for (int i = 0; i < cfg.ground_points; ++i) {
    WorldPoint p;
    p.base = {layout.uniform(-cfg.ground_extent, cfg.ground_extent),
              layout.uniform(-cfg.ground_extent, cfg.ground_extent), 0.0};
    p.cls = kGround;
    world.push_back(p);
  }

  for (int i = 0; i < cfg.static_objects; ++i) {
    const Eigen::Vector3d center{
        layout.uniform(-cfg.ground_extent, cfg.ground_extent),
        layout.uniform(-cfg.ground_extent, cfg.ground_extent), 0.0};
    const double length = layout.uniform(1.0, 6.0);
    const double width = layout.uniform(0.3, 2.0);
    const double height = layout.uniform(2.0, 5.0);
    const double yaw = layout.uniform(-M_PI, M_PI);
    for (int k = 0; k < cfg.points_per_object; ++k) {
      WorldPoint p;
      p.base = sample_in_box(layout, center, length, width, height, yaw);
      p.cls = kStructure;
      world.push_back(p);
    }
  }

  auto add_mover = [&](int cls, double speed, double length, double width,
                       double height) {
    Mover m;
    m.center = {layout.uniform(-cfg.ground_extent, cfg.ground_extent),
                layout.uniform(-cfg.ground_extent, cfg.ground_extent), 0.0};
    const double heading = layout.uniform(-M_PI, M_PI);
    m.velocity = {speed * std::cos(heading), speed * std::sin(heading), 0.0};
    m.length = length * layout.uniform(0.9, 1.1);
    m.width = width * layout.uniform(0.9, 1.1);
    m.height = height * layout.uniform(0.9, 1.1);
    m.yaw = heading;
    m.cls = cls;
    m.instance = next_instance++;
    movers.push_back(m);
    for (int k = 0; k < cfg.points_per_object; ++k) {
      WorldPoint p;
      p.base = sample_in_box(layout, m.center, m.length, m.width, m.height, m.yaw);
      p.velocity = m.velocity;
      p.cls = cls;
      p.instance = m.instance;
      world.push_back(p);
    }
  };

  for (int i = 0; i < cfg.vehicles; ++i)
    add_mover(kVehicle, cfg.vehicle_speed, 4.2, 1.8, 1.6);
  for (int i = 0; i < cfg.walkers; ++i)
    add_mover(kWalker, cfg.walker_speed, 0.5, 0.5, 1.7);

  // Ego track: first frame at the origin, constant speed, slow yaw drift.
  const int total = 2 * cfg.frames + 1;
  std::vector<Pose> poses(total);
  {
    Eigen::Vector3d position = Eigen::Vector3d::Zero();
    for (int f = 0; f < total; ++f) {
      const double heading = cfg.ego_yaw_rate * f;
      poses[f] = rotation_z(heading);
      poses[f].translation = position;
      position += cfg.ego_speed *
                  Eigen::Vector3d(std::cos(heading), std::sin(heading), 0.0);
    }
  }

  seqcloud::Sequence seq;
  seq.id = cfg.id.empty() ? "synth-" + std::to_string(cfg.seed) : cfg.id;
  seq.reference_index = static_cast<std::size_t>(cfg.frames);
  seq.poses = poses;

  for (int f = 0; f < total; ++f) {
    const int t = f - cfg.frames;
    const Pose to_sensor = poses[f].inverse();
    util::Rng obs(util::mix_seed(cfg.seed, 0x0b5eull << 32 | static_cast<std::uint32_t>(f)));

    seqcloud::Scan scan;
    scan.time_offset = t;
    for (const WorldPoint& wp : world) {
      const Eigen::Vector3d at_t = wp.base + wp.velocity * static_cast<double>(t);
      // Draw the per-point randomness unconditionally so visibility of one
      // point never shifts another point's noise.
      const double keep = obs.uniform();
      const Eigen::Vector3d noise{obs.normal(0.0, cfg.noise_sigma),
                                  obs.normal(0.0, cfg.noise_sigma),
                                  obs.normal(0.0, cfg.noise_sigma)};
      const double remission = obs.uniform();
      if ((at_t - poses[f].translation).norm() > cfg.sensor_range) continue;
      if (keep < cfg.dropout) continue;
      const Eigen::Vector3d local = to_sensor.apply(at_t) + noise;
      Point3 point{local.x(), local.y(), local.z(), remission};
      scan.points.push_back(point);
      scan.labels.push_back(seqcloud::make_label(
          static_cast<std::uint16_t>(wp.cls), wp.instance));
    }
    seq.scans.push_back(std::move(scan));
  }

  // Ground-truth boxes for the movers, in reference-frame coordinates.
  const Pose& ref = poses[static_cast<std::size_t>(cfg.frames)];
  const Pose to_ref = ref.inverse();
  for (const Mover& m : movers) {
    Box3D box;
    const Eigen::Vector3d center_w = m.center + Eigen::Vector3d(0, 0, 0.5 * m.height);
    box.center = to_ref.apply(center_w);
    box.length = m.length;
    box.width = m.width;
    box.height = m.height;
    box.yaw = normalize_yaw(m.yaw - cfg.ego_yaw_rate * cfg.frames);
    box.probs.assign(static_cast<std::size_t>(cfg.classes), 0.0);
    box.probs[static_cast<std::size_t>(m.cls)] = 1.0;
    box.teacher = -1;
    seq.box_labels.push_back(std::move(box));
  }

  return seq;
}

double effective_error(const SyntheticTeacherSpec& spec) {
  return std::clamp(spec.base_error - spec.range_gain * spec.range, 0.0, 1.0);
}

fusion::TeacherOutput synth_teacher_predict(const SyntheticTeacherSpec& spec,
                                            const seqcloud::Sequence& seq) {
  check_teacher(spec);
  const seqcloud::Scan& ref = seq.reference();
  if (ref.labels.empty())
    throw MissingGroundTruth("sequence '" + seq.id +
                             "' has no labels on the reference scan");

  const double eps = effective_error(spec);
  fusion::TeacherOutput out;
  out.teacher = spec.name;
  out.range = spec.range;
  out.probs.reserve(ref.points.size());
  for (std::size_t i = 0; i < ref.points.size(); ++i) {
    const int truth = seqcloud::semantic_class(ref.labels[i]);
    const std::uint64_t stream =
        spec.patch_radius > 0.0
            ? quantize_patch(ref.points[i].xyz(), spec.patch_radius)
            : i;
    util::Rng rng(util::mix_seed(spec.seed, stream));
    const int emitted = corrupt_class(rng, truth, kClasses, eps);
    out.probs.push_back(peaked_distribution(emitted, kClasses, spec.temperature));
  }
  return out;
}

std::vector<Box3D> synth_teacher_detect(const SyntheticTeacherSpec& spec,
                                        const seqcloud::Sequence& seq,
                                        int teacher_id) {
  check_teacher(spec);
  if (seq.box_labels.empty() && seq.reference().labels.empty())
    throw MissingGroundTruth("sequence '" + seq.id +
                             "' carries no ground truth to corrupt");

  const double eps = effective_error(spec);
  const std::uint64_t det_seed = util::mix_seed(spec.seed, 0xde7ull << 32);
  std::vector<Box3D> boxes;
  for (std::size_t i = 0; i < seq.box_labels.size(); ++i) {
    util::Rng rng(util::mix_seed(det_seed, i));
    const Box3D& truth = seq.box_labels[i];
    if (rng.uniform() < spec.det_miss_rate) continue;

    Box3D box = truth;
    box.center += Eigen::Vector3d(rng.normal(0.0, spec.det_center_sigma),
                                  rng.normal(0.0, spec.det_center_sigma),
                                  rng.normal(0.0, 0.5 * spec.det_center_sigma));
    box.yaw = normalize_yaw(box.yaw + rng.normal(0.0, spec.det_yaw_sigma));
    const int cls = corrupt_class(rng, truth.cls(), kClasses, eps);
    box.probs = peaked_distribution(cls, kClasses, spec.temperature);
    box.teacher = teacher_id;
    boxes.push_back(std::move(box));

    // Occasional hallucination, softer than a real hit so it ranks below.
    if (rng.uniform() < spec.det_fp_rate) {
      Box3D fp = truth;
      fp.center += Eigen::Vector3d(rng.uniform(4.0, 12.0), rng.uniform(4.0, 12.0),
                                   0.0);
      fp.yaw = normalize_yaw(rng.uniform(-M_PI, M_PI));
      const int fp_cls = rng.uniform() < 0.5 ? kVehicle : kWalker;
      fp.probs = peaked_distribution(fp_cls, kClasses, spec.temperature * 1.6 + 0.05);
      fp.teacher = teacher_id;
      boxes.push_back(std::move(fp));
    }
  }
  return boxes;
}

std::vector<SyntheticTeacherSpec> make_ensemble(int range, int count,
                                                const SyntheticTeacherSpec& base) {
  if (count < 1) throw ConfigError("ensemble needs at least one teacher");
  std::vector<SyntheticTeacherSpec> specs;
  for (int i = 0; i < count; ++i) {
    SyntheticTeacherSpec spec = base;
    spec.range = range;
    spec.seed = util::mix_seed(base.seed, static_cast<std::uint64_t>(i));
    spec.name = base.name + "-" + std::to_string(range) + "." + std::to_string(i);
    specs.push_back(std::move(spec));
  }
  return specs;
}

std::vector<SyntheticTeacherSpec> make_concordance(
    const std::vector<int>& ranges, const std::vector<double>& temperatures,
    const SyntheticTeacherSpec& base) {
  if (ranges.empty()) throw ConfigError("concordance needs at least one range");
  if (!temperatures.empty() && temperatures.size() != ranges.size())
    throw ConfigError("got " + std::to_string(temperatures.size()) +
                      " temperatures for " + std::to_string(ranges.size()) +
                      " ranges");
  std::vector<SyntheticTeacherSpec> specs;
  for (std::size_t i = 0; i < ranges.size(); ++i) {
    SyntheticTeacherSpec spec = base;
    spec.range = ranges[i];
    if (!temperatures.empty()) spec.temperature = temperatures[i];
    spec.seed = util::mix_seed(base.seed, 0xc0cull << 32 | i);
    spec.name = base.name + "-" + std::to_string(ranges[i]);
    specs.push_back(std::move(spec));
  }
  return specs;
}

}  // namespace concord::synthlab
