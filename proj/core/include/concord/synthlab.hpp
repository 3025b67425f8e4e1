#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "concord/errors.hpp"
#include "concord/fusion.hpp"
#include "concord/geometry.hpp"
#include "concord/seqcloud.hpp"

namespace concord::synthlab {

// A small urban-flavored scene: a ground plane, static walls/posts, and
// constant-velocity movers (vehicle-like boxes and pedestrian-like posts).
// Classes: 0 ground, 1 structure, 2 vehicle, 3 walker.
struct WorldConfig {
  std::uint64_t seed = 1;
  int frames = 2;           // scans at offsets -frames..frames
  int classes = 4;
  double ground_extent = 24.0;  // half side of the ground square, meters
  int ground_points = 260;
  int static_objects = 6;
  int vehicles = 3;
  int walkers = 3;
  int points_per_object = 40;
  double vehicle_speed = 1.1;   // m/frame, random heading per object
  double walker_speed = 0.25;
  double noise_sigma = 0.03;    // observation noise, meters
  double dropout = 0.1;         // per-point per-frame visibility dropout
  double ego_speed = 1.2;       // m/frame
  double ego_yaw_rate = 0.01;   // rad/frame
  double sensor_range = 26.0;
  std::string id;               // sequence id; empty derives one from the seed
};

// Scans in per-frame sensor coordinates, poses relative to the first frame,
// exact labels everywhere, and reference-frame boxes for the movers.
// Deterministic in the seed.
seqcloud::Sequence generate_sequence(const WorldConfig& cfg);

// Stochastic oracle standing in for a trained teacher: per point it emits a
// peaked distribution at the true class with probability 1 - eps and at a
// random wrong class otherwise, with eps = clamp(base_error -
// range_gain * range, 0, 1). Wider windows make better teachers.
struct SyntheticTeacherSpec {
  std::string name = "teacher";
  int range = 2;               // temporal window [-range, range]
  double base_error = 0.35;
  double range_gain = 0.08;
  double temperature = 0.4;    // softness of the emitted distribution
  double patch_radius = 0.0;   // > 0 correlates errors within spatial patches
  std::uint64_t seed = 1;
  // detection corruption
  double det_miss_rate = 0.1;
  double det_fp_rate = 0.05;
  double det_center_sigma = 0.15;
  double det_yaw_sigma = 0.05;
};

double effective_error(const SyntheticTeacherSpec& spec);

// Class distributions for the reference scan. Throws MissingGroundTruth when
// the reference scan carries no labels.
fusion::TeacherOutput synth_teacher_predict(const SyntheticTeacherSpec& spec,
                                            const seqcloud::Sequence& seq);

// Corrupted copies of the reference-frame ground-truth boxes: misses,
// center/yaw jitter, class noise, and hallucinated boxes at the configured
// rates. Throws MissingGroundTruth when the sequence has no boxes and no
// labels to witness ground truth.
std::vector<Box3D> synth_teacher_detect(const SyntheticTeacherSpec& spec,
                                        const seqcloud::Sequence& seq,
                                        int teacher_id);

// count teachers sharing one range and error rate but independent seeds.
std::vector<SyntheticTeacherSpec> make_ensemble(int range, int count,
                                                const SyntheticTeacherSpec& base);

// One teacher per range; temperatures[i] applies to ranges[i] so stronger
// (wider-range) teachers can also be the most opinionated.
std::vector<SyntheticTeacherSpec> make_concordance(
    const std::vector<int>& ranges, const std::vector<double>& temperatures,
    const SyntheticTeacherSpec& base);

}  // namespace concord::synthlab
