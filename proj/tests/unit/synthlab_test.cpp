#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include <concord/errors.hpp>
#include <concord/seqcloud.hpp>
#include <concord/synthlab.hpp>

using namespace concord;
using synthlab::SyntheticTeacherSpec;
using synthlab::WorldConfig;

namespace {

WorldConfig quiet_world(std::uint64_t seed) {
  WorldConfig cfg;
  cfg.seed = seed;
  cfg.frames = 2;
  cfg.noise_sigma = 0.0;
  cfg.dropout = 0.0;
  cfg.ground_extent = 8.0;
  cfg.sensor_range = 100.0;  // nothing ever leaves the field of view
  return cfg;
}

int argmax(const std::vector<double>& probs) {
  return static_cast<int>(std::max_element(probs.begin(), probs.end()) -
                          probs.begin());
}

double teacher_accuracy(const SyntheticTeacherSpec& spec,
                        const seqcloud::Sequence& seq) {
  const auto out = synthlab::synth_teacher_predict(spec, seq);
  const auto& ref = seq.reference();
  int correct = 0;
  for (std::size_t i = 0; i < out.probs.size(); ++i) {
    correct += argmax(out.probs[i]) == seqcloud::semantic_class(ref.labels[i]);
  }
  return static_cast<double>(correct) / static_cast<double>(out.probs.size());
}

}  // namespace

TEST_SUITE("synthlab") {

TEST_CASE("the same seed reproduces the world bitwise") {
  const auto a = synthlab::generate_sequence(quiet_world(5));
  const auto b = synthlab::generate_sequence(quiet_world(5));
  REQUIRE(a.scans.size() == b.scans.size());
  for (std::size_t s = 0; s < a.scans.size(); ++s) {
    REQUIRE(a.scans[s].size() == b.scans[s].size());
    for (std::size_t i = 0; i < a.scans[s].size(); ++i) {
      CHECK(a.scans[s].points[i].x == b.scans[s].points[i].x);
      CHECK(a.scans[s].labels[i] == b.scans[s].labels[i]);
    }
  }
  REQUIRE(a.box_labels.size() == b.box_labels.size());
  for (std::size_t i = 0; i < a.box_labels.size(); ++i) {
    CHECK(a.box_labels[i].center == b.box_labels[i].center);
    CHECK(a.box_labels[i].yaw == b.box_labels[i].yaw);
  }

  const auto c = synthlab::generate_sequence(quiet_world(6));
  CHECK(a.scans[0].points[0].x != c.scans[0].points[0].x);
}

TEST_CASE("static geometry coincides across frames once aligned") {
  auto cfg = quiet_world(7);
  cfg.vehicles = 0;
  cfg.walkers = 0;
  const auto seq = synthlab::generate_sequence(cfg);
  const auto aligned = seqcloud::align_sequence(seq);

  const auto& ref = aligned.reference();
  for (const auto& scan : aligned.scans) {
    REQUIRE(scan.size() == ref.size());  // nothing dropped, same world order
    for (std::size_t i = 0; i < scan.size(); ++i) {
      CHECK(std::abs(scan.points[i].x - ref.points[i].x) <= 1e-9);
      CHECK(std::abs(scan.points[i].y - ref.points[i].y) <= 1e-9);
      CHECK(std::abs(scan.points[i].z - ref.points[i].z) <= 1e-9);
    }
  }
}

TEST_CASE("movers advance by a constant velocity") {
  auto cfg = quiet_world(8);
  cfg.ground_points = 0;
  cfg.static_objects = 0;
  cfg.vehicles = 1;
  cfg.walkers = 0;
  cfg.ego_speed = 0.0;
  cfg.ego_yaw_rate = 0.0;  // sensor frame is the world frame
  const auto seq = synthlab::generate_sequence(cfg);

  REQUIRE(seq.scans.size() == 5);
  const auto& s0 = seq.scans[0];
  Eigen::Vector3d step = Eigen::Vector3d::Zero();
  for (std::size_t s = 1; s < seq.scans.size(); ++s) {
    REQUIRE(seq.scans[s].size() == s0.size());
    for (std::size_t i = 0; i < s0.size(); ++i) {
      const Eigen::Vector3d d = seq.scans[s].points[i].xyz() -
                                seq.scans[s - 1].points[i].xyz();
      if (s == 1 && i == 0) step = d;
      CHECK((d - step).norm() <= 1e-9);
    }
  }
  CHECK(std::abs(step.norm() - cfg.vehicle_speed) <= 1e-9);
}

TEST_CASE("ground-truth boxes cover the movers") {
  auto cfg = quiet_world(9);
  const auto seq = synthlab::generate_sequence(cfg);
  REQUIRE(seq.box_labels.size() ==
          static_cast<std::size_t>(cfg.vehicles + cfg.walkers));
  for (const auto& box : seq.box_labels) {
    const int cls = box.cls();
    CHECK((cls == 2 || cls == 3));
    CHECK(box.probs[static_cast<std::size_t>(cls)] == 1.0);
    CHECK(box.volume() > 0.0);
  }
}

TEST_CASE("teacher error tracks the configured epsilon") {
  auto cfg = quiet_world(10);
  cfg.ground_points = 5000;
  cfg.static_objects = 0;
  cfg.vehicles = 0;
  cfg.walkers = 0;
  cfg.frames = 1;

  SyntheticTeacherSpec spec;
  spec.base_error = 0.3;
  spec.range_gain = 0.05;
  spec.range = 3;
  CHECK(std::abs(synthlab::effective_error(spec) - 0.15) <= 1e-12);

  double correct = 0.0, total = 0.0;
  for (std::uint64_t seed = 1; seed <= 2; ++seed) {
    auto world = cfg;
    world.seed = seed;
    spec.seed = 100 + seed;
    const auto seq = synthlab::generate_sequence(world);
    correct += teacher_accuracy(spec, seq) * seq.reference().size();
    total += seq.reference().size();
  }
  CHECK(std::abs(correct / total - 0.85) <= 0.02);
}

TEST_CASE("wider windows make better teachers") {
  const auto seq = synthlab::generate_sequence(quiet_world(11));
  SyntheticTeacherSpec narrow;
  narrow.range = 1;
  narrow.base_error = 0.5;
  narrow.range_gain = 0.15;
  SyntheticTeacherSpec wide = narrow;
  wide.range = 3;
  CHECK(synthlab::effective_error(wide) < synthlab::effective_error(narrow));
  CHECK(teacher_accuracy(wide, seq) > teacher_accuracy(narrow, seq));
}

TEST_CASE("zero error with a cold temperature is one-hot truth") {
  const auto seq = synthlab::generate_sequence(quiet_world(12));
  SyntheticTeacherSpec spec;
  spec.base_error = 0.0;
  spec.range_gain = 0.0;
  spec.temperature = 0.0;
  const auto out = synthlab::synth_teacher_predict(spec, seq);
  const auto& ref = seq.reference();
  for (std::size_t i = 0; i < out.probs.size(); ++i) {
    const int truth = seqcloud::semantic_class(ref.labels[i]);
    CHECK(out.probs[i][static_cast<std::size_t>(truth)] == 1.0);
  }
}

TEST_CASE("full error never matches the truth") {
  const auto seq = synthlab::generate_sequence(quiet_world(13));
  SyntheticTeacherSpec spec;
  spec.base_error = 1.0;
  spec.range_gain = 0.0;
  const auto out = synthlab::synth_teacher_predict(spec, seq);
  const auto& ref = seq.reference();
  for (std::size_t i = 0; i < out.probs.size(); ++i) {
    CHECK(argmax(out.probs[i]) != seqcloud::semantic_class(ref.labels[i]));
  }
}

TEST_CASE("the emitted peak follows the temperature") {
  const auto seq = synthlab::generate_sequence(quiet_world(14));
  SyntheticTeacherSpec spec;
  spec.temperature = 0.4;
  const auto out = synthlab::synth_teacher_predict(spec, seq);
  // softmax of one-hot / tau over 4 classes
  const double peak = 1.0 / (1.0 + 3.0 * std::exp(-1.0 / 0.4));
  for (const auto& probs : out.probs) {
    CHECK(std::abs(*std::max_element(probs.begin(), probs.end()) - peak) <=
          1e-12);
  }
}

TEST_CASE("independent teachers disagree at the predicted rate") {
  auto cfg = quiet_world(15);
  cfg.ground_points = 5000;
  cfg.static_objects = 0;
  cfg.vehicles = 0;
  cfg.walkers = 0;
  cfg.frames = 1;
  const auto seq = synthlab::generate_sequence(cfg);

  SyntheticTeacherSpec a;
  a.base_error = 0.3;
  a.range_gain = 0.0;
  a.seed = 900;
  SyntheticTeacherSpec b = a;
  b.seed = 901;
  const auto pa = synthlab::synth_teacher_predict(a, seq);
  const auto pb = synthlab::synth_teacher_predict(b, seq);

  double disagree = 0.0;
  for (std::size_t i = 0; i < pa.probs.size(); ++i) {
    disagree += argmax(pa.probs[i]) != argmax(pb.probs[i]);
  }
  disagree /= static_cast<double>(pa.probs.size());
  // 2 eps (1 - eps) + eps^2 (C - 2) / (C - 1) with eps = 0.3, C = 4
  const double expected = 2 * 0.3 * 0.7 + 0.09 * 2.0 / 3.0;
  CHECK(std::abs(disagree - expected) <= 0.02);
}

TEST_CASE("detection teachers corrupt at the configured rates") {
  const auto seq = synthlab::generate_sequence(quiet_world(16));
  SyntheticTeacherSpec spec;
  spec.base_error = 0.0;
  spec.range_gain = 0.0;
  spec.det_miss_rate = 0.0;
  spec.det_fp_rate = 0.0;
  spec.det_center_sigma = 0.0;
  spec.det_yaw_sigma = 0.0;

  const auto faithful = synthlab::synth_teacher_detect(spec, seq, 4);
  REQUIRE(faithful.size() == seq.box_labels.size());
  for (std::size_t i = 0; i < faithful.size(); ++i) {
    CHECK(faithful[i].center == seq.box_labels[i].center);
    CHECK(faithful[i].length == seq.box_labels[i].length);
    CHECK(faithful[i].cls() == seq.box_labels[i].cls());
    CHECK(faithful[i].teacher == 4);
  }

  spec.det_miss_rate = 1.0;
  CHECK(synthlab::synth_teacher_detect(spec, seq, 4).empty());

  seqcloud::Sequence empty;
  empty.id = "empty";
  seqcloud::Scan scan;
  scan.time_offset = 0;
  scan.points.push_back({0, 0, 0, 0});
  empty.scans.push_back(scan);
  CHECK_THROWS_AS(synthlab::synth_teacher_detect(spec, empty, 0),
                  MissingGroundTruth);
  CHECK_THROWS_AS(synthlab::synth_teacher_predict(spec, empty),
                  MissingGroundTruth);
}

TEST_CASE("ensembles share a range, concordances ladder it") {
  SyntheticTeacherSpec base;
  base.name = "teacher";
  base.seed = 42;

  const auto ensemble = synthlab::make_ensemble(2, 3, base);
  REQUIRE(ensemble.size() == 3);
  for (const auto& spec : ensemble) CHECK(spec.range == 2);
  CHECK(ensemble[0].name == "teacher-2.0");
  CHECK(ensemble[2].name == "teacher-2.2");
  CHECK(ensemble[0].seed != ensemble[1].seed);
  CHECK(synthlab::make_ensemble(2, 1, base).size() == 1);
  CHECK_THROWS_AS(synthlab::make_ensemble(2, 0, base), ConfigError);

  const auto ladder = synthlab::make_concordance({1, 2, 3}, {0.5, 0.4, 0.3}, base);
  REQUIRE(ladder.size() == 3);
  CHECK(ladder[0].range == 1);
  CHECK(ladder[2].range == 3);
  CHECK(ladder[2].temperature == 0.3);
  CHECK(ladder[1].name == "teacher-2");
  CHECK_THROWS_AS(synthlab::make_concordance({}, {}, base), ConfigError);
  CHECK_THROWS_AS(synthlab::make_concordance({1, 2}, {0.5}, base), ConfigError);
}

TEST_CASE("world configs are validated") {
  auto cfg = quiet_world(1);
  cfg.classes = 5;
  CHECK_THROWS_AS(synthlab::generate_sequence(cfg), ConfigError);
  cfg = quiet_world(1);
  cfg.dropout = 1.0;
  CHECK_THROWS_AS(synthlab::generate_sequence(cfg), ConfigError);
  cfg = quiet_world(1);
  cfg.frames = -1;
  CHECK_THROWS_AS(synthlab::generate_sequence(cfg), ConfigError);
}

}  // TEST_SUITE
