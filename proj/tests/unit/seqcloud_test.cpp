#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <concord/errors.hpp>
#include <concord/seqcloud.hpp>
#include <concord/synthlab.hpp>
#include <concord/util/hash.hpp>

using namespace concord;

namespace fs = std::filesystem;

namespace {

fs::path test_dir(const char* leaf) {
  const fs::path dir = fs::temp_directory_path() / "concord-seqcloud" / leaf;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

seqcloud::Sequence two_scan_sequence() {
  seqcloud::Sequence seq;
  seq.id = "hand";
  seqcloud::Scan before;
  before.time_offset = -1;
  before.points.push_back({1.0, 0.0, 0.0, 0.5});
  before.labels.push_back(seqcloud::make_label(2, 7));
  seqcloud::Scan now;
  now.time_offset = 0;
  now.points.push_back({0.0, 1.0, 0.0, 0.25});
  now.labels.push_back(seqcloud::make_label(1));
  seq.scans = {before, now};
  seq.reference_index = 1;
  seq.poses.push_back(rotation_z(0.5));
  seq.poses.back().translation = {2.0, -1.0, 0.5};
  seq.poses.push_back(rotation_z(0.8));
  seq.poses.back().translation = {3.0, -0.5, 0.5};
  return seq;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

}  // namespace

TEST_SUITE("seqcloud") {

TEST_CASE("semantic and instance ids pack into one label word") {
  const auto label = seqcloud::make_label(3, 41);
  CHECK(seqcloud::semantic_class(label) == 3);
  CHECK(seqcloud::instance_id(label) == 41);
  CHECK(seqcloud::semantic_class(seqcloud::make_label(65535, 65535)) == 65535);
}

TEST_CASE("alignment maps scans into the reference frame") {
  const auto seq = two_scan_sequence();
  const auto aligned = seqcloud::align_sequence(seq);

  CHECK(aligned.aligned);
  // The reference scan is copied bit for bit.
  CHECK(aligned.reference().points[0].x == seq.reference().points[0].x);
  CHECK(aligned.reference().points[0].y == seq.reference().points[0].y);

  // Everything else goes through ref_pose^-1 * pose.
  const Eigen::Vector3d expected =
      seq.poses[1].inverse().apply(seq.poses[0].apply({1.0, 0.0, 0.0}));
  const Eigen::Vector3d got = aligned.scans[0].points[0].xyz();
  CHECK((got - expected).norm() <= 1e-12);

  // Labels, remissions and boxes ride along untouched.
  CHECK(aligned.scans[0].labels[0] == seq.scans[0].labels[0]);
  CHECK(aligned.scans[0].points[0].remission == 0.5);
}

TEST_CASE("scans sharing the reference pose skip the transform") {
  auto seq = two_scan_sequence();
  seq.poses[0] = seq.poses[1];
  const auto aligned = seqcloud::align_sequence(seq);
  CHECK(aligned.scans[0].points[0].x == seq.scans[0].points[0].x);
  CHECK(aligned.scans[0].points[0].y == seq.scans[0].points[0].y);
  CHECK(aligned.scans[0].points[0].z == seq.scans[0].points[0].z);
}

TEST_CASE("windows trim to the requested offsets") {
  auto cfg = synthlab::WorldConfig{};
  cfg.seed = 3;
  cfg.frames = 3;
  const auto seq = synthlab::generate_sequence(cfg);

  const auto trimmed = seqcloud::window(seq, 2, 1);
  CHECK(trimmed.min_offset() == -2);
  CHECK(trimmed.max_offset() == 1);
  CHECK(trimmed.reference().time_offset == 0);
  CHECK(trimmed.scans.size() == 4);
  CHECK(trimmed.poses.size() == 4);
  CHECK(trimmed.box_labels.size() == seq.box_labels.size());

  CHECK_THROWS_AS(seqcloud::window(seq, 4, 0), RangeExceedsSequence);
  CHECK_THROWS_AS(seqcloud::window(seq, -1, 0), RangeExceedsSequence);
}

TEST_CASE("validate rejects malformed sequences") {
  auto seq = two_scan_sequence();
  CHECK_NOTHROW(seqcloud::validate(seq));

  auto unordered = seq;
  std::swap(unordered.scans[0], unordered.scans[1]);
  CHECK_THROWS_AS(seqcloud::validate(unordered), InvalidSequence);

  auto no_reference = seq;
  for (auto& scan : no_reference.scans) scan.time_offset -= 5;
  CHECK_THROWS_AS(seqcloud::validate(no_reference), InvalidSequence);

  auto ragged = seq;
  ragged.scans[0].labels.push_back(0);
  CHECK_THROWS_AS(seqcloud::validate(ragged), InvalidSequence);

  auto poseless = seq;
  poseless.poses.pop_back();
  CHECK_THROWS_AS(seqcloud::validate(poseless), InvalidSequence);

  CHECK_THROWS_AS(seqcloud::validate(seqcloud::Sequence{}), InvalidSequence);
}

TEST_CASE("alignment needs poses with sane rotations") {
  auto seq = two_scan_sequence();
  seq.poses.clear();
  CHECK_THROWS_AS(seqcloud::align_sequence(seq), MissingPose);

  auto skewed = two_scan_sequence();
  skewed.poses[0].rotation(0, 0) = 2.0;
  CHECK_THROWS_AS(seqcloud::align_sequence(skewed), DegeneratePose);
}

TEST_CASE("kitti files round-trip bitwise") {
  const auto dir = test_dir("roundtrip");
  auto cfg = synthlab::WorldConfig{};
  cfg.seed = 21;
  cfg.frames = 1;
  const auto seq = synthlab::generate_sequence(cfg);

  seqcloud::write_kitti_sequence(dir / "a", seq);
  const auto loaded = seqcloud::load_kitti_sequence(dir / "a", 1, 1);
  seqcloud::write_kitti_sequence(dir / "b", loaded);

  for (const char* name : {"velodyne/000000.bin", "velodyne/000001.bin",
                           "velodyne/000002.bin", "labels/000000.label",
                           "labels/000002.label", "poses.txt", "calib.txt"}) {
    CHECK(util::hash_file(dir / "a" / name) == util::hash_file(dir / "b" / name));
  }
  CHECK(loaded.reference().size() == seq.reference().size());
  CHECK(loaded.scans[0].labels == seq.scans[0].labels);
}

TEST_CASE("kitti loaders reject malformed files with typed errors") {
  const auto dir = test_dir("malformed");
  fs::create_directories(dir / "seq" / "velodyne");
  fs::create_directories(dir / "seq" / "labels");

  const auto write = [&](const fs::path& rel, const std::string& bytes) {
    std::ofstream out(dir / "seq" / rel, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  };

  SUBCASE("bin not a multiple of 16 bytes") {
    write("velodyne/000000.bin", std::string(15, 'x'));
    CHECK_THROWS_AS(seqcloud::load_kitti_scan(dir / "seq/velodyne/000000.bin"),
                    TruncatedFile);
  }
  SUBCASE("label stream truncated") {
    write("velodyne/000000.bin", std::string(16, '\0'));
    write("labels/000000.label", std::string(3, '\0'));
    CHECK_THROWS_AS(
        seqcloud::load_kitti_scan(dir / "seq/velodyne/000000.bin",
                                  dir / "seq/labels/000000.label"),
        TruncatedFile);
  }
  SUBCASE("label count differs from point count") {
    write("velodyne/000000.bin", std::string(32, '\0'));
    write("labels/000000.label", std::string(4, '\0'));
    CHECK_THROWS_AS(
        seqcloud::load_kitti_scan(dir / "seq/velodyne/000000.bin",
                                  dir / "seq/labels/000000.label"),
        LabelCountMismatch);
  }
  SUBCASE("missing scan file") {
    CHECK_THROWS_AS(seqcloud::load_kitti_scan(dir / "seq/velodyne/none.bin"),
                    DataError);
  }
  SUBCASE("short pose line") {
    write("calib.txt", "Tr: 1 0 0 0 0 1 0 0 0 0 1 0\n");
    write("poses.txt", "1 0 0 0 0 1 0 0 0 0 1\n");
    CHECK_THROWS_AS(seqcloud::load_kitti_poses(dir / "seq/poses.txt",
                                               dir / "seq/calib.txt"),
                    DataError);
  }
  SUBCASE("garbage in a pose line") {
    write("calib.txt", "Tr: 1 0 0 0 0 1 0 0 0 0 1 0\n");
    write("poses.txt", "1 0 0 zero 0 1 0 0 0 0 1 0\n");
    CHECK_THROWS_AS(seqcloud::load_kitti_poses(dir / "seq/poses.txt",
                                               dir / "seq/calib.txt"),
                    DataError);
  }
  SUBCASE("calib without a Tr line") {
    write("calib.txt", "P0: 1 0 0 0 0 1 0 0 0 0 1 0\n");
    write("poses.txt", "1 0 0 0 0 1 0 0 0 0 1 0\n");
    CHECK_THROWS_AS(seqcloud::load_kitti_poses(dir / "seq/poses.txt",
                                               dir / "seq/calib.txt"),
                    DataError);
  }
  SUBCASE("window falling off the ends") {
    auto cfg = synthlab::WorldConfig{};
    cfg.frames = 1;
    seqcloud::write_kitti_sequence(dir / "tiny",
                                   synthlab::generate_sequence(cfg));
    CHECK_THROWS_AS(seqcloud::load_kitti_sequence(dir / "tiny", 0, 1),
                    BoundaryFrame);
    CHECK_THROWS_AS(seqcloud::load_kitti_sequence(dir / "tiny", 2, 1),
                    BoundaryFrame);
    CHECK_THROWS_AS(seqcloud::load_kitti_sequence(dir / "tiny", 1, -1),
                    ConfigError);
    CHECK_NOTHROW(seqcloud::load_kitti_sequence(dir / "tiny", 1, 1));
  }
}

TEST_CASE("poses pass through the calib transform") {
  const auto dir = test_dir("calib");
  const Pose tr = [] {
    Pose p = rotation_z(0.3);
    p.translation = {0.1, -0.2, 0.05};
    return p;
  }();
  const Pose cam = [] {
    Pose p = rotation_z(-0.7);
    p.translation = {4.0, 2.0, 0.0};
    return p;
  }();

  const auto fmt = [](const Pose& p) {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "%.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g "
                  "%.17g %.17g",
                  p.rotation(0, 0), p.rotation(0, 1), p.rotation(0, 2),
                  p.translation.x(), p.rotation(1, 0), p.rotation(1, 1),
                  p.rotation(1, 2), p.translation.y(), p.rotation(2, 0),
                  p.rotation(2, 1), p.rotation(2, 2), p.translation.z());
    return std::string(buf);
  };
  std::ofstream(dir / "calib.txt") << "Tr: " << fmt(tr) << "\n";
  std::ofstream(dir / "poses.txt") << fmt(cam) << "\n";

  const auto poses = seqcloud::load_kitti_poses(dir / "poses.txt",
                                                dir / "calib.txt");
  REQUIRE(poses.size() == 1);
  const Pose expected = tr.inverse().compose(cam).compose(tr);
  CHECK((poses[0].rotation - expected.rotation).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((poses[0].translation - expected.translation).norm() <= 1e-12);
}

TEST_CASE("labels are optional on disk") {
  const auto dir = test_dir("unlabeled");
  auto cfg = synthlab::WorldConfig{};
  cfg.frames = 1;
  auto seq = synthlab::generate_sequence(cfg);
  for (auto& scan : seq.scans) scan.labels.clear();
  seqcloud::write_kitti_sequence(dir / "seq", seq);
  CHECK(!fs::exists(dir / "seq" / "labels"));

  const auto loaded = seqcloud::load_kitti_sequence(dir / "seq", 1, 1);
  CHECK(!loaded.reference().has_labels());
  CHECK(slurp(dir / "seq" / "calib.txt").rfind("Tr:", 0) == 0);
}

}  // TEST_SUITE
