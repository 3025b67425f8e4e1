#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <concord/errors.hpp>
#include <concord/interchange.hpp>
#include <concord/util/hash.hpp>

using namespace concord;

namespace fs = std::filesystem;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

fs::path test_dir(const char* leaf) {
  const fs::path dir = fs::temp_directory_path() / "concord-interchange" / leaf;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary);
  for (const auto& line : lines) out << line << "\n";
}

std::vector<interchange::SegPredsRecord> sample_seg_preds() {
  interchange::SegPredsRecord a;
  a.sequence = "seq-03";
  a.frame = 4;
  a.output.teacher = "teacher-2";
  a.output.range = 2;
  a.output.probs = {{1.0 / 3.0, 2.0 / 3.0}, {0.25, 0.75}};
  interchange::SegPredsRecord b;
  b.sequence = "seq-07";
  b.frame = 1;
  b.output.teacher = "teacher-1";
  b.output.range = 1;
  b.output.probs = {{0.9, 0.1}};
  return {a, b};
}

Box3D sample_box() {
  Box3D box;
  box.center = {1.5, -2.25, 0.8};
  box.length = 4.1;
  box.width = 1.9;
  box.height = 1.6;
  box.yaw = 0.37;
  box.probs = {0.2, 0.7, 0.1};
  box.teacher = 1;
  return box;
}

}  // namespace

TEST_SUITE("interchange") {

TEST_CASE("segmentation predictions round-trip bitwise") {
  const auto dir = test_dir("seg-preds");
  const auto records = sample_seg_preds();
  interchange::write_seg_preds(dir / "preds.jsonl", records);

  const auto loaded = interchange::read_seg_preds(dir / "preds.jsonl");
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].sequence == "seq-03");
  CHECK(loaded[0].frame == 4);
  CHECK(loaded[0].output.teacher == "teacher-2");
  CHECK(loaded[0].output.range == 2);
  CHECK(loaded[0].output.probs == records[0].output.probs);
  CHECK(loaded[1].output.probs == records[1].output.probs);

  // Canonical serialization: same data, same bytes.
  interchange::write_seg_preds(dir / "again.jsonl", loaded);
  CHECK(util::hash_file(dir / "preds.jsonl") == util::hash_file(dir / "again.jsonl"));
}

TEST_CASE("file starts with a schema header line") {
  const auto dir = test_dir("header");
  interchange::write_seg_preds(dir / "preds.jsonl", sample_seg_preds());
  std::ifstream in(dir / "preds.jsonl");
  std::string first;
  std::getline(in, first);
  CHECK(first == "{\"schema\":\"concord.seg-preds/1\"}");
}

TEST_CASE("fused segmentation labels keep selection flags") {
  const auto dir = test_dir("seg-fused");
  interchange::SegFusedRecord record;
  record.sequence = "seq-01";
  record.frame = 2;
  record.labels = {{3, 0.95, true}, {0, 0.41, false}, {1, 1.0, true}};
  interchange::write_seg_fused(dir / "fused.jsonl", {record});

  const auto loaded = interchange::read_seg_fused(dir / "fused.jsonl");
  REQUIRE(loaded.size() == 1);
  REQUIRE(loaded[0].labels.size() == 3);
  CHECK(loaded[0].labels[0].cls == 3);
  CHECK(loaded[0].labels[0].confidence == 0.95);
  CHECK(loaded[0].labels[0].selected);
  CHECK(!loaded[0].labels[1].selected);
  CHECK(loaded[0].labels[2].confidence == 1.0);

  interchange::write_seg_fused(dir / "again.jsonl", loaded);
  CHECK(util::hash_file(dir / "fused.jsonl") == util::hash_file(dir / "again.jsonl"));
}

TEST_CASE("ragged fused arrays are rejected") {
  const auto dir = test_dir("ragged");
  write_lines(dir / "bad.jsonl",
              {R"({"schema":"concord.seg-fused/1"})",
               R"({"sequence":"s","frame":0,"teacher":"fused",)"
               R"("labels":[1,2],"confidence":[0.5],"selected":[1,0]})"});
  CHECK_THROWS_AS(interchange::read_seg_fused(dir / "bad.jsonl"), DataError);
}

TEST_CASE("detection predictions round-trip bitwise") {
  const auto dir = test_dir("det-preds");
  interchange::DetPredsRecord record;
  record.sequence = "seq-11";
  record.frame = 0;
  record.teacher = "det-2";
  record.boxes = {sample_box()};
  interchange::write_det_preds(dir / "boxes.jsonl", {record});

  const auto loaded = interchange::read_det_preds(dir / "boxes.jsonl");
  REQUIRE(loaded.size() == 1);
  REQUIRE(loaded[0].boxes.size() == 1);
  const Box3D& box = loaded[0].boxes[0];
  CHECK(box.center == sample_box().center);
  CHECK(box.length == 4.1);
  CHECK(box.yaw == 0.37);
  CHECK(box.probs == sample_box().probs);
  CHECK(box.teacher == 1);

  interchange::write_det_preds(dir / "again.jsonl", loaded);
  CHECK(util::hash_file(dir / "boxes.jsonl") == util::hash_file(dir / "again.jsonl"));
}

TEST_CASE("fused detections carry class, confidence and selection") {
  const auto dir = test_dir("det-fused");
  detfuse::FusedBox fused;
  fused.box = sample_box();
  fused.label = {1, 0.87, true};
  interchange::DetFusedRecord record;
  record.sequence = "seq-05";
  record.frame = 3;
  record.boxes = {fused};
  interchange::write_det_fused(dir / "fused.jsonl", {record});

  const auto loaded = interchange::read_det_fused(dir / "fused.jsonl");
  REQUIRE(loaded.size() == 1);
  REQUIRE(loaded[0].boxes.size() == 1);
  CHECK(loaded[0].boxes[0].box.center == sample_box().center);
  CHECK(loaded[0].boxes[0].label.cls == 1);
  CHECK(loaded[0].boxes[0].label.confidence == 0.87);
  CHECK(loaded[0].boxes[0].label.selected);

  interchange::write_det_fused(dir / "again.jsonl", loaded);
  CHECK(util::hash_file(dir / "fused.jsonl") == util::hash_file(dir / "again.jsonl"));
}

TEST_CASE("metrics reports store missing values as null") {
  const auto dir = test_dir("metrics");
  interchange::MetricsReport report;
  report.run = "student-a";
  report.metrics = {{"miou", 0.7346}, {"ap", kNaN}};
  report.per_class = {{"iou/0", 0.9}, {"iou/3", kNaN}};
  interchange::write_metrics(dir / "metrics.json", report);

  std::ifstream in(dir / "metrics.json");
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  CHECK(text.find("\"ap\":null") != std::string::npos);
  CHECK(text.find("nan") == std::string::npos);

  const auto loaded = interchange::read_metrics(dir / "metrics.json");
  CHECK(loaded.run == "student-a");
  CHECK(loaded.metrics.at("miou") == 0.7346);
  CHECK(std::isnan(loaded.metrics.at("ap")));
  CHECK(std::isnan(loaded.per_class.at("iou/3")));

  interchange::write_metrics(dir / "again.json", loaded);
  CHECK(util::hash_file(dir / "metrics.json") == util::hash_file(dir / "again.json"));
}

TEST_CASE("metrics render as an aligned text block") {
  interchange::MetricsReport report;
  report.run = "baseline";
  report.metrics = {{"miou", 0.7346}, {"ap", 0.8333}};
  report.per_class = {{"iou/0", 0.5}};
  const std::string text = interchange::render_metrics(report);
  CHECK(text.find("run: baseline") != std::string::npos);
  CHECK(text.find("miou") != std::string::npos);
  CHECK(text.find("0.7346") != std::string::npos);
  CHECK(text.find("per class:") != std::string::npos);
}

TEST_CASE("manifest round-trips and validates splits") {
  const auto dir = test_dir("manifest");
  interchange::Manifest manifest;
  manifest.seed = 0xdeadbeefcafeull;
  manifest.sequences = {{"seq-00", "seqs/seq-00", "labeled", 2},
                        {"seq-01", "seqs/seq-01", "unlabeled", 2},
                        {"seq-02", "seqs/seq-02", "eval", 3}};
  interchange::write_manifest(dir / "manifest.json", manifest);

  const auto loaded = interchange::read_manifest(dir / "manifest.json");
  CHECK(loaded.seed == manifest.seed);
  REQUIRE(loaded.sequences.size() == 3);
  CHECK(loaded.sequences[0].split == "labeled");
  CHECK(loaded.sequences[2].dir == "seqs/seq-02");
  CHECK(loaded.sequences[2].frames == 3);

  write_lines(dir / "bad.json",
              {R"({"schema":"concord.manifest/1","seed":1,"sequences":)"
               R"([{"id":"x","dir":"x","split":"test","frames":2}]})"});
  CHECK_THROWS_AS(interchange::read_manifest(dir / "bad.json"), DataError);
}

TEST_CASE("comparisons and sweeps round-trip") {
  const auto dir = test_dir("compare");
  evalkit::Comparison comparison;
  comparison.runs = {{"base", {{"miou", 0.70}, {"ap", 0.50}}},
                     {"wide", {{"miou", 0.75}, {"ap", kNaN}}}};
  comparison.deltas = {{{"miou", 0.0}, {"ap", 0.0}},
                       {{"miou", 0.05}, {"ap", kNaN}}};
  interchange::write_comparison(dir / "compare.json", comparison);
  const auto loaded = interchange::read_comparison(dir / "compare.json");
  REQUIRE(loaded.runs.size() == 2);
  CHECK(loaded.runs[1].name == "wide");
  CHECK(loaded.runs[0].values.at("miou") == 0.70);
  CHECK(std::isnan(loaded.runs[1].values.at("ap")));
  CHECK(loaded.deltas[1].at("miou") == 0.05);

  std::vector<interchange::SweepPoint> sweep = {{0.0, {{"miou", 0.71}}},
                                                {0.9, {{"miou", 0.74}}}};
  interchange::write_sweep(dir / "sweep.json", sweep);
  const auto points = interchange::read_sweep(dir / "sweep.json");
  REQUIRE(points.size() == 2);
  CHECK(points[0].theta == 0.0);
  CHECK(points[1].metrics.at("miou") == 0.74);
}

TEST_CASE("readers reject wrong or missing schemas") {
  const auto dir = test_dir("schemas");
  write_lines(dir / "wrong.jsonl", {R"({"schema":"concord.seg-preds/9"})"});
  CHECK_THROWS_AS(interchange::read_seg_preds(dir / "wrong.jsonl"), SchemaMismatch);

  write_lines(dir / "other.jsonl", {R"({"schema":"concord.det-preds/1"})"});
  CHECK_THROWS_AS(interchange::read_seg_preds(dir / "other.jsonl"), SchemaMismatch);

  write_lines(dir / "untagged.jsonl", {R"({"sequence":"s","frame":0})"});
  CHECK_THROWS_AS(interchange::read_seg_preds(dir / "untagged.jsonl"), SchemaMismatch);

  write_lines(dir / "array.json", {R"([1,2,3])"});
  CHECK_THROWS_AS(interchange::read_metrics(dir / "array.json"), SchemaMismatch);
}

TEST_CASE("readers reject malformed content as data errors") {
  const auto dir = test_dir("malformed");
  std::ofstream(dir / "empty.jsonl");
  CHECK_THROWS_AS(interchange::read_seg_preds(dir / "empty.jsonl"), DataError);

  CHECK_THROWS_AS(interchange::read_seg_preds(dir / "absent.jsonl"), DataError);

  write_lines(dir / "garbage.jsonl",
              {R"({"schema":"concord.seg-preds/1"})", "not json at all"});
  CHECK_THROWS_AS(interchange::read_seg_preds(dir / "garbage.jsonl"), DataError);

  write_lines(dir / "missing-key.jsonl",
              {R"({"schema":"concord.seg-preds/1"})", R"({"sequence":"s"})"});
  CHECK_THROWS_AS(interchange::read_seg_preds(dir / "missing-key.jsonl"), DataError);

  // A structurally fine record whose rows are not distributions.
  write_lines(dir / "not-probs.jsonl",
              {R"({"schema":"concord.seg-preds/1"})",
               R"({"sequence":"s","frame":0,"teacher":"t","range":1,)"
               R"("probs":[[0.5,0.1]]})"});
  CHECK_THROWS_AS(interchange::read_seg_preds(dir / "not-probs.jsonl"), DataError);
}

}  // TEST_SUITE
