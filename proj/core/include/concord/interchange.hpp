#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "concord/detfuse.hpp"
#include "concord/errors.hpp"
#include "concord/evalkit.hpp"
#include "concord/fusion.hpp"

// File interchange. Every JSON-lines file opens with a header line
// {"schema": "<name>/<version>"}; single-document files carry the same key.
// Readers reject unknown schemas with SchemaMismatch and malformed content
// with DataError. Serialization is canonical (sorted keys, shortest
// round-trip numbers), so identical data produces identical bytes.
namespace concord::interchange {

inline constexpr const char* kSegPredsSchema = "concord.seg-preds/1";
inline constexpr const char* kSegFusedSchema = "concord.seg-fused/1";
inline constexpr const char* kDetPredsSchema = "concord.det-preds/1";
inline constexpr const char* kDetFusedSchema = "concord.det-fused/1";
inline constexpr const char* kMetricsSchema = "concord.metrics/1";
inline constexpr const char* kManifestSchema = "concord.manifest/1";
inline constexpr const char* kCompareSchema = "concord.compare/1";
inline constexpr const char* kSweepSchema = "concord.sweep/1";

struct SegPredsRecord {
  std::string sequence;
  int frame = 0;  // reference frame index within the sequence window
  fusion::TeacherOutput output;
};

void write_seg_preds(const std::filesystem::path& path,
                     const std::vector<SegPredsRecord>& records);
std::vector<SegPredsRecord> read_seg_preds(const std::filesystem::path& path);

struct SegFusedRecord {
  std::string sequence;
  int frame = 0;
  std::vector<fusion::PseudoLabel> labels;
};

void write_seg_fused(const std::filesystem::path& path,
                     const std::vector<SegFusedRecord>& records);
std::vector<SegFusedRecord> read_seg_fused(const std::filesystem::path& path);

struct DetPredsRecord {
  std::string sequence;
  int frame = 0;
  std::string teacher;
  std::vector<Box3D> boxes;
};

void write_det_preds(const std::filesystem::path& path,
                     const std::vector<DetPredsRecord>& records);
std::vector<DetPredsRecord> read_det_preds(const std::filesystem::path& path);

struct DetFusedRecord {
  std::string sequence;
  int frame = 0;
  std::vector<detfuse::FusedBox> boxes;
};

void write_det_fused(const std::filesystem::path& path,
                     const std::vector<DetFusedRecord>& records);
std::vector<DetFusedRecord> read_det_fused(const std::filesystem::path& path);

struct MetricsReport {
  std::string run;
  std::map<std::string, double> metrics;    // e.g. miou, ap
  std::map<std::string, double> per_class;  // e.g. iou/2
};

void write_metrics(const std::filesystem::path& path, const MetricsReport& report);
MetricsReport read_metrics(const std::filesystem::path& path);
std::string render_metrics(const MetricsReport& report);

struct ManifestEntry {
  std::string id;
  std::string dir;      // relative to the manifest's directory
  std::string split;    // "labeled", "unlabeled" or "eval"
  int frames = 0;       // scans cover offsets -frames..frames
};

struct Manifest {
  std::uint64_t seed = 0;
  std::vector<ManifestEntry> sequences;
};

void write_manifest(const std::filesystem::path& path, const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& path);

void write_comparison(const std::filesystem::path& path,
                      const evalkit::Comparison& comparison);
evalkit::Comparison read_comparison(const std::filesystem::path& path);

struct SweepPoint {
  double theta = 0.0;
  std::map<std::string, double> metrics;
};

void write_sweep(const std::filesystem::path& path,
                 const std::vector<SweepPoint>& points);
std::vector<SweepPoint> read_sweep(const std::filesystem::path& path);

}  // namespace concord::interchange
