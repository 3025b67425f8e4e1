#include "concord/interchange.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

namespace concord::interchange {

namespace {

using nlohmann::json;

json number_or_null(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

double null_or_number(const json& j) {
  if (j.is_null()) return std::numeric_limits<double>::quiet_NaN();
  return j.get<double>();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("short write to " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

json parse_json(const std::string& text, const std::filesystem::path& path) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded())
    throw DataError(path.string() + " is not valid JSON");
  return j;
}

void check_schema(const json& j, const char* expected,
                  const std::filesystem::path& path) {
  if (!j.is_object() || !j.contains("schema") || !j["schema"].is_string())
    throw SchemaMismatch(path.string() + " carries no schema tag");
  const auto got = j["schema"].get<std::string>();
  if (got != expected)
    throw SchemaMismatch(path.string() + " has schema '" + got +
                         "', expected '" + expected + "'");
}

void write_jsonl(const std::filesystem::path& path, const char* schema,
                 const std::vector<json>& records) {
  std::string text = json{{"schema", schema}}.dump();
  text += '\n';
  for (const json& record : records) {
    text += record.dump();
    text += '\n';
  }
  write_text(path, text);
}

std::vector<json> read_jsonl(const std::filesystem::path& path,
                             const char* schema) {
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line))
    throw DataError(path.string() + " is empty");
  check_schema(parse_json(line, path), schema, path);

  std::vector<json> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    records.push_back(parse_json(line, path));
  }
  return records;
}

json doc_read(const std::filesystem::path& path, const char* schema) {
  json j = parse_json(read_text(path), path);
  check_schema(j, schema, path);
  return j;
}

json box_to_json(const Box3D& box) {
  return json{
      {"center", {box.center.x(), box.center.y(), box.center.z()}},
      {"size", {box.length, box.width, box.height}},
      {"yaw", box.yaw},
      {"probs", box.probs},
      {"teacher", box.teacher},
  };
}

Box3D box_from_json(const json& j) {
  Box3D box;
  box.center = {j.at("center").at(0).get<double>(),
                j.at("center").at(1).get<double>(),
                j.at("center").at(2).get<double>()};
  box.length = j.at("size").at(0).get<double>();
  box.width = j.at("size").at(1).get<double>();
  box.height = j.at("size").at(2).get<double>();
  box.yaw = j.at("yaw").get<double>();
  box.probs = j.at("probs").get<std::vector<double>>();
  box.teacher = j.at("teacher").get<int>();
  return box;
}

json metric_map_to_json(const std::map<std::string, double>& m) {
  json out = json::object();
  for (const auto& [k, v] : m) out[k] = number_or_null(v);
  return out;
}

std::map<std::string, double> metric_map_from_json(const json& j) {
  std::map<std::string, double> out;
  for (const auto& [k, v] : j.items()) out[k] = null_or_number(v);
  return out;
}

// Wraps structural extraction so malformed records surface as DataError.
template <typename Fn>
auto structural(const std::filesystem::path& path, Fn&& fn) {
  try {
    return fn();
  } catch (const json::exception& e) {
    throw DataError("malformed record in " + path.string() + ": " + e.what());
  }
}

}  // namespace

void write_seg_preds(const std::filesystem::path& path,
                     const std::vector<SegPredsRecord>& records) {
  std::vector<json> lines;
  lines.reserve(records.size());
  for (const auto& record : records) {
    lines.push_back(json{
        {"sequence", record.sequence},
        {"frame", record.frame},
        {"teacher", record.output.teacher},
        {"range", record.output.range},
        {"probs", record.output.probs},
    });
  }
  write_jsonl(path, kSegPredsSchema, lines);
}

std::vector<SegPredsRecord> read_seg_preds(const std::filesystem::path& path) {
  return structural(path, [&] {
    std::vector<SegPredsRecord> records;
    for (const json& j : read_jsonl(path, kSegPredsSchema)) {
      SegPredsRecord record;
      record.sequence = j.at("sequence").get<std::string>();
      record.frame = j.at("frame").get<int>();
      record.output.teacher = j.at("teacher").get<std::string>();
      record.output.range = j.at("range").get<int>();
      record.output.probs = j.at("probs").get<std::vector<std::vector<double>>>();
      fusion::validate(record.output);
      records.push_back(std::move(record));
    }
    return records;
  });
}

void write_seg_fused(const std::filesystem::path& path,
                     const std::vector<SegFusedRecord>& records) {
  std::vector<json> lines;
  lines.reserve(records.size());
  for (const auto& record : records) {
    json labels = json::array();
    json confidence = json::array();
    json selected = json::array();
    for (const auto& label : record.labels) {
      labels.push_back(label.cls);
      confidence.push_back(label.confidence);
      selected.push_back(label.selected ? 1 : 0);
    }
    lines.push_back(json{
        {"sequence", record.sequence},
        {"frame", record.frame},
        {"teacher", "fused"},
        {"labels", std::move(labels)},
        {"confidence", std::move(confidence)},
        {"selected", std::move(selected)},
    });
  }
  write_jsonl(path, kSegFusedSchema, lines);
}

std::vector<SegFusedRecord> read_seg_fused(const std::filesystem::path& path) {
  return structural(path, [&] {
    std::vector<SegFusedRecord> records;
    for (const json& j : read_jsonl(path, kSegFusedSchema)) {
      SegFusedRecord record;
      record.sequence = j.at("sequence").get<std::string>();
      record.frame = j.at("frame").get<int>();
      const auto cls = j.at("labels").get<std::vector<int>>();
      const auto conf = j.at("confidence").get<std::vector<double>>();
      const auto sel = j.at("selected").get<std::vector<int>>();
      if (cls.size() != conf.size() || cls.size() != sel.size())
        throw DataError("ragged fused record in " + path.string());
      record.labels.resize(cls.size());
      for (std::size_t i = 0; i < cls.size(); ++i)
        record.labels[i] = {cls[i], conf[i], sel[i] != 0};
      records.push_back(std::move(record));
    }
    return records;
  });
}

void write_det_preds(const std::filesystem::path& path,
                     const std::vector<DetPredsRecord>& records) {
  std::vector<json> lines;
  lines.reserve(records.size());
  for (const auto& record : records) {
    json boxes = json::array();
    for (const Box3D& box : record.boxes) boxes.push_back(box_to_json(box));
    lines.push_back(json{
        {"sequence", record.sequence},
        {"frame", record.frame},
        {"teacher", record.teacher},
        {"boxes", std::move(boxes)},
    });
  }
  write_jsonl(path, kDetPredsSchema, lines);
}

std::vector<DetPredsRecord> read_det_preds(const std::filesystem::path& path) {
  return structural(path, [&] {
    std::vector<DetPredsRecord> records;
    for (const json& j : read_jsonl(path, kDetPredsSchema)) {
      DetPredsRecord record;
      record.sequence = j.at("sequence").get<std::string>();
      record.frame = j.at("frame").get<int>();
      record.teacher = j.at("teacher").get<std::string>();
      for (const json& b : j.at("boxes")) record.boxes.push_back(box_from_json(b));
      records.push_back(std::move(record));
    }
    return records;
  });
}

void write_det_fused(const std::filesystem::path& path,
                     const std::vector<DetFusedRecord>& records) {
  std::vector<json> lines;
  lines.reserve(records.size());
  for (const auto& record : records) {
    json boxes = json::array();
    for (const detfuse::FusedBox& fused : record.boxes) {
      json b = box_to_json(fused.box);
      b["cls"] = fused.label.cls;
      b["confidence"] = fused.label.confidence;
      b["selected"] = fused.label.selected ? 1 : 0;
      boxes.push_back(std::move(b));
    }
    lines.push_back(json{
        {"sequence", record.sequence},
        {"frame", record.frame},
        {"teacher", "fused"},
        {"boxes", std::move(boxes)},
    });
  }
  write_jsonl(path, kDetFusedSchema, lines);
}

std::vector<DetFusedRecord> read_det_fused(const std::filesystem::path& path) {
  return structural(path, [&] {
    std::vector<DetFusedRecord> records;
    for (const json& j : read_jsonl(path, kDetFusedSchema)) {
      DetFusedRecord record;
      record.sequence = j.at("sequence").get<std::string>();
      record.frame = j.at("frame").get<int>();
      for (const json& b : j.at("boxes")) {
        detfuse::FusedBox fused;
        fused.box = box_from_json(b);
        fused.label.cls = b.at("cls").get<int>();
        fused.label.confidence = b.at("confidence").get<double>();
        fused.label.selected = b.at("selected").get<int>() != 0;
        record.boxes.push_back(std::move(fused));
      }
      records.push_back(std::move(record));
    }
    return records;
  });
}

void write_metrics(const std::filesystem::path& path,
                   const MetricsReport& report) {
  json j{
      {"schema", kMetricsSchema},
      {"run", report.run},
      {"metrics", metric_map_to_json(report.metrics)},
      {"per_class", metric_map_to_json(report.per_class)},
  };
  write_text(path, j.dump() + "\n");
}

MetricsReport read_metrics(const std::filesystem::path& path) {
  return structural(path, [&] {
    const json j = doc_read(path, kMetricsSchema);
    MetricsReport report;
    report.run = j.at("run").get<std::string>();
    report.metrics = metric_map_from_json(j.at("metrics"));
    report.per_class = metric_map_from_json(j.at("per_class"));
    return report;
  });
}

std::string render_metrics(const MetricsReport& report) {
  std::string out = "run: " + report.run + "\n";
  const auto emit = [&](const std::map<std::string, double>& m) {
    std::size_t width = 0;
    for (const auto& [k, v] : m) width = std::max(width, k.size());
    for (const auto& [k, v] : m) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%-*s  %.4f\n", static_cast<int>(width),
                    k.c_str(), v);
      out += buf;
    }
  };
  emit(report.metrics);
  if (!report.per_class.empty()) {
    out += "per class:\n";
    emit(report.per_class);
  }
  return out;
}

void write_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  json sequences = json::array();
  for (const auto& entry : manifest.sequences) {
    sequences.push_back(json{
        {"id", entry.id},
        {"dir", entry.dir},
        {"split", entry.split},
        {"frames", entry.frames},
    });
  }
  json j{
      {"schema", kManifestSchema},
      {"seed", manifest.seed},
      {"sequences", std::move(sequences)},
  };
  write_text(path, j.dump() + "\n");
}

Manifest read_manifest(const std::filesystem::path& path) {
  return structural(path, [&] {
    const json j = doc_read(path, kManifestSchema);
    Manifest manifest;
    manifest.seed = j.at("seed").get<std::uint64_t>();
    for (const json& s : j.at("sequences")) {
      ManifestEntry entry;
      entry.id = s.at("id").get<std::string>();
      entry.dir = s.at("dir").get<std::string>();
      entry.split = s.at("split").get<std::string>();
      entry.frames = s.at("frames").get<int>();
      if (entry.split != "labeled" && entry.split != "unlabeled" &&
          entry.split != "eval")
        throw DataError("manifest split must be labeled, unlabeled or eval, got '" +
                        entry.split + "'");
      manifest.sequences.push_back(std::move(entry));
    }
    return manifest;
  });
}

void write_comparison(const std::filesystem::path& path,
                      const evalkit::Comparison& comparison) {
  json runs = json::array();
  for (const auto& run : comparison.runs)
    runs.push_back(json{{"name", run.name},
                        {"metrics", metric_map_to_json(run.values)}});
  json deltas = json::array();
  for (const auto& delta : comparison.deltas)
    deltas.push_back(metric_map_to_json(delta));
  json j{
      {"schema", kCompareSchema},
      {"runs", std::move(runs)},
      {"deltas", std::move(deltas)},
  };
  write_text(path, j.dump() + "\n");
}

evalkit::Comparison read_comparison(const std::filesystem::path& path) {
  return structural(path, [&] {
    const json j = doc_read(path, kCompareSchema);
    evalkit::Comparison comparison;
    for (const json& r : j.at("runs")) {
      evalkit::RunMetrics run;
      run.name = r.at("name").get<std::string>();
      run.values = metric_map_from_json(r.at("metrics"));
      comparison.runs.push_back(std::move(run));
    }
    for (const json& d : j.at("deltas"))
      comparison.deltas.push_back(metric_map_from_json(d));
    return comparison;
  });
}

void write_sweep(const std::filesystem::path& path,
                 const std::vector<SweepPoint>& points) {
  json arr = json::array();
  for (const auto& point : points)
    arr.push_back(json{{"theta", point.theta},
                       {"metrics", metric_map_to_json(point.metrics)}});
  json j{
      {"schema", kSweepSchema},
      {"parameter", "theta"},
      {"points", std::move(arr)},
  };
  write_text(path, j.dump() + "\n");
}

std::vector<SweepPoint> read_sweep(const std::filesystem::path& path) {
  return structural(path, [&] {
    const json j = doc_read(path, kSweepSchema);
    std::vector<SweepPoint> points;
    for (const json& p : j.at("points")) {
      SweepPoint point;
      point.theta = p.at("theta").get<double>();
      point.metrics = metric_map_from_json(p.at("metrics"));
      points.push_back(std::move(point));
    }
    return points;
  });
}

}  // namespace concord::interchange
