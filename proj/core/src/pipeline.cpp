#include "concord/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "concord/seqcloud.hpp"
#include "concord/util/hash.hpp"
#include "concord/util/rng.hpp"

namespace concord::pipeline {

namespace fs = std::filesystem;

namespace {

using nlohmann::json;

// Fixed substreams off the pipeline seed, so stages agree on derived seeds
// without sharing state.
constexpr std::uint64_t kTrainWorldStream = 0x5e90ull << 32;
constexpr std::uint64_t kEvalWorldStream = 0xe7a1ull << 32;
constexpr std::uint64_t kTeacherStream = 0x7eacull << 32;
constexpr std::uint64_t kEnsembleStream = (0x7eacull << 32) | 1;
constexpr std::uint64_t kTeacherTrainStream = 0x7e77ull << 32;
constexpr std::uint64_t kStudentInitStream = (0x57d0ull << 32) | 1;
constexpr std::uint64_t kStudentShuffleStream = (0x57d0ull << 32) | 2;

// ---------------------------------------------------------------------------
// config <-> json

void require_keys(const json& j, const char* where,
                  std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be an object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* k : allowed)
      if (key == k) known = true;
    if (!known)
      throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

json train_to_json(const featnet::TrainConfig& t) {
  return json{{"epochs", t.epochs},
              {"batch_size", t.batch_size},
              {"learning_rate", t.learning_rate},
              {"momentum", t.momentum}};
}

void train_from_json(const json& j, const char* where, featnet::TrainConfig& t) {
  require_keys(j, where, {"epochs", "batch_size", "learning_rate", "momentum"});
  read_field(j, "epochs", t.epochs);
  read_field(j, "batch_size", t.batch_size);
  read_field(j, "learning_rate", t.learning_rate);
  read_field(j, "momentum", t.momentum);
}

json world_to_json(const synthlab::WorldConfig& w) {
  return json{{"frames", w.frames},
              {"ground_extent", w.ground_extent},
              {"ground_points", w.ground_points},
              {"static_objects", w.static_objects},
              {"vehicles", w.vehicles},
              {"walkers", w.walkers},
              {"points_per_object", w.points_per_object},
              {"vehicle_speed", w.vehicle_speed},
              {"walker_speed", w.walker_speed},
              {"noise_sigma", w.noise_sigma},
              {"dropout", w.dropout},
              {"ego_speed", w.ego_speed},
              {"ego_yaw_rate", w.ego_yaw_rate},
              {"sensor_range", w.sensor_range}};
}

void world_from_json(const json& j, synthlab::WorldConfig& w) {
  require_keys(j, "world",
               {"frames", "ground_extent", "ground_points", "static_objects",
                "vehicles", "walkers", "points_per_object", "vehicle_speed",
                "walker_speed", "noise_sigma", "dropout", "ego_speed",
                "ego_yaw_rate", "sensor_range"});
  read_field(j, "frames", w.frames);
  read_field(j, "ground_extent", w.ground_extent);
  read_field(j, "ground_points", w.ground_points);
  read_field(j, "static_objects", w.static_objects);
  read_field(j, "vehicles", w.vehicles);
  read_field(j, "walkers", w.walkers);
  read_field(j, "points_per_object", w.points_per_object);
  read_field(j, "vehicle_speed", w.vehicle_speed);
  read_field(j, "walker_speed", w.walker_speed);
  read_field(j, "noise_sigma", w.noise_sigma);
  read_field(j, "dropout", w.dropout);
  read_field(j, "ego_speed", w.ego_speed);
  read_field(j, "ego_yaw_rate", w.ego_yaw_rate);
  read_field(j, "sensor_range", w.sensor_range);
}

json teachers_to_json(const TeacherSetup& t) {
  return json{{"kind", t.kind},
              {"arrangement", t.arrangement},
              {"ranges", t.ranges},
              {"temperatures", t.temperatures},
              {"ensemble_range", t.ensemble_range},
              {"ensemble_count", t.ensemble_count},
              {"ensemble_temperature", t.ensemble_temperature},
              {"base_error", t.base_error},
              {"range_gain", t.range_gain},
              {"patch_radius", t.patch_radius},
              {"train", train_to_json(t.train)}};
}

void teachers_from_json(const json& j, TeacherSetup& t) {
  require_keys(j, "teachers",
               {"kind", "arrangement", "ranges", "temperatures", "ensemble_range",
                "ensemble_count", "ensemble_temperature", "base_error",
                "range_gain", "patch_radius", "train"});
  read_field(j, "kind", t.kind);
  read_field(j, "arrangement", t.arrangement);
  read_field(j, "ranges", t.ranges);
  read_field(j, "temperatures", t.temperatures);
  read_field(j, "ensemble_range", t.ensemble_range);
  read_field(j, "ensemble_count", t.ensemble_count);
  read_field(j, "ensemble_temperature", t.ensemble_temperature);
  read_field(j, "base_error", t.base_error);
  read_field(j, "range_gain", t.range_gain);
  read_field(j, "patch_radius", t.patch_radius);
  if (j.contains("train")) train_from_json(j.at("train"), "teachers.train", t.train);
}

json student_to_json(const StudentSetup& s) {
  return json{{"past", s.past},
              {"feature_dim", s.feature_dim},
              {"hidden", s.hidden},
              {"time_scale", s.time_scale},
              {"index",
               json{{"r0", s.index.radius.r0},
                    {"slope", s.index.radius.slope},
                    {"max_per_offset", s.index.max_per_offset}}},
              {"train", train_to_json(s.train)}};
}

void student_from_json(const json& j, StudentSetup& s) {
  require_keys(j, "student",
               {"past", "feature_dim", "hidden", "time_scale", "index", "train"});
  read_field(j, "past", s.past);
  read_field(j, "feature_dim", s.feature_dim);
  read_field(j, "hidden", s.hidden);
  read_field(j, "time_scale", s.time_scale);
  if (j.contains("index")) {
    const json& idx = j.at("index");
    require_keys(idx, "student.index", {"r0", "slope", "max_per_offset"});
    read_field(idx, "r0", s.index.radius.r0);
    read_field(idx, "slope", s.index.radius.slope);
    read_field(idx, "max_per_offset", s.index.max_per_offset);
  }
  if (j.contains("train")) train_from_json(j.at("train"), "student.train", s.train);
}

json config_to_json_doc(const PipelineConfig& c) {
  return json{
      {"schema", kConfigSchema},
      {"run_name", c.run_name},
      {"seed", c.seed},
      {"data_dir", c.data_dir},
      {"out_dir", c.out_dir},
      {"workers", c.workers},
      {"sequence_count", c.sequence_count},
      {"labeled_fraction", c.labeled_fraction},
      {"eval_sequences", c.eval_sequences},
      {"world", world_to_json(c.world)},
      {"teachers", teachers_to_json(c.teachers)},
      {"fusion", json{{"lambda", c.fusion.lambda}, {"theta", c.fusion.theta}}},
      {"cluster",
       json{{"iou_threshold", c.cluster.iou_threshold}, {"mutual", c.cluster.mutual}}},
      {"student", student_to_json(c.student)},
      {"match_iou", c.match_iou},
      {"ap_mode", c.ap_mode == evalkit::ApMode::forty_points ? "40" : "all"},
      {"sweep_thetas", c.sweep_thetas},
  };
}

void validate_config(const PipelineConfig& c) {
  if (c.workers < 1) throw ConfigError("workers must be >= 1");
  if (c.sequence_count < 1) throw ConfigError("sequence_count must be >= 1");
  if (!(c.labeled_fraction >= 0.0 && c.labeled_fraction <= 1.0))
    throw ConfigError("labeled_fraction must lie in [0, 1]");
  if (c.eval_sequences < 0) throw ConfigError("eval_sequences must be >= 0");
  const TeacherSetup& t = c.teachers;
  if (t.kind != "synthetic" && t.kind != "trained")
    throw ConfigError("teachers.kind must be 'synthetic' or 'trained'");
  if (t.arrangement != "concordance" && t.arrangement != "ensemble")
    throw ConfigError("teachers.arrangement must be 'concordance' or 'ensemble'");
  if (t.arrangement == "concordance") {
    if (t.ranges.empty()) throw ConfigError("teachers.ranges must not be empty");
    if (t.temperatures.size() != t.ranges.size())
      throw ConfigError("teachers.temperatures must match teachers.ranges");
    for (int r : t.ranges)
      if (r < 1 || r > c.world.frames)
        throw ConfigError("teacher range " + std::to_string(r) +
                          " exceeds the generated window of " +
                          std::to_string(c.world.frames) + " frames");
  } else {
    if (t.ensemble_count < 1) throw ConfigError("ensemble_count must be >= 1");
    if (t.ensemble_range < 1 || t.ensemble_range > c.world.frames)
      throw ConfigError("ensemble_range exceeds the generated window");
  }
  if (!(t.base_error >= 0.0 && t.base_error <= 1.0))
    throw ConfigError("base_error must lie in [0, 1]");
  if (t.range_gain < 0.0) throw ConfigError("range_gain must be >= 0");
  if (t.patch_radius < 0.0) throw ConfigError("patch_radius must be >= 0");
  if (!(c.fusion.lambda >= 0.0)) throw ConfigError("fusion.lambda must be >= 0");
  if (!(c.fusion.theta >= 0.0 && c.fusion.theta <= 1.0))
    throw ConfigError("fusion.theta must lie in [0, 1]");
  if (!(c.cluster.iou_threshold > 0.0 && c.cluster.iou_threshold <= 1.0))
    throw ConfigError("cluster.iou_threshold must lie in (0, 1]");
  const StudentSetup& s = c.student;
  if (s.past < 0) throw ConfigError("student.past must be >= 0");
  if (s.past > c.world.frames)
    throw ConfigError("student.past exceeds the generated window");
  if (s.feature_dim < 1) throw ConfigError("student.feature_dim must be >= 1");
  for (int h : s.hidden)
    if (h < 1) throw ConfigError("student.hidden widths must be >= 1");
  if (!(s.time_scale >= 0.0) || !std::isfinite(s.time_scale))
    throw ConfigError("student.time_scale must be finite and >= 0");
  if (!(s.index.radius.r0 > 0.0)) throw ConfigError("student.index.r0 must be > 0");
  if (s.index.radius.slope < 0.0)
    throw ConfigError("student.index.slope must be >= 0");
  if (!(c.match_iou > 0.0 && c.match_iou <= 1.0))
    throw ConfigError("match_iou must lie in (0, 1]");
  if (c.sweep_thetas.empty()) throw ConfigError("sweep_thetas must not be empty");
  for (double th : c.sweep_thetas)
    if (!(th >= 0.0 && th <= 1.0))
      throw ConfigError("sweep_thetas entries must lie in [0, 1]");
}

// ---------------------------------------------------------------------------
// stage records

// Artifact references are prefixed relative paths so records stay portable:
// "data:" resolves under data_dir, "out:" under out_dir.
std::string data_ref(const std::string& rel) { return "data:" + rel; }
std::string out_ref(const std::string& rel) { return "out:" + rel; }

fs::path resolve_ref(const PipelineConfig& c, const std::string& ref) {
  if (ref.rfind("data:", 0) == 0) return fs::path(c.data_dir) / ref.substr(5);
  if (ref.rfind("out:", 0) == 0) return fs::path(c.out_dir) / ref.substr(4);
  throw ConfigError("unprefixed artifact reference '" + ref + "'");
}

struct StageRecord {
  std::string stage;
  std::string config_hash;
  std::map<std::string, std::string> inputs;
  std::map<std::string, std::string> outputs;
};

fs::path record_path(const PipelineConfig& c, const std::string& stage) {
  return fs::path(c.out_dir) / ("stage-" + stage + ".json");
}

std::optional<StageRecord> load_record(const PipelineConfig& c,
                                       const std::string& stage) {
  const fs::path path = record_path(c, stage);
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::stringstream buf;
  buf << in.rdbuf();
  json j = json::parse(buf.str(), nullptr, false);
  if (j.is_discarded())
    throw DataError("stage record " + path.string() + " is not valid JSON");
  try {
    if (j.at("schema").get<std::string>() != kStageSchema)
      throw SchemaMismatch("stage record " + path.string() +
                           " has schema '" + j.at("schema").get<std::string>() + "'");
    StageRecord record;
    record.stage = j.at("stage").get<std::string>();
    record.config_hash = j.at("config_hash").get<std::string>();
    record.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    record.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
    return record;
  } catch (const json::exception& e) {
    throw DataError("malformed stage record " + path.string() + ": " + e.what());
  }
}

std::string hash_config_slice(const json& slice) {
  return util::hash_string(slice.dump());
}

std::string hash_ref(const PipelineConfig& c, const std::string& ref) {
  return util::hash_file(resolve_ref(c, ref));
}

bool file_hash_matches(const PipelineConfig& c, const std::string& ref,
                       const std::string& expected) {
  const fs::path path = resolve_ref(c, ref);
  std::error_code ec;
  if (!fs::exists(path, ec) || ec) return false;
  return util::hash_file(path) == expected;
}

// Verifies that every consumed artifact the upstream stage declared still
// hashes to what that stage recorded.
void check_upstream(const PipelineConfig& c, const std::string& upstream,
                    const std::vector<std::string>& consumed) {
  const auto record = load_record(c, upstream);
  if (!record)
    throw DataError("stage '" + upstream + "' has not been run (no record at " +
                    record_path(c, upstream).string() + ")");
  for (const std::string& ref : consumed) {
    const auto it = record->outputs.find(ref);
    if (it == record->outputs.end())
      throw DataError("input " + ref + " is not an output of stage '" +
                      upstream + "'; rerun that stage");
    const fs::path path = resolve_ref(c, ref);
    std::error_code ec;
    if (!fs::exists(path, ec) || ec)
      throw DataError("missing input " + path.string() + "; rerun stage '" +
                      upstream + "'");
    if (util::hash_file(path) != it->second)
      throw StaleInput(path.string() + " no longer matches what stage '" +
                       upstream + "' recorded; rerun that stage");
  }
}

bool stage_fresh(const PipelineConfig& c, const std::string& stage,
                 const std::string& config_hash,
                 const std::vector<std::string>& inputs) {
  const auto record = load_record(c, stage);
  if (!record || record->config_hash != config_hash) return false;
  std::set<std::string> recorded;
  for (const auto& [ref, hash] : record->inputs) recorded.insert(ref);
  if (recorded != std::set<std::string>(inputs.begin(), inputs.end())) return false;
  for (const auto& [ref, hash] : record->inputs)
    if (!file_hash_matches(c, ref, hash)) return false;
  for (const auto& [ref, hash] : record->outputs)
    if (!file_hash_matches(c, ref, hash)) return false;
  return true;
}

StageResult finish_stage(const PipelineConfig& c, const std::string& stage,
                         const std::string& config_hash,
                         const std::vector<std::string>& inputs,
                         const std::vector<std::string>& outputs) {
  json in_hashes = json::object();
  for (const std::string& ref : inputs) in_hashes[ref] = hash_ref(c, ref);
  json out_hashes = json::object();
  for (const std::string& ref : outputs) out_hashes[ref] = hash_ref(c, ref);
  const json record{
      {"schema", kStageSchema},
      {"stage", stage},
      {"version", kToolkitVersion},
      {"config", config_to_json_doc(c)},
      {"config_hash", config_hash},
      {"inputs", std::move(in_hashes)},
      {"outputs", std::move(out_hashes)},
  };
  std::ofstream out(record_path(c, stage), std::ios::binary);
  if (!out) throw DataError("cannot write " + record_path(c, stage).string());
  out << record.dump() << '\n';
  return StageResult{StageStatus::ran, outputs};
}

// ---------------------------------------------------------------------------
// dataset plumbing

std::string frame_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", index);
  return buf;
}

std::vector<std::string> sequence_refs(const interchange::ManifestEntry& entry) {
  std::vector<std::string> refs;
  const int count = 2 * entry.frames + 1;
  for (int f = 0; f < count; ++f) {
    refs.push_back(data_ref(entry.dir + "/velodyne/" + frame_name(f) + ".bin"));
    refs.push_back(data_ref(entry.dir + "/labels/" + frame_name(f) + ".label"));
  }
  refs.push_back(data_ref(entry.dir + "/poses.txt"));
  refs.push_back(data_ref(entry.dir + "/calib.txt"));
  refs.push_back(data_ref(entry.dir + "/boxes.jsonl"));
  return refs;
}

interchange::Manifest read_manifest_or_die(const PipelineConfig& c) {
  const fs::path path = fs::path(c.data_dir) / "manifest.json";
  std::error_code ec;
  if (!fs::exists(path, ec) || ec)
    throw DataError("no manifest at " + path.string() + "; run synth first");
  return interchange::read_manifest(path);
}

struct LoadedSequence {
  interchange::ManifestEntry entry;
  seqcloud::Sequence seq;
};

LoadedSequence load_sequence(const PipelineConfig& c,
                             const interchange::ManifestEntry& entry) {
  LoadedSequence loaded;
  loaded.entry = entry;
  const fs::path dir = fs::path(c.data_dir) / entry.dir;
  loaded.seq = seqcloud::load_kitti_sequence(dir, entry.frames, entry.frames);
  loaded.seq.id = entry.id;
  const fs::path boxes = dir / "boxes.jsonl";
  std::error_code ec;
  if (fs::exists(boxes, ec) && !ec) {
    const auto records = interchange::read_det_preds(boxes);
    if (records.size() != 1)
      throw DataError(boxes.string() + " must hold exactly one record");
    loaded.seq.box_labels = records.front().boxes;
  }
  return loaded;
}

std::vector<interchange::ManifestEntry> entries_with_split(
    const interchange::Manifest& manifest, const std::string& split) {
  std::vector<interchange::ManifestEntry> out;
  for (const auto& entry : manifest.sequences)
    if (entry.split == split) out.push_back(entry);
  return out;
}

// ---------------------------------------------------------------------------
// feature extraction shared by train, eval, sweep and the study

struct ExtractedSeq {
  std::string id;
  std::vector<Eigen::Matrix4Xd> inputs;
  std::vector<int> truth;  // -1 when the scan is unlabeled
};

ExtractedSeq extract_features(const seqcloud::Sequence& seq,
                              const StudentSetup& student) {
  const seqcloud::Sequence win = seqcloud::window(seq, student.past, 0);
  const seqcloud::Sequence aligned = seqcloud::align_sequence(win);
  const auto index = stindex::build_index(aligned, student.index);
  const seqcloud::Scan& ref = aligned.reference();

  ExtractedSeq out;
  out.id = seq.id;
  out.inputs.reserve(ref.size());
  out.truth.reserve(ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) {
    out.inputs.push_back(featnet::neighbor_inputs(index, ref.points[i],
                                                  student.past, 0,
                                                  student.time_scale));
    out.truth.push_back(ref.has_labels()
                            ? static_cast<int>(seqcloud::semantic_class(ref.labels[i]))
                            : -1);
  }
  return out;
}

featnet::ModelConfig student_model_config(const PipelineConfig& c) {
  featnet::ModelConfig model;
  model.classes = c.world.classes;
  model.feature_dim = c.student.feature_dim;
  model.hidden = c.student.hidden;
  model.past = c.student.past;
  model.future = 0;
  model.time_scale = c.student.time_scale;
  model.index = c.student.index;
  return model;
}

int predict_from_inputs(const featnet::PointModel& model,
                        const Eigen::Matrix4Xd& inputs) {
  const Eigen::VectorXd feature = featnet::featurize(model, inputs);
  const Eigen::MatrixXd logits = featnet::mlp_forward(model.head, feature);
  int best = 0;
  for (int k = 1; k < logits.rows(); ++k)
    if (logits(k, 0) > logits(best, 0)) best = k;
  return best;
}

// ---------------------------------------------------------------------------
// teachers

synthlab::SyntheticTeacherSpec base_teacher_spec(const PipelineConfig& c,
                                                 std::uint64_t stream) {
  synthlab::SyntheticTeacherSpec base;
  base.name = "teacher";
  base.base_error = c.teachers.base_error;
  base.range_gain = c.teachers.range_gain;
  base.patch_radius = c.teachers.patch_radius;
  base.seed = util::mix_seed(c.seed, stream);
  return base;
}

std::vector<synthlab::SyntheticTeacherSpec> teacher_specs(const PipelineConfig& c) {
  if (c.teachers.arrangement == "concordance") {
    return synthlab::make_concordance(c.teachers.ranges, c.teachers.temperatures,
                                      base_teacher_spec(c, kTeacherStream));
  }
  auto base = base_teacher_spec(c, kEnsembleStream);
  base.range = c.teachers.ensemble_range;
  base.temperature = c.teachers.ensemble_temperature;
  return synthlab::make_ensemble(c.teachers.ensemble_range,
                                 c.teachers.ensemble_count, base);
}

std::vector<std::string> teacher_names(const PipelineConfig& c) {
  std::vector<std::string> names;
  if (c.teachers.arrangement == "concordance") {
    for (int r : c.teachers.ranges) names.push_back("teacher-" + std::to_string(r));
  } else {
    for (int i = 0; i < c.teachers.ensemble_count; ++i)
      names.push_back("teacher-" + std::to_string(c.teachers.ensemble_range) +
                      "." + std::to_string(i));
  }
  return names;
}

std::vector<int> teacher_ranges(const PipelineConfig& c) {
  if (c.teachers.arrangement == "concordance") return c.teachers.ranges;
  return std::vector<int>(static_cast<std::size_t>(c.teachers.ensemble_count),
                          c.teachers.ensemble_range);
}

// Per-sequence teacher outputs keyed by sequence id, teachers in position
// order so fusion tie-breaks are stable.
using OutputsBySequence = std::map<std::string, std::vector<fusion::TeacherOutput>>;

OutputsBySequence group_seg_preds(const PipelineConfig& c,
                                  const std::vector<std::string>& names,
                                  std::vector<std::string>* order) {
  OutputsBySequence grouped;
  for (std::size_t t = 0; t < names.size(); ++t) {
    const fs::path path =
        fs::path(c.out_dir) / "teach" / (names[t] + ".segpreds.jsonl");
    const auto records = interchange::read_seg_preds(path);
    for (const auto& record : records) {
      auto& outputs = grouped[record.sequence];
      if (outputs.size() != t)
        throw DataError("teacher files disagree on sequence '" + record.sequence +
                        "'");
      outputs.push_back(record.output);
      if (t == 0 && order) order->push_back(record.sequence);
    }
  }
  for (const auto& [id, outputs] : grouped)
    if (outputs.size() != names.size())
      throw DataError("sequence '" + id + "' is missing teacher predictions");
  return grouped;
}

// ---------------------------------------------------------------------------
// sample assembly

void append_labeled_samples(const ExtractedSeq& data,
                            std::vector<featnet::TrainingSample>& samples) {
  for (std::size_t i = 0; i < data.inputs.size(); ++i) {
    if (data.truth[i] < 0)
      throw DataError("sequence '" + data.id + "' lacks labels for training");
    samples.push_back({data.inputs[i], data.truth[i], 1.0});
  }
}

void append_pseudo_samples(const ExtractedSeq& data,
                           const std::vector<fusion::PseudoLabel>& labels,
                           std::vector<featnet::TrainingSample>& samples) {
  if (labels.size() != data.inputs.size())
    throw DataError("sequence '" + data.id + "' has " +
                    std::to_string(labels.size()) + " pseudo-labels for " +
                    std::to_string(data.inputs.size()) + " points");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!labels[i].selected) continue;  // Don't Care: excluded, not down-weighted
    samples.push_back({data.inputs[i], labels[i].cls, labels[i].confidence});
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// config API

std::string config_to_json(const PipelineConfig& config) {
  return config_to_json_doc(config).dump() + "\n";
}

PipelineConfig config_from_json(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config is not valid JSON");
  PipelineConfig c;
  try {
    require_keys(j, "config",
                 {"schema", "run_name", "seed", "data_dir", "out_dir", "workers",
                  "sequence_count", "labeled_fraction", "eval_sequences", "world",
                  "teachers", "fusion", "cluster", "student", "match_iou",
                  "ap_mode", "sweep_thetas"});
    if (!j.contains("schema") || !j.at("schema").is_string())
      throw ConfigError("config carries no schema tag");
    if (j.at("schema").get<std::string>() != kConfigSchema)
      throw ConfigError("config schema '" + j.at("schema").get<std::string>() +
                        "' is not " + kConfigSchema);
    read_field(j, "run_name", c.run_name);
    read_field(j, "seed", c.seed);
    read_field(j, "data_dir", c.data_dir);
    read_field(j, "out_dir", c.out_dir);
    read_field(j, "workers", c.workers);
    read_field(j, "sequence_count", c.sequence_count);
    read_field(j, "labeled_fraction", c.labeled_fraction);
    read_field(j, "eval_sequences", c.eval_sequences);
    if (j.contains("world")) world_from_json(j.at("world"), c.world);
    if (j.contains("teachers")) teachers_from_json(j.at("teachers"), c.teachers);
    if (j.contains("fusion")) {
      require_keys(j.at("fusion"), "fusion", {"lambda", "theta"});
      read_field(j.at("fusion"), "lambda", c.fusion.lambda);
      read_field(j.at("fusion"), "theta", c.fusion.theta);
    }
    if (j.contains("cluster")) {
      require_keys(j.at("cluster"), "cluster", {"iou_threshold", "mutual"});
      read_field(j.at("cluster"), "iou_threshold", c.cluster.iou_threshold);
      read_field(j.at("cluster"), "mutual", c.cluster.mutual);
    }
    if (j.contains("student")) student_from_json(j.at("student"), c.student);
    read_field(j, "match_iou", c.match_iou);
    if (j.contains("ap_mode")) {
      const auto mode = j.at("ap_mode").get<std::string>();
      if (mode == "all") c.ap_mode = evalkit::ApMode::all_points;
      else if (mode == "40") c.ap_mode = evalkit::ApMode::forty_points;
      else throw ConfigError("ap_mode must be 'all' or '40'");
    }
    read_field(j, "sweep_thetas", c.sweep_thetas);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  validate_config(c);
  return c;
}

PipelineConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return config_from_json(buf.str());
}

void save_config(const fs::path& path, const PipelineConfig& config) {
  validate_config(config);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << config_to_json(config);
}

// ---------------------------------------------------------------------------
// parallel_for

void parallel_for(int workers, std::size_t count,
                  const std::function<void(std::size_t)>& fn) {
  if (count == 0) return;
  if (workers <= 1 || count == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  const std::size_t n_threads =
      std::min<std::size_t>(static_cast<std::size_t>(workers), count);
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr error;
  std::vector<std::thread> pool;
  pool.reserve(n_threads);
  for (std::size_t t = 0; t < n_threads; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= count) return;
        {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (error) return;
        }
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& thread : pool) thread.join();
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// stages

StageResult run_synth(const PipelineConfig& config) {
  validate_config(config);
  const json slice{{"seed", config.seed},
                   {"sequence_count", config.sequence_count},
                   {"labeled_fraction", config.labeled_fraction},
                   {"eval_sequences", config.eval_sequences},
                   {"world", world_to_json(config.world)}};
  const std::string config_hash = hash_config_slice(slice);

  const int n_labeled = std::clamp<int>(
      static_cast<int>(std::llround(config.labeled_fraction * config.sequence_count)),
      0, config.sequence_count);

  interchange::Manifest manifest;
  manifest.seed = config.seed;
  for (int i = 0; i < config.sequence_count; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "seq-%03d", i);
    manifest.sequences.push_back(
        {buf, buf, i < n_labeled ? "labeled" : "unlabeled", config.world.frames});
  }
  for (int i = 0; i < config.eval_sequences; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "eval-%03d", i);
    manifest.sequences.push_back({buf, buf, "eval", config.world.frames});
  }

  std::vector<std::string> outputs{data_ref("manifest.json")};
  for (const auto& entry : manifest.sequences) {
    const auto refs = sequence_refs(entry);
    outputs.insert(outputs.end(), refs.begin(), refs.end());
  }
  if (stage_fresh(config, "synth", config_hash, {}))
    return {StageStatus::skipped, outputs};

  fs::create_directories(config.data_dir);
  fs::create_directories(config.out_dir);
  parallel_for(config.workers, manifest.sequences.size(), [&](std::size_t i) {
    const auto& entry = manifest.sequences[i];
    synthlab::WorldConfig world = config.world;
    const bool is_eval = entry.split == "eval";
    const std::uint64_t stream = is_eval ? kEvalWorldStream : kTrainWorldStream;
    const std::uint64_t ordinal = static_cast<std::uint64_t>(
        is_eval ? i - static_cast<std::size_t>(config.sequence_count) : i);
    world.seed = util::mix_seed(config.seed, stream | ordinal);
    world.id = entry.id;
    const seqcloud::Sequence seq = synthlab::generate_sequence(world);
    const fs::path dir = fs::path(config.data_dir) / entry.dir;
    seqcloud::write_kitti_sequence(dir, seq);
    interchange::write_det_preds(dir / "boxes.jsonl",
                                 {{entry.id, 0, "gt", seq.box_labels}});
  });
  interchange::write_manifest(fs::path(config.data_dir) / "manifest.json", manifest);
  return finish_stage(config, "synth", config_hash, {}, outputs);
}

StageResult run_teach(const PipelineConfig& config) {
  validate_config(config);
  const bool trained = config.teachers.kind == "trained";
  const json slice{{"seed", config.seed},
                   {"teachers", teachers_to_json(config.teachers)},
                   {"student", student_to_json(config.student)}};
  const std::string config_hash = hash_config_slice(slice);

  const auto manifest = read_manifest_or_die(config);
  const auto labeled = entries_with_split(manifest, "labeled");
  const auto unlabeled = entries_with_split(manifest, "unlabeled");

  std::vector<std::string> inputs{data_ref("manifest.json")};
  for (const auto& entry : unlabeled) {
    const auto refs = sequence_refs(entry);
    inputs.insert(inputs.end(), refs.begin(), refs.end());
  }
  if (trained)
    for (const auto& entry : labeled) {
      const auto refs = sequence_refs(entry);
      inputs.insert(inputs.end(), refs.begin(), refs.end());
    }
  check_upstream(config, "synth", inputs);

  const auto names = teacher_names(config);
  std::vector<std::string> outputs;
  for (const auto& name : names) {
    outputs.push_back(out_ref("teach/" + name + ".segpreds.jsonl"));
    if (!trained) outputs.push_back(out_ref("teach/" + name + ".detpreds.jsonl"));
    if (trained) outputs.push_back(out_ref("teach/" + name + ".model.json"));
  }
  if (stage_fresh(config, "teach", config_hash, inputs))
    return {StageStatus::skipped, outputs};

  fs::create_directories(fs::path(config.out_dir) / "teach");

  std::vector<LoadedSequence> pool(unlabeled.size());
  parallel_for(config.workers, unlabeled.size(), [&](std::size_t i) {
    pool[i] = load_sequence(config, unlabeled[i]);
  });

  if (!trained) {
    const auto specs = teacher_specs(config);
    std::vector<std::vector<interchange::SegPredsRecord>> seg(specs.size());
    std::vector<std::vector<interchange::DetPredsRecord>> det(specs.size());
    for (auto& v : seg) v.resize(pool.size());
    for (auto& v : det) v.resize(pool.size());
    parallel_for(config.workers, specs.size() * pool.size(), [&](std::size_t k) {
      const std::size_t t = k / pool.size();
      const std::size_t s = k % pool.size();
      const auto& seq = pool[s].seq;
      seg[t][s] = {seq.id, 0, synthlab::synth_teacher_predict(specs[t], seq)};
      det[t][s] = {seq.id, 0, specs[t].name,
                   synthlab::synth_teacher_detect(specs[t], seq, static_cast<int>(t))};
    });
    for (std::size_t t = 0; t < specs.size(); ++t) {
      const fs::path base = fs::path(config.out_dir) / "teach";
      interchange::write_seg_preds(base / (names[t] + ".segpreds.jsonl"), seg[t]);
      interchange::write_det_preds(base / (names[t] + ".detpreds.jsonl"), det[t]);
    }
    return finish_stage(config, "teach", config_hash, inputs, outputs);
  }

  // Trained teachers: one compact net per position, fit on the labeled split
  // with the teacher's own window [-n, n], then run on the unlabeled split.
  if (labeled.empty())
    throw DataError("trained teachers need a labeled split to fit on");
  std::vector<LoadedSequence> labeled_pool(labeled.size());
  parallel_for(config.workers, labeled.size(), [&](std::size_t i) {
    labeled_pool[i] = load_sequence(config, labeled[i]);
  });

  const auto ranges = teacher_ranges(config);
  parallel_for(config.workers, ranges.size(), [&](std::size_t t) {
    const int range = ranges[t];
    featnet::ModelConfig model_config = student_model_config(config);
    model_config.past = range;
    model_config.future = range;

    std::vector<featnet::TrainingSample> samples;
    for (const auto& loaded : labeled_pool) {
      const seqcloud::Sequence win = seqcloud::window(loaded.seq, range, range);
      const seqcloud::Sequence aligned = seqcloud::align_sequence(win);
      const auto index = stindex::build_index(aligned, config.student.index);
      const seqcloud::Scan& ref = aligned.reference();
      if (!ref.has_labels())
        throw DataError("sequence '" + loaded.seq.id + "' lacks labels");
      for (std::size_t i = 0; i < ref.size(); ++i)
        samples.push_back(
            {featnet::neighbor_inputs(index, ref.points[i], range, range,
                                      config.student.time_scale),
             static_cast<int>(seqcloud::semantic_class(ref.labels[i])), 1.0});
    }

    featnet::PointModel model = featnet::init_model(
        model_config, util::mix_seed(config.seed, kTeacherTrainStream | (2 * t)));
    featnet::TrainConfig train = config.teachers.train;
    train.seed = util::mix_seed(config.seed, kTeacherTrainStream | (2 * t + 1));
    featnet::train(model, samples, train);

    const fs::path base = fs::path(config.out_dir) / "teach";
    featnet::save_model(model, base / (names[t] + ".model.json"));

    std::vector<interchange::SegPredsRecord> seg;
    for (const auto& loaded : pool) {
      const seqcloud::Sequence win = seqcloud::window(loaded.seq, range, range);
      const seqcloud::Sequence aligned = seqcloud::align_sequence(win);
      const auto index = stindex::build_index(aligned, config.student.index);
      fusion::TeacherOutput output;
      output.teacher = names[t];
      output.range = range;
      output.probs =
          featnet::predict_points(model, index, aligned.reference().points);
      seg.push_back({loaded.seq.id, 0, std::move(output)});
    }
    interchange::write_seg_preds(base / (names[t] + ".segpreds.jsonl"), seg);
  });
  return finish_stage(config, "teach", config_hash, inputs, outputs);
}

StageResult run_fuse_seg(const PipelineConfig& config) {
  validate_config(config);
  const json slice{{"fusion", json{{"lambda", config.fusion.lambda},
                                   {"theta", config.fusion.theta}}}};
  const std::string config_hash = hash_config_slice(slice);

  const auto names = teacher_names(config);
  std::vector<std::string> inputs;
  for (const auto& name : names)
    inputs.push_back(out_ref("teach/" + name + ".segpreds.jsonl"));
  check_upstream(config, "teach", inputs);

  const std::vector<std::string> outputs{out_ref("fused/seg.jsonl")};
  if (stage_fresh(config, "fuse-seg", config_hash, inputs))
    return {StageStatus::skipped, outputs};

  std::vector<std::string> order;
  const auto grouped = group_seg_preds(config, names, &order);
  if (order.empty())
    throw DataError("no unlabeled predictions to fuse (is the split 100/0?)");

  std::vector<interchange::SegFusedRecord> fused;
  fused.reserve(order.size());
  for (const auto& id : order)
    fused.push_back({id, 0, fusion::fuse_scan(grouped.at(id), config.fusion)});

  fs::create_directories(fs::path(config.out_dir) / "fused");
  interchange::write_seg_fused(fs::path(config.out_dir) / "fused/seg.jsonl", fused);
  return finish_stage(config, "fuse-seg", config_hash, inputs, outputs);
}

StageResult run_fuse_det(const PipelineConfig& config) {
  validate_config(config);
  if (config.teachers.kind == "trained")
    throw ConfigError(
        "trained teachers emit segmentation only; detection fusion needs "
        "synthetic teachers");
  const json slice{{"fusion", json{{"lambda", config.fusion.lambda},
                                   {"theta", config.fusion.theta}}},
                   {"cluster", json{{"iou_threshold", config.cluster.iou_threshold},
                                    {"mutual", config.cluster.mutual}}}};
  const std::string config_hash = hash_config_slice(slice);

  const auto names = teacher_names(config);
  std::vector<std::string> inputs;
  for (const auto& name : names)
    inputs.push_back(out_ref("teach/" + name + ".detpreds.jsonl"));
  check_upstream(config, "teach", inputs);

  const std::vector<std::string> outputs{out_ref("fused/det.jsonl")};
  if (stage_fresh(config, "fuse-det", config_hash, inputs))
    return {StageStatus::skipped, outputs};

  std::map<std::string, std::vector<Box3D>> pooled;
  std::vector<std::string> order;
  for (std::size_t t = 0; t < names.size(); ++t) {
    const fs::path path =
        fs::path(config.out_dir) / "teach" / (names[t] + ".detpreds.jsonl");
    for (const auto& record : interchange::read_det_preds(path)) {
      if (t == 0) order.push_back(record.sequence);
      auto& pool = pooled[record.sequence];
      pool.insert(pool.end(), record.boxes.begin(), record.boxes.end());
    }
  }
  if (order.empty())
    throw DataError("no detection predictions to fuse (is the split 100/0?)");

  detfuse::ClusterConfig cluster = config.cluster;
  cluster.fusion = config.fusion;
  std::vector<interchange::DetFusedRecord> fused;
  fused.reserve(order.size());
  for (const auto& id : order)
    fused.push_back({id, 0, detfuse::pseudo_label_frame(pooled.at(id), cluster)});

  fs::create_directories(fs::path(config.out_dir) / "fused");
  interchange::write_det_fused(fs::path(config.out_dir) / "fused/det.jsonl", fused);
  return finish_stage(config, "fuse-det", config_hash, inputs, outputs);
}

StageResult run_select(const PipelineConfig& config) {
  validate_config(config);
  const json slice{{"theta", config.fusion.theta}};
  const std::string config_hash = hash_config_slice(slice);

  const std::vector<std::string> inputs{out_ref("fused/seg.jsonl")};
  check_upstream(config, "fuse-seg", inputs);
  const std::vector<std::string> outputs{out_ref("selected/seg.jsonl")};
  if (stage_fresh(config, "select", config_hash, inputs))
    return {StageStatus::skipped, outputs};

  auto records =
      interchange::read_seg_fused(fs::path(config.out_dir) / "fused/seg.jsonl");
  for (auto& record : records)
    fusion::select(record.labels, config.fusion.theta);

  fs::create_directories(fs::path(config.out_dir) / "selected");
  interchange::write_seg_fused(fs::path(config.out_dir) / "selected/seg.jsonl",
                               records);
  return finish_stage(config, "select", config_hash, inputs, outputs);
}

StageResult run_train(const PipelineConfig& config) {
  validate_config(config);
  const json slice{{"seed", config.seed},
                   {"student", student_to_json(config.student)}};
  const std::string config_hash = hash_config_slice(slice);

  const auto manifest = read_manifest_or_die(config);
  const auto labeled = entries_with_split(manifest, "labeled");
  const auto unlabeled = entries_with_split(manifest, "unlabeled");

  std::vector<std::string> synth_inputs{data_ref("manifest.json")};
  for (const auto& entry : labeled) {
    const auto refs = sequence_refs(entry);
    synth_inputs.insert(synth_inputs.end(), refs.begin(), refs.end());
  }
  for (const auto& entry : unlabeled) {
    const auto refs = sequence_refs(entry);
    synth_inputs.insert(synth_inputs.end(), refs.begin(), refs.end());
  }
  check_upstream(config, "synth", synth_inputs);
  const std::vector<std::string> select_inputs{out_ref("selected/seg.jsonl")};
  check_upstream(config, "select", select_inputs);

  std::vector<std::string> inputs = synth_inputs;
  inputs.insert(inputs.end(), select_inputs.begin(), select_inputs.end());
  const std::vector<std::string> outputs{out_ref("student.model.json")};
  if (stage_fresh(config, "train", config_hash, inputs))
    return {StageStatus::skipped, outputs};

  const auto selected = interchange::read_seg_fused(
      fs::path(config.out_dir) / "selected/seg.jsonl");
  std::map<std::string, const std::vector<fusion::PseudoLabel>*> pseudo;
  for (const auto& record : selected) pseudo[record.sequence] = &record.labels;

  std::vector<ExtractedSeq> labeled_data(labeled.size());
  parallel_for(config.workers, labeled.size(), [&](std::size_t i) {
    labeled_data[i] = extract_features(load_sequence(config, labeled[i]).seq,
                                       config.student);
  });
  std::vector<ExtractedSeq> unlabeled_data(unlabeled.size());
  parallel_for(config.workers, unlabeled.size(), [&](std::size_t i) {
    unlabeled_data[i] = extract_features(load_sequence(config, unlabeled[i]).seq,
                                         config.student);
  });

  std::vector<featnet::TrainingSample> samples;
  for (const auto& data : labeled_data) append_labeled_samples(data, samples);
  for (const auto& data : unlabeled_data) {
    const auto it = pseudo.find(data.id);
    if (it == pseudo.end())
      throw DataError("no selected pseudo-labels for sequence '" + data.id + "'");
    append_pseudo_samples(data, *it->second, samples);
  }
  if (samples.empty())
    throw DataError("no training samples (no labels and nothing selected)");

  featnet::PointModel model = featnet::init_model(
      student_model_config(config), util::mix_seed(config.seed, kStudentInitStream));
  featnet::TrainConfig train = config.student.train;
  train.seed = util::mix_seed(config.seed, kStudentShuffleStream);
  featnet::train(model, samples, train);

  featnet::save_model(model, fs::path(config.out_dir) / "student.model.json");
  return finish_stage(config, "train", config_hash, inputs, outputs);
}

StageResult run_eval(const PipelineConfig& config) {
  validate_config(config);
  const json slice{{"run_name", config.run_name},
                   {"match_iou", config.match_iou},
                   {"ap_mode", config.ap_mode == evalkit::ApMode::forty_points
                                   ? "40"
                                   : "all"}};
  const std::string config_hash = hash_config_slice(slice);

  const auto manifest = read_manifest_or_die(config);
  const auto eval_entries = entries_with_split(manifest, "eval");
  const auto unlabeled = entries_with_split(manifest, "unlabeled");
  if (eval_entries.empty())
    throw DataError("manifest has no eval split; set eval_sequences >= 1");

  std::vector<std::string> synth_inputs{data_ref("manifest.json")};
  for (const auto& entry : eval_entries) {
    const auto refs = sequence_refs(entry);
    synth_inputs.insert(synth_inputs.end(), refs.begin(), refs.end());
  }
  for (const auto& entry : unlabeled) {
    const auto refs = sequence_refs(entry);
    synth_inputs.insert(synth_inputs.end(), refs.begin(), refs.end());
  }
  check_upstream(config, "synth", synth_inputs);
  const std::vector<std::string> train_inputs{out_ref("student.model.json")};
  check_upstream(config, "train", train_inputs);
  const std::vector<std::string> select_inputs{out_ref("selected/seg.jsonl")};
  check_upstream(config, "select", select_inputs);

  std::error_code ec;
  const bool have_det =
      fs::exists(fs::path(config.out_dir) / "fused/det.jsonl", ec) && !ec;
  std::vector<std::string> det_inputs;
  if (have_det) {
    det_inputs.push_back(out_ref("fused/det.jsonl"));
    check_upstream(config, "fuse-det", det_inputs);
  }

  std::vector<std::string> inputs = synth_inputs;
  inputs.insert(inputs.end(), train_inputs.begin(), train_inputs.end());
  inputs.insert(inputs.end(), select_inputs.begin(), select_inputs.end());
  inputs.insert(inputs.end(), det_inputs.begin(), det_inputs.end());
  const std::vector<std::string> outputs{out_ref("metrics.json"),
                                         out_ref("metrics.txt")};
  if (stage_fresh(config, "eval", config_hash, inputs))
    return {StageStatus::skipped, outputs};

  const featnet::PointModel model =
      featnet::load_model(fs::path(config.out_dir) / "student.model.json");
  if (model.config.classes != config.world.classes)
    throw DataError("student model was trained for " +
                    std::to_string(model.config.classes) + " classes, world has " +
                    std::to_string(config.world.classes));

  // Extraction follows the checkpoint's own window and radii so eval matches
  // whatever the model was trained with.
  StudentSetup eval_setup = config.student;
  eval_setup.past = model.config.past;
  eval_setup.time_scale = model.config.time_scale;
  eval_setup.index = model.config.index;

  evalkit::ConfusionMatrix cm(model.config.classes);
  std::vector<ExtractedSeq> eval_data(eval_entries.size());
  parallel_for(config.workers, eval_entries.size(), [&](std::size_t i) {
    eval_data[i] =
        extract_features(load_sequence(config, eval_entries[i]).seq, eval_setup);
  });
  for (const auto& data : eval_data) {
    std::vector<int> predicted(data.inputs.size());
    for (std::size_t i = 0; i < data.inputs.size(); ++i)
      predicted[i] = predict_from_inputs(model, data.inputs[i]);
    evalkit::accumulate(cm, data.truth, predicted);
  }

  interchange::MetricsReport report;
  report.run = config.run_name;
  report.metrics["miou"] = evalkit::miou(cm);
  const auto per_class = evalkit::per_class_iou(cm);
  for (std::size_t k = 0; k < per_class.size(); ++k)
    report.per_class["iou/" + std::to_string(k)] = per_class[k];

  // Pseudo-label quality on the unlabeled split, Don't-Care points excluded.
  const auto selected = interchange::read_seg_fused(
      fs::path(config.out_dir) / "selected/seg.jsonl");
  std::map<std::string, const interchange::SegFusedRecord*> by_id;
  for (const auto& record : selected) by_id[record.sequence] = &record;

  evalkit::ConfusionMatrix pseudo_cm(model.config.classes);
  std::size_t selected_count = 0, total_count = 0;
  std::map<int, std::vector<evalkit::DetectionRecord>> det_records;
  std::map<int, std::size_t> det_gt;
  std::map<std::string, std::vector<detfuse::FusedBox>> det_by_id;
  if (have_det) {
    for (const auto& record : interchange::read_det_fused(
             fs::path(config.out_dir) / "fused/det.jsonl"))
      det_by_id[record.sequence] = record.boxes;
  }

  for (const auto& entry : unlabeled) {
    const auto loaded = load_sequence(config, entry);
    const seqcloud::Scan& ref = loaded.seq.reference();
    const auto it = by_id.find(entry.id);
    if (it == by_id.end())
      throw DataError("no selected pseudo-labels for sequence '" + entry.id + "'");
    const auto& labels = it->second->labels;
    if (labels.size() != ref.size() || !ref.has_labels())
      throw DataError("pseudo-labels for '" + entry.id +
                      "' do not match the ground truth scan");
    std::vector<int> truth(ref.size()), predicted(ref.size());
    std::vector<std::uint8_t> mask(ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) {
      truth[i] = static_cast<int>(seqcloud::semantic_class(ref.labels[i]));
      predicted[i] = labels[i].selected ? labels[i].cls : 0;
      mask[i] = labels[i].selected ? 1 : 0;
      selected_count += labels[i].selected ? 1 : 0;
    }
    total_count += ref.size();
    evalkit::accumulate(pseudo_cm, truth, predicted, mask);

    if (have_det) {
      const auto det_it = det_by_id.find(entry.id);
      std::vector<Box3D> detections;
      if (det_it != det_by_id.end()) {
        for (const auto& fused : det_it->second) {
          if (!fused.label.selected) continue;
          Box3D det = fused.box;
          det.probs.assign(static_cast<std::size_t>(model.config.classes), 0.0);
          det.probs[static_cast<std::size_t>(fused.label.cls)] =
              fused.label.confidence;
          detections.push_back(std::move(det));
        }
      }
      for (const Box3D& gt : loaded.seq.box_labels) ++det_gt[gt.cls()];
      for (auto& [cls, records] : evalkit::match_detections(
               detections, loaded.seq.box_labels, config.match_iou)) {
        auto& pool = det_records[cls];
        pool.insert(pool.end(), records.begin(), records.end());
      }
    }
  }

  try {
    report.metrics["pseudo_miou"] = evalkit::miou(pseudo_cm);
  } catch (const EmptyMatrix&) {
    report.metrics["pseudo_miou"] = std::numeric_limits<double>::quiet_NaN();
  }
  report.metrics["selected_fraction"] =
      total_count == 0 ? std::numeric_limits<double>::quiet_NaN()
                       : static_cast<double>(selected_count) /
                             static_cast<double>(total_count);
  if (have_det) {
    double ap_sum = 0.0;
    std::size_t ap_classes = 0;
    for (const auto& [cls, count] : det_gt) {
      if (count == 0) continue;
      const auto it = det_records.find(cls);
      ap_sum += evalkit::average_precision(
          it == det_records.end() ? std::vector<evalkit::DetectionRecord>{}
                                  : it->second,
          count, config.ap_mode);
      ++ap_classes;
    }
    report.metrics["pseudo_ap"] =
        ap_classes == 0 ? std::numeric_limits<double>::quiet_NaN()
                        : ap_sum / static_cast<double>(ap_classes);
  }

  interchange::write_metrics(fs::path(config.out_dir) / "metrics.json", report);
  std::ofstream text(fs::path(config.out_dir) / "metrics.txt", std::ios::binary);
  if (!text) throw DataError("cannot write metrics.txt");
  text << interchange::render_metrics(report);
  text.close();
  return finish_stage(config, "eval", config_hash, inputs, outputs);
}

StageResult run_sweep(const PipelineConfig& config) {
  validate_config(config);
  const json slice{{"seed", config.seed},
                   {"lambda", config.fusion.lambda},
                   {"sweep_thetas", config.sweep_thetas},
                   {"student", student_to_json(config.student)}};
  const std::string config_hash = hash_config_slice(slice);

  const auto manifest = read_manifest_or_die(config);
  const auto labeled = entries_with_split(manifest, "labeled");
  const auto unlabeled = entries_with_split(manifest, "unlabeled");
  const auto eval_entries = entries_with_split(manifest, "eval");
  if (eval_entries.empty())
    throw DataError("manifest has no eval split; set eval_sequences >= 1");

  std::vector<std::string> synth_inputs{data_ref("manifest.json")};
  for (const auto* split : {&labeled, &unlabeled, &eval_entries})
    for (const auto& entry : *split) {
      const auto refs = sequence_refs(entry);
      synth_inputs.insert(synth_inputs.end(), refs.begin(), refs.end());
    }
  check_upstream(config, "synth", synth_inputs);

  const auto names = teacher_names(config);
  std::vector<std::string> teach_inputs;
  for (const auto& name : names)
    teach_inputs.push_back(out_ref("teach/" + name + ".segpreds.jsonl"));
  check_upstream(config, "teach", teach_inputs);

  std::vector<std::string> inputs = synth_inputs;
  inputs.insert(inputs.end(), teach_inputs.begin(), teach_inputs.end());
  const std::vector<std::string> outputs{out_ref("sweep.json")};
  if (stage_fresh(config, "sweep", config_hash, inputs))
    return {StageStatus::skipped, outputs};

  std::vector<std::string> order;
  const auto grouped = group_seg_preds(config, names, &order);
  if (order.empty())
    throw DataError("no unlabeled predictions to sweep over (is the split 100/0?)");

  std::vector<ExtractedSeq> labeled_data(labeled.size());
  parallel_for(config.workers, labeled.size(), [&](std::size_t i) {
    labeled_data[i] =
        extract_features(load_sequence(config, labeled[i]).seq, config.student);
  });
  std::vector<ExtractedSeq> unlabeled_data(order.size());
  std::map<std::string, const interchange::ManifestEntry*> entry_by_id;
  for (const auto& entry : unlabeled) entry_by_id[entry.id] = &entry;
  parallel_for(config.workers, order.size(), [&](std::size_t i) {
    const auto it = entry_by_id.find(order[i]);
    if (it == entry_by_id.end())
      throw DataError("predictions reference unknown sequence '" + order[i] + "'");
    unlabeled_data[i] =
        extract_features(load_sequence(config, *it->second).seq, config.student);
  });
  std::vector<ExtractedSeq> eval_data(eval_entries.size());
  parallel_for(config.workers, eval_entries.size(), [&](std::size_t i) {
    eval_data[i] =
        extract_features(load_sequence(config, eval_entries[i]).seq, config.student);
  });

  std::vector<interchange::SweepPoint> points;
  for (const double theta : config.sweep_thetas) {
    fusion::FusionConfig fcfg{config.fusion.lambda, theta};
    std::vector<featnet::TrainingSample> samples;
    for (const auto& data : labeled_data) append_labeled_samples(data, samples);
    evalkit::ConfusionMatrix pseudo_cm(config.world.classes);
    std::size_t selected_count = 0, total_count = 0;
    for (std::size_t s = 0; s < order.size(); ++s) {
      const auto labels = fusion::fuse_scan(grouped.at(order[s]), fcfg);
      append_pseudo_samples(unlabeled_data[s], labels, samples);
      std::vector<int> predicted(labels.size());
      std::vector<std::uint8_t> mask(labels.size());
      for (std::size_t i = 0; i < labels.size(); ++i) {
        predicted[i] = labels[i].selected ? labels[i].cls : 0;
        mask[i] = labels[i].selected ? 1 : 0;
        selected_count += labels[i].selected ? 1 : 0;
      }
      total_count += labels.size();
      evalkit::accumulate(pseudo_cm, unlabeled_data[s].truth, predicted, mask);
    }

    featnet::PointModel model = featnet::init_model(
        student_model_config(config),
        util::mix_seed(config.seed, kStudentInitStream));
    featnet::TrainConfig train = config.student.train;
    train.seed = util::mix_seed(config.seed, kStudentShuffleStream);
    featnet::train(model, samples, train);

    evalkit::ConfusionMatrix cm(config.world.classes);
    for (const auto& data : eval_data) {
      std::vector<int> predicted(data.inputs.size());
      for (std::size_t i = 0; i < data.inputs.size(); ++i)
        predicted[i] = predict_from_inputs(model, data.inputs[i]);
      evalkit::accumulate(cm, data.truth, predicted);
    }

    interchange::SweepPoint point;
    point.theta = theta;
    point.metrics["miou"] = evalkit::miou(cm);
    try {
      point.metrics["pseudo_miou"] = evalkit::miou(pseudo_cm);
    } catch (const EmptyMatrix&) {
      point.metrics["pseudo_miou"] = std::numeric_limits<double>::quiet_NaN();
    }
    point.metrics["selected_fraction"] =
        total_count == 0 ? std::numeric_limits<double>::quiet_NaN()
                         : static_cast<double>(selected_count) /
                               static_cast<double>(total_count);
    points.push_back(std::move(point));
  }

  interchange::write_sweep(fs::path(config.out_dir) / "sweep.json", points);
  return finish_stage(config, "sweep", config_hash, inputs, outputs);
}

evalkit::Comparison run_compare(const std::vector<fs::path>& reports,
                                const fs::path& out_path) {
  if (reports.size() < 2)
    throw ConfigError("compare needs at least two metric reports");
  std::vector<evalkit::RunMetrics> runs;
  for (const fs::path& path : reports) {
    const auto report = interchange::read_metrics(path);
    evalkit::RunMetrics run;
    run.name = report.run;
    run.values = report.metrics;
    for (const auto& [key, value] : report.per_class) run.values[key] = value;
    runs.push_back(std::move(run));
  }
  const auto comparison = evalkit::compare_runs(runs);
  interchange::write_comparison(out_path, comparison);
  fs::path text_path = out_path;
  text_path.replace_extension(".txt");
  std::ofstream text(text_path, std::ios::binary);
  if (!text) throw DataError("cannot write " + text_path.string());
  text << evalkit::render_table(comparison);
  return comparison;
}

// ---------------------------------------------------------------------------
// in-memory study

StudySetup default_study() {
  StudySetup setup;
  setup.world.frames = 3;
  setup.student.past = 2;
  setup.student.index.max_per_offset = 8;
  setup.student.train.epochs = 10;
  setup.student.train.batch_size = 64;
  setup.student.train.learning_rate = 0.02;
  setup.student.train.momentum = 0.9;
  return setup;
}

Study::Study(const StudySetup& setup, std::uint64_t seed)
    : setup_(setup), seed_(seed) {
  if (setup_.train_sequences < 1 || setup_.eval_sequences < 1)
    throw ConfigError("study needs at least one train and one eval sequence");
  if (setup_.ranges.empty() ||
      setup_.temperatures.size() != setup_.ranges.size())
    throw ConfigError("study temperatures must match ranges");
  for (int r : setup_.ranges)
    if (r < 1 || r > setup_.world.frames)
      throw ConfigError("study teacher range exceeds the generated window");
  if (setup_.student.past > setup_.world.frames)
    throw ConfigError("study student window exceeds the generated window");

  const auto pos = std::find(setup_.ranges.begin(), setup_.ranges.end(),
                             setup_.single_range);
  if (pos == setup_.ranges.end())
    throw ConfigError("study single_range must be one of the teacher ranges");
  single_position_ = static_cast<int>(pos - setup_.ranges.begin());

  synthlab::SyntheticTeacherSpec base;
  base.base_error = setup_.base_error;
  base.range_gain = setup_.range_gain;
  base.seed = util::mix_seed(seed_, kTeacherStream);
  const auto concord_specs =
      synthlab::make_concordance(setup_.ranges, setup_.temperatures, base);

  synthlab::SyntheticTeacherSpec ens_base = base;
  ens_base.seed = util::mix_seed(seed_, kEnsembleStream);
  ens_base.range = setup_.ensemble_range;
  ens_base.temperature = setup_.ensemble_temperature;
  const auto ensemble_specs = synthlab::make_ensemble(
      setup_.ensemble_range, setup_.ensemble_count, ens_base);

  const int n_labeled = std::clamp<int>(
      static_cast<int>(
          std::llround(setup_.labeled_fraction * setup_.train_sequences)),
      0, setup_.train_sequences);

  for (int i = 0; i < setup_.train_sequences; ++i) {
    synthlab::WorldConfig world = setup_.world;
    world.seed = util::mix_seed(seed_, kTrainWorldStream |
                                           static_cast<std::uint64_t>(i));
    world.id = "study-" + std::to_string(i);
    const seqcloud::Sequence seq = synthlab::generate_sequence(world);
    ExtractedSeq data = extract_features(seq, setup_.student);
    SeqData slot{std::move(data.inputs), std::move(data.truth)};
    if (i < n_labeled) {
      labeled_.push_back(std::move(slot));
      continue;
    }
    unlabeled_.push_back(std::move(slot));
    std::vector<fusion::TeacherOutput> concord;
    for (const auto& spec : concord_specs)
      concord.push_back(synthlab::synth_teacher_predict(spec, seq));
    concord_outputs_.push_back(std::move(concord));
    std::vector<fusion::TeacherOutput> ens;
    for (const auto& spec : ensemble_specs)
      ens.push_back(synthlab::synth_teacher_predict(spec, seq));
    ensemble_outputs_.push_back(std::move(ens));
  }

  for (int i = 0; i < setup_.eval_sequences; ++i) {
    synthlab::WorldConfig world = setup_.world;
    world.seed = util::mix_seed(seed_, kEvalWorldStream |
                                           static_cast<std::uint64_t>(i));
    world.id = "study-eval-" + std::to_string(i);
    const seqcloud::Sequence seq = synthlab::generate_sequence(world);
    ExtractedSeq data = extract_features(seq, setup_.student);
    eval_.push_back({std::move(data.inputs), std::move(data.truth)});
  }
}

std::size_t Study::labeled_points() const {
  std::size_t n = 0;
  for (const auto& seq : labeled_) n += seq.inputs.size();
  return n;
}

std::size_t Study::unlabeled_points() const {
  std::size_t n = 0;
  for (const auto& seq : unlabeled_) n += seq.inputs.size();
  return n;
}

std::vector<std::vector<fusion::PseudoLabel>> Study::fuse_arm(
    const std::vector<std::vector<fusion::TeacherOutput>>& outputs,
    double theta) const {
  fusion::FusionConfig cfg{setup_.lambda, theta};
  std::vector<std::vector<fusion::PseudoLabel>> fused;
  fused.reserve(outputs.size());
  for (const auto& per_seq : outputs)
    fused.push_back(fusion::fuse_scan(per_seq, cfg));
  return fused;
}

std::vector<std::vector<fusion::PseudoLabel>> Study::fuse_single(
    double theta) const {
  fusion::FusionConfig cfg{setup_.lambda, theta};
  std::vector<std::vector<fusion::PseudoLabel>> fused;
  fused.reserve(concord_outputs_.size());
  for (const auto& per_seq : concord_outputs_) {
    const std::vector<fusion::TeacherOutput> lone{
        per_seq[static_cast<std::size_t>(single_position_)]};
    fused.push_back(fusion::fuse_scan(lone, cfg));
  }
  return fused;
}

double Study::train_and_eval(
    const std::vector<std::vector<fusion::PseudoLabel>>* pseudo) {
  std::vector<featnet::TrainingSample> samples;
  for (std::size_t s = 0; s < labeled_.size(); ++s)
    for (std::size_t i = 0; i < labeled_[s].inputs.size(); ++i)
      samples.push_back({labeled_[s].inputs[i], labeled_[s].truth[i], 1.0});
  if (pseudo) {
    if (pseudo->size() != unlabeled_.size())
      throw ConfigError("pseudo-label blocks do not match the unlabeled split");
    for (std::size_t s = 0; s < unlabeled_.size(); ++s) {
      const auto& labels = (*pseudo)[s];
      if (labels.size() != unlabeled_[s].inputs.size())
        throw ConfigError("pseudo-label lengths do not match the scan");
      for (std::size_t i = 0; i < labels.size(); ++i) {
        if (!labels[i].selected) continue;
        samples.push_back(
            {unlabeled_[s].inputs[i], labels[i].cls, labels[i].confidence});
      }
    }
  }
  if (samples.empty()) throw DataError("study arm has no training samples");

  featnet::ModelConfig model_config;
  model_config.classes = setup_.world.classes;
  model_config.feature_dim = setup_.student.feature_dim;
  model_config.hidden = setup_.student.hidden;
  model_config.past = setup_.student.past;
  model_config.future = 0;
  model_config.time_scale = setup_.student.time_scale;
  model_config.index = setup_.student.index;

  featnet::PointModel model = featnet::init_model(
      model_config, util::mix_seed(seed_, kStudentInitStream));
  featnet::TrainConfig train = setup_.student.train;
  train.seed = util::mix_seed(seed_, kStudentShuffleStream);
  featnet::train(model, samples, train);

  evalkit::ConfusionMatrix cm(model_config.classes);
  for (const auto& seq : eval_) {
    std::vector<int> predicted(seq.inputs.size());
    for (std::size_t i = 0; i < seq.inputs.size(); ++i)
      predicted[i] = predict_from_inputs(model, seq.inputs[i]);
    evalkit::accumulate(cm, seq.truth, predicted);
  }
  return evalkit::miou(cm);
}

double Study::supervised() { return train_and_eval(nullptr); }

double Study::single_teacher() {
  const auto fused = fuse_single(setup_.single_theta);
  return train_and_eval(&fused);
}

double Study::ensemble() {
  const auto fused = fuse_arm(ensemble_outputs_, setup_.ensemble_theta);
  return train_and_eval(&fused);
}

double Study::concordance() { return concordance_at(setup_.concordance_theta); }

double Study::concordance_at(double theta) {
  const auto fused = fuse_arm(concord_outputs_, theta);
  return train_and_eval(&fused);
}

}  // namespace concord::pipeline
