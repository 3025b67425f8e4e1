#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "concord/detfuse.hpp"
#include "concord/errors.hpp"
#include "concord/evalkit.hpp"
#include "concord/featnet.hpp"
#include "concord/fusion.hpp"
#include "concord/interchange.hpp"
#include "concord/stindex.hpp"
#include "concord/synthlab.hpp"

// Disk pipeline: synth -> teach -> fuse-seg / fuse-det -> select -> train ->
// eval (-> compare / sweep). Every stage is content-addressed: it records the
// hashes of its config, inputs and outputs, re-runs are skipped when nothing
// changed, and a consumed file that no longer matches what its producer
// recorded raises StaleInput.
namespace concord::pipeline {

inline constexpr const char* kConfigSchema = "concord.config/1";
inline constexpr const char* kStageSchema = "concord.stage/1";
inline constexpr const char* kToolkitVersion = "0.1.0";
inline constexpr const char* kConfigEnvVar = "CONCORD_CONFIG";

struct TeacherSetup {
  std::string kind = "synthetic";           // "synthetic" or "trained"
  std::string arrangement = "concordance";  // "concordance" or "ensemble"
  std::vector<int> ranges = {1, 2, 3};
  std::vector<double> temperatures = {0.5, 0.4, 0.3};
  int ensemble_range = 2;
  int ensemble_count = 3;
  double ensemble_temperature = 0.4;
  double base_error = 0.59;
  double range_gain = 0.16;
  double patch_radius = 0.0;
  featnet::TrainConfig train;  // used when kind == "trained"
};

// Student window is [-past, 0]: the deployed model never sees future scans.
struct StudentSetup {
  int past = 2;
  int feature_dim = 32;
  std::vector<int> hidden = {32, 32};
  double time_scale = 1.0;
  stindex::IndexConfig index;
  featnet::TrainConfig train;
};

// Wide enough for the default teacher ranges {1, 2, 3}.
inline synthlab::WorldConfig default_pipeline_world() {
  synthlab::WorldConfig world;
  world.frames = 3;
  return world;
}

struct PipelineConfig {
  std::string run_name = "run";
  std::uint64_t seed = 1;
  std::string data_dir = "data";
  std::string out_dir = "out";
  int workers = 1;
  int sequence_count = 10;
  double labeled_fraction = 0.2;
  int eval_sequences = 2;
  synthlab::WorldConfig world = default_pipeline_world();
  TeacherSetup teachers;
  fusion::FusionConfig fusion;
  detfuse::ClusterConfig cluster;
  StudentSetup student;
  double match_iou = 0.7;
  evalkit::ApMode ap_mode = evalkit::ApMode::all_points;
  std::vector<double> sweep_thetas = {0.0, 0.3, 0.5, 0.7, 0.9, 0.99};
};

// Rejects unknown keys, wrong schema tags and out-of-range values with
// ConfigError so typos fail loudly.
PipelineConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const PipelineConfig& config);
std::string config_to_json(const PipelineConfig& config);
PipelineConfig config_from_json(const std::string& text);

enum class StageStatus { ran, skipped };

struct StageResult {
  StageStatus status = StageStatus::ran;
  std::vector<std::string> outputs;  // prefixed relative paths (data:/out:)
};

StageResult run_synth(const PipelineConfig& config);
StageResult run_teach(const PipelineConfig& config);
StageResult run_fuse_seg(const PipelineConfig& config);
StageResult run_fuse_det(const PipelineConfig& config);
StageResult run_select(const PipelineConfig& config);
StageResult run_train(const PipelineConfig& config);
StageResult run_eval(const PipelineConfig& config);
StageResult run_sweep(const PipelineConfig& config);

// Reads metric reports, writes the comparison next to them and returns it.
// Deltas are taken against the first report.
evalkit::Comparison run_compare(const std::vector<std::filesystem::path>& reports,
                                const std::filesystem::path& out_path);

// Runs fn(0..count-1) on a pool of `workers` threads (inline when workers
// <= 1). fn must not touch shared mutable state; exceptions are rethrown.
void parallel_for(int workers, std::size_t count,
                  const std::function<void(std::size_t)>& fn);

// --- in-memory study -------------------------------------------------------
//
// Desk-scale reproduction of the training-scheme orderings: one world, one
// 20/80 split, several teacher arrangements, one student architecture. All
// arms share the generated scenes, the extracted neighborhoods and the
// student init, so measured differences come from the teaching signal alone.

struct StudySetup {
  int train_sequences = 50;
  int eval_sequences = 10;
  double labeled_fraction = 0.2;
  synthlab::WorldConfig world;
  std::vector<int> ranges = {1, 2, 3};
  std::vector<double> temperatures = {0.5, 0.4, 0.3};
  int single_range = 2;        // position of the lone-teacher arm in `ranges`
  int ensemble_range = 2;
  int ensemble_count = 3;
  double ensemble_temperature = 0.4;
  double base_error = 0.59;
  double range_gain = 0.16;
  double lambda = 0.03;
  double concordance_theta = 0.92;
  double ensemble_theta = 0.82;
  double single_theta = 0.7;
  StudentSetup student;
};

// Knobs used by the shipped experiments; world frames cover the widest
// teacher, the student sees [-2, 0].
StudySetup default_study();

class Study {
 public:
  Study(const StudySetup& setup, std::uint64_t seed);

  // Each arm trains a fresh student from the shared init and returns its
  // mIoU on the held-out sequences.
  double supervised();
  double single_teacher();
  double ensemble();
  double concordance();
  double concordance_at(double theta);

  std::size_t labeled_points() const;
  std::size_t unlabeled_points() const;

 private:
  struct SeqData {
    std::vector<Eigen::Matrix4Xd> inputs;  // one 4xK block per reference point
    std::vector<int> truth;
  };

  double train_and_eval(
      const std::vector<std::vector<fusion::PseudoLabel>>* pseudo);
  std::vector<std::vector<fusion::PseudoLabel>> fuse_arm(
      const std::vector<std::vector<fusion::TeacherOutput>>& outputs,
      double theta) const;
  std::vector<std::vector<fusion::PseudoLabel>> fuse_single(double theta) const;

  StudySetup setup_;
  std::uint64_t seed_;
  std::vector<SeqData> labeled_;
  std::vector<SeqData> unlabeled_;
  std::vector<SeqData> eval_;
  // [unlabeled sequence][teacher position]
  std::vector<std::vector<fusion::TeacherOutput>> concord_outputs_;
  std::vector<std::vector<fusion::TeacherOutput>> ensemble_outputs_;
  int single_position_ = 1;
};

}  // namespace concord::pipeline
