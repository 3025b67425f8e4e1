#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "concord/errors.hpp"

namespace concord::fusion {

struct FusionConfig {
  double lambda = 0.1;  // agreement weight, >= 0
  double theta = 0.7;   // selection threshold in [0, 1]
};

// Fused decision for one point (or one box cluster): the winning class, its
// confidence in (0, 1], and whether it survives the threshold. Unselected
// labels are Don't Care: kept in files but excluded from training.
struct PseudoLabel {
  int cls = -1;
  double confidence = 0.0;
  bool selected = false;
};

// One teacher's per-point class probabilities for a reference scan.
struct TeacherOutput {
  std::string teacher;
  int range = 0;  // temporal range n of the window [-n, n] the teacher saw
  std::vector<std::vector<double>> probs;  // [point][class]
};

// Probability vectors must be non-negative and sum to 1 within tol.
void validate(const TeacherOutput& output, double tol = 1e-6);

// Fuses one point's per-teacher probability vectors:
//   - the "strongest opinion" wins: the teacher holding the single highest
//     class probability provides the class k* and the base score y*;
//   - every other teacher whose own argmax equals k* adds lambda;
//   - the confidence is clipped to 1.
// Ties: lowest teacher position, then lowest class id.
PseudoLabel fuse_point(const std::vector<std::vector<double>>& teacher_probs,
                       const FusionConfig& config);

// Pointwise fuse_point across a scan. Teachers are fused in the order given;
// callers pass them sorted by teacher id.
std::vector<PseudoLabel> fuse_scan(const std::vector<TeacherOutput>& outputs,
                                   const FusionConfig& config);

// Re-applies the threshold: selected ⇔ confidence >= theta. Idempotent.
void select(std::vector<PseudoLabel>& labels, double theta);

enum class Provenance : std::uint8_t { human, pseudo };

// Per-sequence slice of the student training set: a class, confidence and
// selection flag for every reference-scan point.
struct DatasetEntry {
  std::string sequence_id;
  Provenance provenance = Provenance::human;
  std::vector<int> classes;
  std::vector<double> confidence;
  std::vector<std::uint8_t> selected;
};

// Human labels enter with confidence exactly 1 and all points selected.
DatasetEntry human_entry(std::string sequence_id, std::vector<int> classes);

DatasetEntry pseudo_entry(std::string sequence_id,
                          const std::vector<PseudoLabel>& labels);

struct PseudoDataset {
  std::vector<DatasetEntry> entries;

  std::size_t selected_count() const;
};

// Union of the human-labeled and pseudo-labeled sets. Sequence ids must be
// disjoint (throws DuplicateSequence).
PseudoDataset assemble_dataset(const std::vector<DatasetEntry>& labeled,
                               const std::vector<DatasetEntry>& pseudo);

}  // namespace concord::fusion
