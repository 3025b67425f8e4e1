#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "concord/errors.hpp"
#include "concord/geometry.hpp"

namespace concord::evalkit {

// Row = ground truth class, column = predicted class.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int classes);

  void add(int truth, int predicted, std::int64_t count = 1);
  std::int64_t at(int truth, int predicted) const;
  int classes() const { return classes_; }

 private:
  int classes_;
  std::vector<std::int64_t> cells_;
};

// Accumulates predictions; entries where mask is 0 are skipped. An empty
// mask means every point counts.
void accumulate(ConfusionMatrix& cm, const std::vector<int>& truth,
                const std::vector<int>& predicted,
                const std::vector<std::uint8_t>& mask = {});

// Per-class intersection over union, TP / (TP + FP + FN). Classes that never
// occur (truth or prediction) come back as NaN.
std::vector<double> per_class_iou(const ConfusionMatrix& cm);

// Mean IoU over the classes that occur. Throws EmptyMatrix when none do.
double miou(const ConfusionMatrix& cm);

struct DetectionRecord {
  double score = 0.0;
  bool true_positive = false;
};

enum class ApMode { all_points, forty_points };

// Average precision from scored detections against gt_count ground-truth
// objects. all_points integrates the interpolated precision envelope exactly;
// forty_points samples it at recalls 1/40 .. 40/40.
double average_precision(std::vector<DetectionRecord> records,
                         std::size_t gt_count,
                         ApMode mode = ApMode::all_points);

// Greedy score-ordered matching of detections to same-class ground truth at
// the given IoU. Each ground-truth box is consumed by at most one detection.
// Returns the per-class detection records keyed by class id.
std::map<int, std::vector<DetectionRecord>> match_detections(
    const std::vector<Box3D>& detections, const std::vector<Box3D>& truth,
    double match_iou = 0.7);

struct PRPoint {
  double precision = 0.0;
  double recall = 0.0;
};

struct APResult {
  std::vector<DetectionRecord> ranked;  // descending score
  std::vector<PRPoint> curve;
  double ap = 0.0;
};

// Box-level AP: class-aware matching pooled into one ranked list against all
// ground-truth boxes. Detections without truth give ap = 0; truth and
// detections both empty gives ap = NaN.
APResult evaluate_detections(const std::vector<Box3D>& detections,
                             const std::vector<Box3D>& truth,
                             double match_iou = 0.7,
                             ApMode mode = ApMode::all_points);

// Mean AP over the classes present in the ground truth.
double mean_average_precision(const std::vector<Box3D>& detections,
                              const std::vector<Box3D>& truth,
                              double match_iou = 0.7,
                              ApMode mode = ApMode::all_points);

// b - a per metric; the two runs must expose the same metric names
// (throws SchemaMismatch otherwise).
std::map<std::string, double> compare(const std::map<std::string, double>& a,
                                      const std::map<std::string, double>& b);

struct RunMetrics {
  std::string name;
  std::map<std::string, double> values;
};

// Metrics x runs with per-run deltas against the first run. Needs >= 2 runs
// exposing identical metric names.
struct Comparison {
  std::vector<RunMetrics> runs;
  std::vector<std::map<std::string, double>> deltas;  // deltas[i] = run i - run 0
};

Comparison compare_runs(const std::vector<RunMetrics>& runs);

// Aligned plain-text rendering of a comparison.
std::string render_table(const Comparison& comparison);

}  // namespace concord::evalkit
