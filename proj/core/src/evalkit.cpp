#include "concord/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "concord/detfuse.hpp"

namespace concord::evalkit {

ConfusionMatrix::ConfusionMatrix(int classes) : classes_(classes) {
  if (classes < 1) throw ConfigError("confusion matrix needs >= 1 classes");
  cells_.assign(static_cast<std::size_t>(classes) * classes, 0);
}

void ConfusionMatrix::add(int truth, int predicted, std::int64_t count) {
  if (truth < 0 || truth >= classes_ || predicted < 0 || predicted >= classes_)
    throw DataError("class pair (" + std::to_string(truth) + ", " +
                    std::to_string(predicted) + ") outside " +
                    std::to_string(classes_) + " classes");
  cells_[static_cast<std::size_t>(truth) * classes_ + predicted] += count;
}

std::int64_t ConfusionMatrix::at(int truth, int predicted) const {
  if (truth < 0 || truth >= classes_ || predicted < 0 || predicted >= classes_)
    throw DataError("class pair (" + std::to_string(truth) + ", " +
                    std::to_string(predicted) + ") outside " +
                    std::to_string(classes_) + " classes");
  return cells_[static_cast<std::size_t>(truth) * classes_ + predicted];
}

void accumulate(ConfusionMatrix& cm, const std::vector<int>& truth,
                const std::vector<int>& predicted,
                const std::vector<std::uint8_t>& mask) {
  if (truth.size() != predicted.size())
    throw LengthMismatch("got " + std::to_string(truth.size()) +
                         " truth labels and " + std::to_string(predicted.size()) +
                         " predictions");
  if (!mask.empty() && mask.size() != truth.size())
    throw LengthMismatch("mask length " + std::to_string(mask.size()) +
                         " does not cover " + std::to_string(truth.size()) +
                         " labels");
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (!mask.empty() && mask[i] == 0) continue;
    cm.add(truth[i], predicted[i]);
  }
}

std::vector<double> per_class_iou(const ConfusionMatrix& cm) {
  const int classes = cm.classes();
  std::vector<double> iou(classes,
                          std::numeric_limits<double>::quiet_NaN());
  for (int k = 0; k < classes; ++k) {
    std::int64_t tp = cm.at(k, k);
    std::int64_t fn = 0;
    std::int64_t fp = 0;
    for (int j = 0; j < classes; ++j) {
      if (j == k) continue;
      fn += cm.at(k, j);
      fp += cm.at(j, k);
    }
    const std::int64_t denom = tp + fp + fn;
    if (denom > 0)
      iou[k] = static_cast<double>(tp) / static_cast<double>(denom);
  }
  return iou;
}

double miou(const ConfusionMatrix& cm) {
  double sum = 0.0;
  int present = 0;
  for (double v : per_class_iou(cm)) {
    if (std::isnan(v)) continue;
    sum += v;
    ++present;
  }
  if (present == 0)
    throw EmptyMatrix("no class occurs in the confusion matrix");
  return sum / present;
}

double average_precision(std::vector<DetectionRecord> records,
                         std::size_t gt_count, ApMode mode) {
  if (gt_count == 0)
    throw DataError("average precision needs at least one ground-truth object");
  if (records.empty()) return 0.0;

  std::stable_sort(records.begin(), records.end(),
                   [](const DetectionRecord& a, const DetectionRecord& b) {
                     return a.score > b.score;
                   });

  std::vector<double> precision(records.size());
  std::vector<double> recall(records.size());
  std::size_t tp = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].true_positive) ++tp;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(gt_count);
  }

  // Interpolated envelope: precision at recall r is the best precision seen
  // at any recall >= r.
  std::vector<double> envelope(precision);
  for (std::size_t i = records.size() - 1; i-- > 0;)
    envelope[i] = std::max(envelope[i], envelope[i + 1]);

  if (mode == ApMode::all_points) {
    double ap = 0.0;
    double prev_recall = 0.0;
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (recall[i] > prev_recall) {
        ap += (recall[i] - prev_recall) * envelope[i];
        prev_recall = recall[i];
      }
    }
    return ap;
  }

  double ap = 0.0;
  for (int k = 1; k <= 40; ++k) {
    const double r = static_cast<double>(k) / 40.0;
    double p = 0.0;
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (recall[i] >= r - 1e-12) {
        p = envelope[i];
        break;
      }
    }
    ap += p;
  }
  return ap / 40.0;
}

std::map<int, std::vector<DetectionRecord>> match_detections(
    const std::vector<Box3D>& detections, const std::vector<Box3D>& truth,
    double match_iou) {
  if (!(match_iou > 0.0 && match_iou <= 1.0))
    throw ConfigError("match_iou must lie in (0, 1], got " +
                      std::to_string(match_iou));

  std::vector<std::size_t> order(detections.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) {
                     return detections[i].score() > detections[j].score();
                   });

  std::vector<bool> consumed(truth.size(), false);
  std::map<int, std::vector<DetectionRecord>> records;
  for (std::size_t idx : order) {
    const Box3D& det = detections[idx];
    const int cls = det.cls();
    if (cls < 0)
      throw DataError("detection " + std::to_string(idx) +
                      " has no class probabilities");

    double best_iou = 0.0;
    std::size_t best_gt = truth.size();
    for (std::size_t g = 0; g < truth.size(); ++g) {
      if (consumed[g] || truth[g].cls() != cls) continue;
      const double overlap = detfuse::iou3d(det, truth[g]);
      if (overlap > best_iou) {
        best_iou = overlap;
        best_gt = g;
      }
    }

    DetectionRecord record;
    record.score = det.score();
    record.true_positive = best_gt < truth.size() && best_iou >= match_iou;
    if (record.true_positive) consumed[best_gt] = true;
    records[cls].push_back(record);
  }
  return records;
}

APResult evaluate_detections(const std::vector<Box3D>& detections,
                             const std::vector<Box3D>& truth, double match_iou,
                             ApMode mode) {
  APResult result;
  if (truth.empty()) {
    result.ap = detections.empty()
                    ? std::numeric_limits<double>::quiet_NaN()
                    : 0.0;
    return result;
  }

  for (const auto& [cls, records] : match_detections(detections, truth, match_iou))
    result.ranked.insert(result.ranked.end(), records.begin(), records.end());
  std::stable_sort(result.ranked.begin(), result.ranked.end(),
                   [](const DetectionRecord& a, const DetectionRecord& b) {
                     return a.score > b.score;
                   });

  std::size_t tp = 0;
  result.curve.reserve(result.ranked.size());
  for (std::size_t i = 0; i < result.ranked.size(); ++i) {
    if (result.ranked[i].true_positive) ++tp;
    result.curve.push_back(
        {static_cast<double>(tp) / static_cast<double>(i + 1),
         static_cast<double>(tp) / static_cast<double>(truth.size())});
  }
  result.ap = average_precision(result.ranked, truth.size(), mode);
  return result;
}

double mean_average_precision(const std::vector<Box3D>& detections,
                              const std::vector<Box3D>& truth,
                              double match_iou, ApMode mode) {
  if (truth.empty()) throw DataError("no ground-truth boxes to evaluate against");

  std::map<int, std::size_t> gt_counts;
  for (const Box3D& box : truth) {
    const int cls = box.cls();
    if (cls < 0) throw DataError("ground-truth box has no class probabilities");
    ++gt_counts[cls];
  }

  auto records = match_detections(detections, truth, match_iou);
  double sum = 0.0;
  for (const auto& [cls, count] : gt_counts) {
    const auto it = records.find(cls);
    sum += average_precision(it == records.end()
                                 ? std::vector<DetectionRecord>{}
                                 : it->second,
                             count, mode);
  }
  return sum / static_cast<double>(gt_counts.size());
}

std::map<std::string, double> compare(const std::map<std::string, double>& a,
                                      const std::map<std::string, double>& b) {
  if (a.size() != b.size())
    throw SchemaMismatch("runs expose " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()) + " metrics");
  std::map<std::string, double> delta;
  for (const auto& [name, value] : a) {
    const auto it = b.find(name);
    if (it == b.end())
      throw SchemaMismatch("metric '" + name + "' is missing from one run");
    delta[name] = it->second - value;
  }
  return delta;
}

Comparison compare_runs(const std::vector<RunMetrics>& runs) {
  if (runs.size() < 2)
    throw ConfigError("comparison needs at least 2 runs, got " +
                      std::to_string(runs.size()));
  Comparison cmp;
  cmp.runs = runs;
  cmp.deltas.reserve(runs.size());
  for (const RunMetrics& run : runs)
    cmp.deltas.push_back(compare(runs.front().values, run.values));
  return cmp;
}

std::string render_table(const Comparison& comparison) {
  const auto format = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return std::string(buf);
  };

  std::vector<std::vector<std::string>> grid;
  std::vector<std::string> header{"metric", comparison.runs.front().name};
  for (std::size_t i = 1; i < comparison.runs.size(); ++i) {
    header.push_back(comparison.runs[i].name);
    header.push_back("delta");
  }
  grid.push_back(std::move(header));

  for (const auto& [metric, base] : comparison.runs.front().values) {
    std::vector<std::string> row{metric, format(base)};
    for (std::size_t i = 1; i < comparison.runs.size(); ++i) {
      row.push_back(format(comparison.runs[i].values.at(metric)));
      const double d = comparison.deltas[i].at(metric);
      row.push_back((d >= 0.0 ? "+" : "") + format(d));
    }
    grid.push_back(std::move(row));
  }

  std::vector<std::size_t> width(grid.front().size(), 0);
  for (const auto& row : grid)
    for (std::size_t c = 0; c < row.size(); ++c)
      width[c] = std::max(width[c], row[c].size());

  std::string out;
  for (const auto& row : grid) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c > 0) out += "  ";
      out += row[c];
      out.append(width[c] - row[c].size(), ' ');
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    out += '\n';
  }
  return out;
}

}  // namespace concord::evalkit
