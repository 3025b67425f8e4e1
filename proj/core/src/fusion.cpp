#include "concord/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>
#include <utility>

namespace concord::fusion {

namespace {

void check_config(const FusionConfig& config) {
  if (!(config.lambda >= 0.0))
    throw ConfigError("fusion lambda must be >= 0, got " +
                      std::to_string(config.lambda));
  if (!(config.theta >= 0.0 && config.theta <= 1.0))
    throw ConfigError("fusion theta must lie in [0, 1], got " +
                      std::to_string(config.theta));
}

// Argmax with ties going to the lowest class id.
std::pair<int, double> top_class(const std::vector<double>& probs) {
  int best = 0;
  double best_prob = probs[0];
  for (std::size_t k = 1; k < probs.size(); ++k) {
    if (probs[k] > best_prob) {
      best = static_cast<int>(k);
      best_prob = probs[k];
    }
  }
  return {best, best_prob};
}

}  // namespace

void validate(const TeacherOutput& output, double tol) {
  for (std::size_t i = 0; i < output.probs.size(); ++i) {
    const auto& row = output.probs[i];
    if (row.empty())
      throw LengthMismatch("teacher '" + output.teacher + "' point " +
                           std::to_string(i) + " has no class probabilities");
    if (row.size() != output.probs.front().size())
      throw LengthMismatch("teacher '" + output.teacher + "' point " +
                           std::to_string(i) + " has " +
                           std::to_string(row.size()) + " classes, expected " +
                           std::to_string(output.probs.front().size()));
    double sum = 0.0;
    for (double p : row) {
      if (!(p >= 0.0))
        throw DataError("teacher '" + output.teacher + "' point " +
                        std::to_string(i) + " has a negative probability");
      sum += p;
    }
    if (std::abs(sum - 1.0) > tol)
      throw DataError("teacher '" + output.teacher + "' point " +
                      std::to_string(i) + " probabilities sum to " +
                      std::to_string(sum));
  }
}

PseudoLabel fuse_point(const std::vector<std::vector<double>>& teacher_probs,
                       const FusionConfig& config) {
  check_config(config);
  if (teacher_probs.empty())
    throw EmptyTeacherSet("fuse_point needs at least one teacher");

  const std::size_t classes = teacher_probs[0].size();
  if (classes == 0)
    throw LengthMismatch("teacher 0 has no class probabilities");
  for (std::size_t t = 1; t < teacher_probs.size(); ++t)
    if (teacher_probs[t].size() != classes)
      throw LengthMismatch("teacher " + std::to_string(t) + " has " +
                           std::to_string(teacher_probs[t].size()) +
                           " classes, expected " + std::to_string(classes));

  // Strongest single opinion across all teachers wins; earlier teachers win
  // ties so the result is independent of evaluation order.
  std::size_t winner = 0;
  auto [winner_cls, winner_prob] = top_class(teacher_probs[0]);
  for (std::size_t t = 1; t < teacher_probs.size(); ++t) {
    auto [cls, prob] = top_class(teacher_probs[t]);
    if (prob > winner_prob) {
      winner = t;
      winner_cls = cls;
      winner_prob = prob;
    }
  }

  int agreement = 0;
  for (std::size_t t = 0; t < teacher_probs.size(); ++t) {
    if (t == winner) continue;
    if (top_class(teacher_probs[t]).first == winner_cls) ++agreement;
  }

  PseudoLabel label;
  label.cls = winner_cls;
  label.confidence = std::min(1.0, winner_prob + config.lambda * agreement);
  label.selected = label.confidence >= config.theta;
  return label;
}

std::vector<PseudoLabel> fuse_scan(const std::vector<TeacherOutput>& outputs,
                                   const FusionConfig& config) {
  check_config(config);
  if (outputs.empty())
    throw EmptyTeacherSet("fuse_scan needs at least one teacher");

  const std::size_t points = outputs[0].probs.size();
  for (const auto& out : outputs)
    if (out.probs.size() != points)
      throw PointCountMismatch("teacher '" + out.teacher + "' predicts " +
                               std::to_string(out.probs.size()) +
                               " points, expected " + std::to_string(points));

  std::vector<PseudoLabel> labels(points);
  std::vector<std::vector<double>> stacked(outputs.size());
  for (std::size_t i = 0; i < points; ++i) {
    for (std::size_t t = 0; t < outputs.size(); ++t)
      stacked[t] = outputs[t].probs[i];
    labels[i] = fuse_point(stacked, config);
  }
  return labels;
}

void select(std::vector<PseudoLabel>& labels, double theta) {
  if (!(theta >= 0.0 && theta <= 1.0))
    throw ConfigError("selection threshold must lie in [0, 1], got " +
                      std::to_string(theta));
  for (auto& label : labels) label.selected = label.confidence >= theta;
}

DatasetEntry human_entry(std::string sequence_id, std::vector<int> classes) {
  DatasetEntry entry;
  entry.sequence_id = std::move(sequence_id);
  entry.provenance = Provenance::human;
  entry.confidence.assign(classes.size(), 1.0);
  entry.selected.assign(classes.size(), 1);
  entry.classes = std::move(classes);
  return entry;
}

DatasetEntry pseudo_entry(std::string sequence_id,
                          const std::vector<PseudoLabel>& labels) {
  DatasetEntry entry;
  entry.sequence_id = std::move(sequence_id);
  entry.provenance = Provenance::pseudo;
  entry.classes.reserve(labels.size());
  entry.confidence.reserve(labels.size());
  entry.selected.reserve(labels.size());
  for (const auto& label : labels) {
    entry.classes.push_back(label.cls);
    entry.confidence.push_back(label.confidence);
    entry.selected.push_back(label.selected ? 1 : 0);
  }
  return entry;
}

std::size_t PseudoDataset::selected_count() const {
  std::size_t n = 0;
  for (const auto& entry : entries)
    for (std::uint8_t flag : entry.selected) n += flag;
  return n;
}

PseudoDataset assemble_dataset(const std::vector<DatasetEntry>& labeled,
                               const std::vector<DatasetEntry>& pseudo) {
  PseudoDataset dataset;
  std::unordered_set<std::string> seen;
  auto add = [&](const DatasetEntry& entry) {
    if (!seen.insert(entry.sequence_id).second)
      throw DuplicateSequence("sequence '" + entry.sequence_id +
                              "' appears twice in the training set");
    dataset.entries.push_back(entry);
  };
  for (const auto& entry : labeled) add(entry);
  for (const auto& entry : pseudo) add(entry);
  return dataset;
}

}  // namespace concord::fusion
