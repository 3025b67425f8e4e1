#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "concord/errors.hpp"
#include "concord/geometry.hpp"
#include "concord/stindex.hpp"

namespace concord::featnet {

// Fully connected net with ReLU on every layer except the last. Weight
// matrices are (out x in); inputs and activations are column-major batches.
struct Mlp {
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> biases;

  int input_dim() const { return static_cast<int>(weights.front().cols()); }
  int output_dim() const { return static_cast<int>(weights.back().rows()); }
};

struct MlpCache {
  // activations[0] is the input; activations[l + 1] is layer l's output
  // (post-ReLU except for the last layer).
  std::vector<Eigen::MatrixXd> activations;
};

Eigen::MatrixXd mlp_forward(const Mlp& mlp, const Eigen::MatrixXd& input,
                            MlpCache* cache = nullptr);

struct MlpGrads {
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> biases;
};

// Backpropagates d(loss)/d(output) through the cached forward pass and
// accumulates parameter gradients. Returns d(loss)/d(input).
Eigen::MatrixXd mlp_backward(const Mlp& mlp, const MlpCache& cache,
                             const Eigen::MatrixXd& output_grad,
                             MlpGrads& grads);

struct ModelConfig {
  int classes = 4;
  int feature_dim = 32;
  std::vector<int> hidden = {32, 32};
  int past = 2;    // offsets -past..future are consumed per query point
  int future = 2;
  double time_scale = 1.0;  // multiplies the integer time offset on input
  stindex::IndexConfig index;
};

// Per-point net: phi embeds each neighbor's (dx, dy, dz, scaled t), the
// feature is the elementwise max over the neighborhood, and a linear head
// maps it to class logits.
struct PointModel {
  ModelConfig config;
  Mlp phi;   // 4 -> hidden... -> feature_dim
  Mlp head;  // feature_dim -> classes, single linear layer
};

// Uniform init in ±1/sqrt(fan_in), biases zero, deterministic in the seed.
PointModel init_model(const ModelConfig& config, std::uint64_t seed);

// One query point's neighborhood, encoded as phi inputs (4 x N). Column
// order matches the index's (time offset, point index) neighbor order.
Eigen::Matrix4Xd neighbor_inputs(const stindex::SpatioTemporalIndex& index,
                                 const Point3& query, int past, int future,
                                 double time_scale);

struct TrainingSample {
  Eigen::Matrix4Xd inputs;  // 4 x N, N >= 1
  int target = 0;
  double confidence = 1.0;
};

// Encodes a neighborhood as phi inputs, one column per neighbor.
Eigen::Matrix4Xd encode_neighborhood(const stindex::Neighborhood& hood,
                                     double time_scale);

// Max-pooled feature for one encoded neighborhood.
Eigen::VectorXd featurize(const PointModel& model,
                          const Eigen::Matrix4Xd& inputs);

Eigen::VectorXd featurize(const PointModel& model,
                          const stindex::Neighborhood& hood);

// Features for a batch of query points, one column per point. Throws
// RangeMismatch if the index does not cover the temporal extent the model
// was configured for.
Eigen::MatrixXd featurize_points(const PointModel& model,
                                 const stindex::SpatioTemporalIndex& index,
                                 const std::vector<Point3>& queries);

std::vector<double> softmax(const std::vector<double>& logits);

// Class probabilities for one query point.
std::vector<double> predict_point(const PointModel& model,
                                  const stindex::SpatioTemporalIndex& index,
                                  const Point3& query);

// Class probabilities for a batch of query points.
std::vector<std::vector<double>> predict_points(
    const PointModel& model, const stindex::SpatioTemporalIndex& index,
    const std::vector<Point3>& queries);

// Mean over samples of confidence-weighted cross entropy:
//   (1 / M) * sum_i c_i * CE(softmax(logits_i), target_i)
// with M the number of samples. Confidences must lie in (0, 1].
double weighted_loss(const Eigen::MatrixXd& logits,
                     const std::vector<int>& targets,
                     const std::vector<double>& confidences);

struct ModelGrads {
  MlpGrads phi;
  MlpGrads head;
};

// Forward + backward over a batch. The max pool routes each feature dim's
// gradient to the first neighbor attaining the max. Returns the batch loss.
double batch_gradients(const PointModel& model,
                       const std::vector<TrainingSample>& batch,
                       ModelGrads& grads);

// Forward only; same reduction as batch_gradients.
double batch_loss(const PointModel& model,
                  const std::vector<TrainingSample>& batch);

struct TrainConfig {
  int epochs = 10;
  int batch_size = 64;
  double learning_rate = 0.05;
  double momentum = 0.9;
  std::uint64_t seed = 1;
};

struct TrainReport {
  std::vector<double> epoch_loss;  // mean batch loss per epoch
};

// Minibatch SGD with momentum over a fixed sample set. Deterministic in the
// seed; throws NonFiniteLoss as soon as a batch loss is not finite.
TrainReport train(PointModel& model, const std::vector<TrainingSample>& samples,
                  const TrainConfig& config);

// Versioned JSON checkpoint; load rejects unknown schemas and inconsistent
// shapes with InvalidModel.
void save_model(const PointModel& model, const std::filesystem::path& path);
PointModel load_model(const std::filesystem::path& path);

}  // namespace concord::featnet
