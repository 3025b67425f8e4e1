#include "concord/featnet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <utility>

#include <json.hpp>

#include "concord/util/rng.hpp"

namespace concord::featnet {

namespace {

using nlohmann::json;

constexpr const char* kModelSchema = "concord.model/1";

void check_model_config(const ModelConfig& config) {
  if (config.classes < 2)
    throw ConfigError("model needs at least 2 classes");
  if (config.feature_dim < 1)
    throw ConfigError("feature_dim must be >= 1");
  for (int h : config.hidden)
    if (h < 1) throw ConfigError("hidden layer widths must be >= 1");
  if (config.past < 0 || config.future < 0)
    throw ConfigError("past and future must be >= 0");
  if (!(config.time_scale > 0.0))
    throw ConfigError("time_scale must be > 0");
}

void check_range(const PointModel& model,
                 const stindex::SpatioTemporalIndex& index) {
  if (-model.config.past < index.min_offset() ||
      model.config.future > index.max_offset())
    throw RangeMismatch(
        "model consumes offsets [" + std::to_string(-model.config.past) +
        ", " + std::to_string(model.config.future) + "] but the index covers [" +
        std::to_string(index.min_offset()) + ", " +
        std::to_string(index.max_offset()) + "]");
}

Mlp init_mlp(const std::vector<int>& dims, util::Rng& rng) {
  Mlp mlp;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const int in = dims[l];
    const int out = dims[l + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Eigen::MatrixXd w(out, in);
    for (int r = 0; r < out; ++r)
      for (int c = 0; c < in; ++c) w(r, c) = rng.uniform(-bound, bound);
    mlp.weights.push_back(std::move(w));
    mlp.biases.push_back(Eigen::VectorXd::Zero(out));
  }
  return mlp;
}

void reset_grads(MlpGrads& grads, const Mlp& mlp) {
  grads.weights.resize(mlp.weights.size());
  grads.biases.resize(mlp.biases.size());
  for (std::size_t l = 0; l < mlp.weights.size(); ++l) {
    grads.weights[l] = Eigen::MatrixXd::Zero(mlp.weights[l].rows(),
                                             mlp.weights[l].cols());
    grads.biases[l] = Eigen::VectorXd::Zero(mlp.biases[l].size());
  }
}

void check_sample(const TrainingSample& sample, int classes, std::size_t i) {
  if (sample.inputs.cols() == 0)
    throw EmptyNeighborhood("training sample " + std::to_string(i) +
                            " has no neighbors");
  if (sample.target < 0 || sample.target >= classes)
    throw DataError("training sample " + std::to_string(i) + " targets class " +
                    std::to_string(sample.target) + " of " +
                    std::to_string(classes));
  if (!(sample.confidence > 0.0 && sample.confidence <= 1.0))
    throw ConfidenceOutOfRange("training sample " + std::to_string(i) +
                               " has confidence " +
                               std::to_string(sample.confidence) +
                               ", expected (0, 1]");
}

// Softmax cross entropy averaged over columns, each weighted by its
// confidence. Optionally emits d(loss)/d(logits).
double ce_loss(const Eigen::MatrixXd& logits, const std::vector<int>& targets,
               const std::vector<double>& confidences,
               Eigen::MatrixXd* dlogits) {
  const auto count = static_cast<std::size_t>(logits.cols());
  if (targets.size() != count || confidences.size() != count)
    throw LengthMismatch("loss over " + std::to_string(count) +
                         " columns got " + std::to_string(targets.size()) +
                         " targets and " + std::to_string(confidences.size()) +
                         " confidences");
  if (count == 0) throw LengthMismatch("loss needs at least one sample");

  const int classes = static_cast<int>(logits.rows());
  if (dlogits) dlogits->setZero(classes, logits.cols());
  const double inv_m = 1.0 / static_cast<double>(count);

  double loss = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const int target = targets[i];
    if (target < 0 || target >= classes)
      throw DataError("sample " + std::to_string(i) + " targets class " +
                      std::to_string(target) + " of " +
                      std::to_string(classes));
    const double c = confidences[i];
    if (!(c > 0.0 && c <= 1.0))
      throw ConfidenceOutOfRange("sample " + std::to_string(i) +
                                 " has confidence " + std::to_string(c) +
                                 ", expected (0, 1]");
    const auto col = logits.col(static_cast<Eigen::Index>(i));
    const double zmax = col.maxCoeff();
    const double lse = zmax + std::log((col.array() - zmax).exp().sum());
    loss += c * (lse - col(target));
    if (dlogits) {
      auto dcol = dlogits->col(static_cast<Eigen::Index>(i));
      dcol = (col.array() - lse).exp() * (c * inv_m);
      dcol(target) -= c * inv_m;
    }
  }
  return loss * inv_m;
}

// Forward pass shared by loss and gradient computation: concatenates all
// neighborhoods, runs phi once, max-pools per sample, runs the head.
struct PooledForward {
  Eigen::MatrixXd inputs;               // 4 x K
  std::vector<Eigen::Index> begin;      // per-sample column start, size B+1
  MlpCache phi_cache;
  Eigen::MatrixXd phi_out;              // F x K
  Eigen::MatrixXd features;             // F x B
  Eigen::MatrixXi argmax;               // F x B, column of the max in phi_out
  Eigen::MatrixXd logits;               // C x B
  MlpCache head_cache;
  std::vector<int> targets;
  std::vector<double> confidences;
};

PooledForward pooled_forward(const PointModel& model,
                             const TrainingSample* const* batch,
                             std::size_t count, bool cache) {
  PooledForward fwd;
  fwd.begin.resize(count + 1);
  fwd.begin[0] = 0;
  for (std::size_t i = 0; i < count; ++i) {
    check_sample(*batch[i], model.config.classes, i);
    fwd.begin[i + 1] = fwd.begin[i] + batch[i]->inputs.cols();
  }

  fwd.inputs.resize(4, fwd.begin[count]);
  fwd.targets.resize(count);
  fwd.confidences.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    fwd.inputs.middleCols(fwd.begin[i], batch[i]->inputs.cols()) =
        batch[i]->inputs;
    fwd.targets[i] = batch[i]->target;
    fwd.confidences[i] = batch[i]->confidence;
  }

  fwd.phi_out = mlp_forward(model.phi, fwd.inputs, cache ? &fwd.phi_cache : nullptr);

  const int feat = model.config.feature_dim;
  fwd.features.resize(feat, static_cast<Eigen::Index>(count));
  fwd.argmax.resize(feat, static_cast<Eigen::Index>(count));
  for (std::size_t i = 0; i < count; ++i) {
    const Eigen::Index lo = fwd.begin[i];
    const Eigen::Index hi = fwd.begin[i + 1];
    for (int f = 0; f < feat; ++f) {
      Eigen::Index best = lo;
      double best_val = fwd.phi_out(f, lo);
      for (Eigen::Index k = lo + 1; k < hi; ++k) {
        if (fwd.phi_out(f, k) > best_val) {
          best_val = fwd.phi_out(f, k);
          best = k;
        }
      }
      fwd.features(f, static_cast<Eigen::Index>(i)) = best_val;
      fwd.argmax(f, static_cast<Eigen::Index>(i)) = static_cast<int>(best);
    }
  }

  fwd.logits =
      mlp_forward(model.head, fwd.features, cache ? &fwd.head_cache : nullptr);
  return fwd;
}

double pooled_pass(const PointModel& model, const TrainingSample* const* batch,
                   std::size_t count, ModelGrads* grads) {
  if (count == 0) throw LengthMismatch("batch needs at least one sample");
  PooledForward fwd = pooled_forward(model, batch, count, grads != nullptr);

  Eigen::MatrixXd dlogits;
  const double loss = ce_loss(fwd.logits, fwd.targets, fwd.confidences,
                              grads ? &dlogits : nullptr);
  if (!grads) return loss;

  reset_grads(grads->phi, model.phi);
  reset_grads(grads->head, model.head);

  Eigen::MatrixXd dfeatures =
      mlp_backward(model.head, fwd.head_cache, dlogits, grads->head);

  Eigen::MatrixXd dphi_out =
      Eigen::MatrixXd::Zero(fwd.phi_out.rows(), fwd.phi_out.cols());
  for (Eigen::Index i = 0; i < dfeatures.cols(); ++i)
    for (Eigen::Index f = 0; f < dfeatures.rows(); ++f)
      dphi_out(f, fwd.argmax(f, i)) += dfeatures(f, i);

  mlp_backward(model.phi, fwd.phi_cache, dphi_out, grads->phi);
  return loss;
}

json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const json& rows) {
  if (!rows.is_array() || rows.empty())
    throw InvalidModel("weight matrix must be a non-empty array of rows");
  const std::size_t cols = rows[0].size();
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()),
                    static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (!rows[r].is_array() || rows[r].size() != cols)
      throw InvalidModel("weight matrix rows have inconsistent lengths");
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = rows[r][c].get<double>();
      if (!std::isfinite(v)) throw InvalidModel("non-finite weight");
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v;
    }
  }
  return m;
}

json mlp_to_json(const Mlp& mlp) {
  json weights = json::array();
  json biases = json::array();
  for (std::size_t l = 0; l < mlp.weights.size(); ++l) {
    weights.push_back(matrix_to_json(mlp.weights[l]));
    json b = json::array();
    for (Eigen::Index i = 0; i < mlp.biases[l].size(); ++i)
      b.push_back(mlp.biases[l](i));
    biases.push_back(std::move(b));
  }
  return json{{"weights", std::move(weights)}, {"biases", std::move(biases)}};
}

Mlp mlp_from_json(const json& j, const std::vector<int>& expected_dims) {
  const auto& weights = j.at("weights");
  const auto& biases = j.at("biases");
  if (!weights.is_array() || !biases.is_array() ||
      weights.size() != biases.size() ||
      weights.size() + 1 != expected_dims.size())
    throw InvalidModel("layer count does not match the stored config");

  Mlp mlp;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    Eigen::MatrixXd w = matrix_from_json(weights[l]);
    if (w.rows() != expected_dims[l + 1] || w.cols() != expected_dims[l])
      throw InvalidModel("layer " + std::to_string(l) + " is " +
                         std::to_string(w.rows()) + "x" +
                         std::to_string(w.cols()) + ", expected " +
                         std::to_string(expected_dims[l + 1]) + "x" +
                         std::to_string(expected_dims[l]));
    const auto& braw = biases[l];
    if (!braw.is_array() || braw.size() != static_cast<std::size_t>(w.rows()))
      throw InvalidModel("layer " + std::to_string(l) + " bias length mismatch");
    Eigen::VectorXd b(w.rows());
    for (std::size_t i = 0; i < braw.size(); ++i) {
      const double v = braw[i].get<double>();
      if (!std::isfinite(v)) throw InvalidModel("non-finite bias");
      b(static_cast<Eigen::Index>(i)) = v;
    }
    mlp.weights.push_back(std::move(w));
    mlp.biases.push_back(std::move(b));
  }
  return mlp;
}

std::vector<int> phi_dims(const ModelConfig& config) {
  std::vector<int> dims{4};
  dims.insert(dims.end(), config.hidden.begin(), config.hidden.end());
  dims.push_back(config.feature_dim);
  return dims;
}

}  // namespace

Eigen::MatrixXd mlp_forward(const Mlp& mlp, const Eigen::MatrixXd& input,
                            MlpCache* cache) {
  if (input.rows() != mlp.input_dim())
    throw LengthMismatch("net expects " + std::to_string(mlp.input_dim()) +
                         " input rows, got " + std::to_string(input.rows()));
  if (cache) {
    cache->activations.clear();
    cache->activations.push_back(input);
  }
  Eigen::MatrixXd a = input;
  for (std::size_t l = 0; l < mlp.weights.size(); ++l) {
    Eigen::MatrixXd z = (mlp.weights[l] * a).colwise() + mlp.biases[l];
    if (l + 1 < mlp.weights.size()) z = z.cwiseMax(0.0);
    a = std::move(z);
    if (cache) cache->activations.push_back(a);
  }
  return a;
}

Eigen::MatrixXd mlp_backward(const Mlp& mlp, const MlpCache& cache,
                             const Eigen::MatrixXd& output_grad,
                             MlpGrads& grads) {
  if (grads.weights.empty()) reset_grads(grads, mlp);
  const int layers = static_cast<int>(mlp.weights.size());
  Eigen::MatrixXd delta = output_grad;
  for (int l = layers - 1; l >= 0; --l) {
    if (l < layers - 1)
      delta = delta.cwiseProduct(
          (cache.activations[l + 1].array() > 0.0).cast<double>().matrix());
    grads.weights[l].noalias() += delta * cache.activations[l].transpose();
    grads.biases[l] += delta.rowwise().sum();
    delta = mlp.weights[l].transpose() * delta;
  }
  return delta;
}

PointModel init_model(const ModelConfig& config, std::uint64_t seed) {
  check_model_config(config);
  util::Rng rng(util::mix_seed(seed));
  PointModel model;
  model.config = config;
  model.phi = init_mlp(phi_dims(config), rng);
  model.head = init_mlp({config.feature_dim, config.classes}, rng);
  return model;
}

Eigen::Matrix4Xd encode_neighborhood(const stindex::Neighborhood& hood,
                                     double time_scale) {
  Eigen::Matrix4Xd inputs(4, static_cast<Eigen::Index>(hood.size()));
  for (std::size_t k = 0; k < hood.size(); ++k) {
    inputs.col(static_cast<Eigen::Index>(k)) << hood[k].offset.x(),
        hood[k].offset.y(), hood[k].offset.z(),
        time_scale * hood[k].time_offset;
  }
  return inputs;
}

Eigen::Matrix4Xd neighbor_inputs(const stindex::SpatioTemporalIndex& index,
                                 const Point3& query, int past, int future,
                                 double time_scale) {
  const auto hood = index.neighbors(query, past, future);
  if (hood.empty())
    throw EmptyNeighborhood("query point has no spatio-temporal neighbors");
  return encode_neighborhood(hood, time_scale);
}

Eigen::VectorXd featurize(const PointModel& model,
                          const Eigen::Matrix4Xd& inputs) {
  if (inputs.cols() == 0)
    throw EmptyNeighborhood("cannot featurize an empty neighborhood");
  return mlp_forward(model.phi, inputs).rowwise().maxCoeff();
}

Eigen::VectorXd featurize(const PointModel& model,
                          const stindex::Neighborhood& hood) {
  if (hood.empty())
    throw EmptyNeighborhood("cannot featurize an empty neighborhood");
  return featurize(model, encode_neighborhood(hood, model.config.time_scale));
}

Eigen::MatrixXd featurize_points(const PointModel& model,
                                 const stindex::SpatioTemporalIndex& index,
                                 const std::vector<Point3>& queries) {
  check_range(model, index);
  const auto& cfg = model.config;
  Eigen::MatrixXd features(cfg.feature_dim,
                           static_cast<Eigen::Index>(queries.size()));

  constexpr std::size_t kBlock = 256;
  std::vector<Eigen::Matrix4Xd> block_inputs;
  block_inputs.reserve(kBlock);
  for (std::size_t base = 0; base < queries.size(); base += kBlock) {
    const std::size_t count = std::min(kBlock, queries.size() - base);
    block_inputs.clear();
    Eigen::Index total = 0;
    for (std::size_t i = 0; i < count; ++i) {
      block_inputs.push_back(neighbor_inputs(index, queries[base + i],
                                             cfg.past, cfg.future,
                                             cfg.time_scale));
      total += block_inputs.back().cols();
    }
    Eigen::MatrixXd stacked(4, total);
    Eigen::Index at = 0;
    for (const auto& inp : block_inputs) {
      stacked.middleCols(at, inp.cols()) = inp;
      at += inp.cols();
    }
    const Eigen::MatrixXd phi_out = mlp_forward(model.phi, stacked);
    at = 0;
    for (std::size_t i = 0; i < count; ++i) {
      const Eigen::Index width = block_inputs[i].cols();
      features.col(static_cast<Eigen::Index>(base + i)) =
          phi_out.middleCols(at, width).rowwise().maxCoeff();
      at += width;
    }
  }
  return features;
}

std::vector<double> softmax(const std::vector<double>& logits) {
  if (logits.empty()) throw LengthMismatch("softmax of an empty vector");
  const double zmax = *std::max_element(logits.begin(), logits.end());
  std::vector<double> probs(logits.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    probs[k] = std::exp(logits[k] - zmax);
    sum += probs[k];
  }
  for (double& p : probs) p /= sum;
  return probs;
}

std::vector<double> predict_point(const PointModel& model,
                                  const stindex::SpatioTemporalIndex& index,
                                  const Point3& query) {
  check_range(model, index);
  const Eigen::VectorXd h = featurize(
      model, neighbor_inputs(index, query, model.config.past,
                             model.config.future, model.config.time_scale));
  const Eigen::VectorXd logits = mlp_forward(model.head, h);
  return softmax(std::vector<double>(logits.data(), logits.data() + logits.size()));
}

std::vector<std::vector<double>> predict_points(
    const PointModel& model, const stindex::SpatioTemporalIndex& index,
    const std::vector<Point3>& queries) {
  const Eigen::MatrixXd features = featurize_points(model, index, queries);
  const Eigen::MatrixXd logits = mlp_forward(model.head, features);
  std::vector<std::vector<double>> probs(queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto col = logits.col(static_cast<Eigen::Index>(i));
    probs[i] = softmax(std::vector<double>(col.data(), col.data() + col.size()));
  }
  return probs;
}

double weighted_loss(const Eigen::MatrixXd& logits,
                     const std::vector<int>& targets,
                     const std::vector<double>& confidences) {
  return ce_loss(logits, targets, confidences, nullptr);
}

double batch_gradients(const PointModel& model,
                       const std::vector<TrainingSample>& batch,
                       ModelGrads& grads) {
  std::vector<const TrainingSample*> ptrs(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) ptrs[i] = &batch[i];
  return pooled_pass(model, ptrs.data(), ptrs.size(), &grads);
}

double batch_loss(const PointModel& model,
                  const std::vector<TrainingSample>& batch) {
  std::vector<const TrainingSample*> ptrs(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) ptrs[i] = &batch[i];
  return pooled_pass(model, ptrs.data(), ptrs.size(), nullptr);
}

TrainReport train(PointModel& model, const std::vector<TrainingSample>& samples,
                  const TrainConfig& config) {
  if (config.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (config.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(config.learning_rate > 0.0))
    throw ConfigError("learning_rate must be > 0");
  if (!(config.momentum >= 0.0 && config.momentum < 1.0))
    throw ConfigError("momentum must lie in [0, 1)");
  if (samples.empty()) throw DataError("no training samples");

  ModelGrads velocity;
  reset_grads(velocity.phi, model.phi);
  reset_grads(velocity.head, model.head);

  auto step = [&](MlpGrads& vel, Mlp& mlp, const MlpGrads& grad) {
    for (std::size_t l = 0; l < mlp.weights.size(); ++l) {
      vel.weights[l] = config.momentum * vel.weights[l] -
                       config.learning_rate * grad.weights[l];
      vel.biases[l] = config.momentum * vel.biases[l] -
                      config.learning_rate * grad.biases[l];
      mlp.weights[l] += vel.weights[l];
      mlp.biases[l] += vel.biases[l];
    }
  };

  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainReport report;
  std::vector<const TrainingSample*> batch;
  ModelGrads grads;
  const auto batch_size = static_cast<std::size_t>(config.batch_size);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    util::Rng rng(util::mix_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);

    double epoch_sum = 0.0;
    for (std::size_t at = 0; at < order.size(); at += batch_size) {
      const std::size_t count = std::min(batch_size, order.size() - at);
      batch.clear();
      for (std::size_t i = 0; i < count; ++i)
        batch.push_back(&samples[order[at + i]]);

      const double loss = pooled_pass(model, batch.data(), count, &grads);
      if (!std::isfinite(loss))
        throw NonFiniteLoss("batch loss diverged at epoch " +
                            std::to_string(epoch));
      epoch_sum += loss * static_cast<double>(count);
      step(velocity.phi, model.phi, grads.phi);
      step(velocity.head, model.head, grads.head);
    }
    report.epoch_loss.push_back(epoch_sum / static_cast<double>(order.size()));
  }
  return report;
}

void save_model(const PointModel& model, const std::filesystem::path& path) {
  const auto& cfg = model.config;
  json j;
  j["schema"] = kModelSchema;
  j["config"] = {
      {"classes", cfg.classes},
      {"feature_dim", cfg.feature_dim},
      {"hidden", cfg.hidden},
      {"past", cfg.past},
      {"future", cfg.future},
      {"time_scale", cfg.time_scale},
      {"radius", {{"r0", cfg.index.radius.r0}, {"slope", cfg.index.radius.slope}}},
      {"max_per_offset", cfg.index.max_per_offset},
  };
  j["phi"] = mlp_to_json(model.phi);
  j["head"] = mlp_to_json(model.head);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write model file " + path.string());
  out << j.dump() << '\n';
  if (!out) throw DataError("short write to model file " + path.string());
}

PointModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read model file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();

  const json j = json::parse(buffer.str(), nullptr, false);
  if (j.is_discarded()) throw InvalidModel("model file is not valid JSON");

  try {
    if (j.at("schema").get<std::string>() != kModelSchema)
      throw InvalidModel("unsupported model schema '" +
                         j.at("schema").get<std::string>() + "'");
    const auto& cfg = j.at("config");
    ModelConfig config;
    config.classes = cfg.at("classes").get<int>();
    config.feature_dim = cfg.at("feature_dim").get<int>();
    config.hidden = cfg.at("hidden").get<std::vector<int>>();
    config.past = cfg.at("past").get<int>();
    config.future = cfg.at("future").get<int>();
    config.time_scale = cfg.at("time_scale").get<double>();
    config.index.radius.r0 = cfg.at("radius").at("r0").get<double>();
    config.index.radius.slope = cfg.at("radius").at("slope").get<double>();
    config.index.max_per_offset = cfg.at("max_per_offset").get<std::size_t>();
    check_model_config(config);

    PointModel model;
    model.config = config;
    model.phi = mlp_from_json(j.at("phi"), phi_dims(config));
    model.head = mlp_from_json(j.at("head"), {config.feature_dim, config.classes});
    return model;
  } catch (const json::exception& e) {
    throw InvalidModel(std::string("malformed model file: ") + e.what());
  } catch (const ConfigError& e) {
    throw InvalidModel(std::string("stored config is invalid: ") + e.what());
  }
}

}  // namespace concord::featnet
