#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <concord/errors.hpp>
#include <concord/featnet.hpp>
#include <concord/util/rng.hpp>

using namespace concord;
using featnet::Mlp;
using featnet::ModelConfig;
using featnet::PointModel;
using featnet::TrainingSample;

namespace fs = std::filesystem;

namespace {

// Floor in the denominator absorbs finite-difference roundoff on partials
// that are themselves near zero.
constexpr double kGradTol = 1e-4;
constexpr double kGradEps = 1e-6;
constexpr double kExactTol = 1e-12;

fs::path test_dir(const char* leaf) {
  const fs::path dir = fs::temp_directory_path() / "concord-featnet" / leaf;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<TrainingSample> clustered_samples(util::Rng& rng, int classes,
                                              int per_class, int neighbors) {
  std::vector<TrainingSample> samples;
  for (int k = 0; k < classes; ++k) {
    // Anchors spread on a circle; collinear anchors at this scale can park
    // every ReLU unit dead for the far clusters and freeze their features.
    const double angle = 2.0 * M_PI * k / classes;
    const Eigen::Vector4d anchor{1.5 * std::cos(angle), 1.5 * std::sin(angle),
                                 0.4 * k, 0.0};
    for (int i = 0; i < per_class; ++i) {
      TrainingSample s;
      s.inputs.resize(4, neighbors);
      for (int c = 0; c < neighbors; ++c) {
        for (int r = 0; r < 4; ++r) {
          s.inputs(r, c) = anchor(r) + rng.normal(0.0, 0.15);
        }
      }
      s.target = k;
      s.confidence = 1.0;
      samples.push_back(std::move(s));
    }
  }
  rng.shuffle(samples);
  return samples;
}

double relative_error(double a, double b) {
  return std::abs(a - b) / std::max(1e-2, std::abs(a) + std::abs(b));
}

// Central finite differences through batch_loss for every parameter.
double max_gradient_error(PointModel& model,
                          const std::vector<TrainingSample>& batch) {
  featnet::ModelGrads grads;
  featnet::batch_gradients(model, batch, grads);

  double worst = 0.0;
  auto probe = [&](double& param, double analytic) {
    const double saved = param;
    param = saved + kGradEps;
    const double up = featnet::batch_loss(model, batch);
    param = saved - kGradEps;
    const double down = featnet::batch_loss(model, batch);
    param = saved;
    const double fd = (up - down) / (2.0 * kGradEps);
    worst = std::max(worst, relative_error(analytic, fd));
  };

  for (std::size_t l = 0; l < model.phi.weights.size(); ++l) {
    for (int r = 0; r < model.phi.weights[l].rows(); ++r) {
      for (int c = 0; c < model.phi.weights[l].cols(); ++c) {
        probe(model.phi.weights[l](r, c), grads.phi.weights[l](r, c));
      }
      probe(model.phi.biases[l](r), grads.phi.biases[l](r));
    }
  }
  for (std::size_t l = 0; l < model.head.weights.size(); ++l) {
    for (int r = 0; r < model.head.weights[l].rows(); ++r) {
      for (int c = 0; c < model.head.weights[l].cols(); ++c) {
        probe(model.head.weights[l](r, c), grads.head.weights[l](r, c));
      }
      probe(model.head.biases[l](r), grads.head.biases[l](r));
    }
  }
  return worst;
}

}  // namespace

TEST_SUITE("featnet") {

TEST_CASE("forward pass matches hand arithmetic") {
  SUBCASE("single linear layer") {
    Mlp mlp;
    mlp.weights = {(Eigen::MatrixXd(2, 2) << 1, 2, 3, 4).finished()};
    mlp.biases = {(Eigen::VectorXd(2) << 0.5, -0.5).finished()};
    const auto out = featnet::mlp_forward(mlp, Eigen::Vector2d{1.0, 1.0});
    CHECK(out(0, 0) == 3.5);
    CHECK(out(1, 0) == 6.5);
  }
  SUBCASE("relu clamps hidden layers only") {
    Mlp mlp;
    mlp.weights = {Eigen::MatrixXd::Identity(1, 1),
                   3.0 * Eigen::MatrixXd::Identity(1, 1)};
    mlp.biases = {(Eigen::VectorXd(1) << -2.0).finished(),
                  (Eigen::VectorXd(1) << 0.5).finished()};
    Eigen::MatrixXd in(1, 2);
    in << 1.0, 5.0;  // pre-activations -1 and 3
    const auto out = featnet::mlp_forward(mlp, in);
    CHECK(out(0, 0) == 0.5);  // clamped to zero, only the bias remains
    CHECK(out(0, 1) == 9.5);
  }
}

TEST_CASE("the feature is the columnwise max over neighbors") {
  PointModel model;
  model.config.classes = 2;
  model.config.feature_dim = 2;
  model.config.hidden = {};
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(2, 4);
  w(0, 0) = 1.0;  // picks up dx
  w(1, 1) = 1.0;  // picks up dy
  model.phi.weights = {w};
  model.phi.biases = {Eigen::VectorXd::Zero(2)};
  model.head.weights = {Eigen::MatrixXd::Identity(2, 2)};
  model.head.biases = {Eigen::VectorXd::Zero(2)};

  Eigen::Matrix4Xd inputs(4, 2);
  inputs.col(0) << 1.0, 5.0, 0.0, 0.0;
  inputs.col(1) << 3.0, 2.0, 0.0, 0.0;
  const auto feature = featnet::featurize(model, inputs);
  CHECK(feature(0) == 3.0);
  CHECK(feature(1) == 5.0);
}

TEST_CASE("softmax hand case") {
  const auto p = featnet::softmax({std::log(2.0), 0.0});
  CHECK(std::abs(p[0] - 2.0 / 3.0) <= kExactTol);
  CHECK(std::abs(p[1] - 1.0 / 3.0) <= kExactTol);
  CHECK_THROWS_AS(featnet::softmax({}), LengthMismatch);
}

TEST_CASE("weighted loss averages confidence-scaled cross entropy") {
  // Targets hit probability 1/e and 1/e^2, so the raw terms are 1 and 2.
  Eigen::MatrixXd logits(2, 2);
  logits.col(0) << 0.0, std::log(std::exp(1.0) - 1.0);
  logits.col(1) << 0.0, std::log(std::exp(2.0) - 1.0);
  const double loss =
      featnet::weighted_loss(logits, {0, 0}, {1.0, 0.5});
  CHECK(std::abs(loss - 1.0) <= 1e-9);  // (1*1 + 0.5*2) / 2

  CHECK_THROWS_AS(featnet::weighted_loss(logits, {0}, {1.0, 0.5}),
                  LengthMismatch);
  CHECK_THROWS_AS(featnet::weighted_loss(logits, {0, 0}, {1.0, 0.0}),
                  ConfidenceOutOfRange);
  CHECK_THROWS_AS(featnet::weighted_loss(logits, {0, 0}, {1.0, 1.0 + 1e-9}),
                  ConfidenceOutOfRange);
}

TEST_CASE("head bias gradient equals softmax minus one-hot") {
  PointModel model;
  model.config.classes = 2;
  model.config.feature_dim = 1;
  model.config.hidden = {};
  model.phi.weights = {Eigen::MatrixXd::Zero(1, 4)};
  model.phi.biases = {Eigen::VectorXd::Zero(1)};
  model.head.weights = {Eigen::MatrixXd::Zero(2, 1)};
  model.head.biases = {Eigen::VectorXd::Zero(2)};

  TrainingSample s;
  s.inputs = Eigen::Matrix4Xd::Random(4, 3);
  s.target = 0;
  featnet::ModelGrads grads;
  const double loss = featnet::batch_gradients(model, {s}, grads);
  CHECK(std::abs(loss - std::log(2.0)) <= kExactTol);
  CHECK(std::abs(grads.head.biases[0](0) - (-0.5)) <= kExactTol);
  CHECK(std::abs(grads.head.biases[0](1) - 0.5) <= kExactTol);
}

TEST_CASE("analytic gradients match central differences") {
  util::Rng rng(201);
  for (int net = 0; net < 8; ++net) {
    ModelConfig config;
    config.classes = 2 + static_cast<int>(rng.uniform_index(3));
    config.feature_dim = 3 + static_cast<int>(rng.uniform_index(4));
    config.hidden = net % 2 ? std::vector<int>{5} : std::vector<int>{};
    PointModel model = featnet::init_model(config, 300 + net);

    std::vector<TrainingSample> batch;
    const int batch_size = 1 + static_cast<int>(rng.uniform_index(4));
    for (int i = 0; i < batch_size; ++i) {
      TrainingSample s;
      const int neighbors = 1 + static_cast<int>(rng.uniform_index(5));
      s.inputs.resize(4, neighbors);
      for (int c = 0; c < neighbors; ++c)
        for (int r = 0; r < 4; ++r) s.inputs(r, c) = rng.normal(0.0, 1.0);
      if (neighbors > 1 && rng.uniform() < 0.3) {
        s.inputs.col(neighbors - 1) = s.inputs.col(0);  // exact pooling tie
      }
      s.target = static_cast<int>(rng.uniform_index(config.classes));
      s.confidence = rng.uniform(0.1, 1.0);
      batch.push_back(std::move(s));
    }
    CHECK(max_gradient_error(model, batch) < kGradTol);
  }
}

TEST_CASE("training separates a clustered problem") {
  util::Rng rng(202);
  const auto samples = clustered_samples(rng, 3, 60, 4);

  ModelConfig config;
  config.classes = 3;
  config.feature_dim = 8;
  config.hidden = {8};
  PointModel model = featnet::init_model(config, 7);

  featnet::TrainConfig train;
  train.epochs = 5;
  train.batch_size = 16;
  train.learning_rate = 0.05;
  train.momentum = 0.9;
  train.seed = 11;
  const auto report = featnet::train(model, samples, train);

  REQUIRE(report.epoch_loss.size() == 5);
  for (std::size_t e = 1; e < report.epoch_loss.size(); ++e) {
    CHECK(report.epoch_loss[e] < report.epoch_loss[e - 1]);
  }

  int correct = 0;
  for (const auto& s : samples) {
    const auto logits =
        featnet::mlp_forward(model.head, featnet::featurize(model, s.inputs));
    int argmax = 0;
    for (int k = 1; k < config.classes; ++k) {
      if (logits(k, 0) > logits(argmax, 0)) argmax = k;
    }
    correct += argmax == s.target;
  }
  CHECK(static_cast<double>(correct) / samples.size() >= 0.95);
}

TEST_CASE("training is deterministic in the seed") {
  util::Rng rng(203);
  const auto samples = clustered_samples(rng, 2, 20, 3);
  ModelConfig config;
  config.classes = 2;
  config.feature_dim = 4;
  config.hidden = {};

  featnet::TrainConfig train;
  train.epochs = 2;
  train.batch_size = 8;
  auto a = featnet::init_model(config, 5);
  auto b = featnet::init_model(config, 5);
  const auto ra = featnet::train(a, samples, train);
  const auto rb = featnet::train(b, samples, train);
  CHECK(ra.epoch_loss == rb.epoch_loss);
  for (std::size_t l = 0; l < a.phi.weights.size(); ++l) {
    CHECK(a.phi.weights[l] == b.phi.weights[l]);
  }
  CHECK(a.head.weights[0] == b.head.weights[0]);
}

TEST_CASE("exploding steps raise a numeric error") {
  util::Rng rng(204);
  const auto samples = clustered_samples(rng, 3, 20, 3);
  ModelConfig config;
  config.classes = 3;
  config.feature_dim = 6;
  config.hidden = {6};
  PointModel model = featnet::init_model(config, 3);

  featnet::TrainConfig train;
  train.epochs = 50;
  train.learning_rate = 1e12;
  CHECK_THROWS_AS(featnet::train(model, samples, train), NonFiniteLoss);
}

TEST_CASE("train validates its config and inputs") {
  util::Rng rng(205);
  const auto samples = clustered_samples(rng, 2, 4, 2);
  ModelConfig config;
  config.classes = 2;
  PointModel model = featnet::init_model(config, 1);

  featnet::TrainConfig train;
  train.epochs = 0;
  CHECK_THROWS_AS(featnet::train(model, samples, train), ConfigError);
  train.epochs = 1;
  train.learning_rate = 0.0;
  CHECK_THROWS_AS(featnet::train(model, samples, train), ConfigError);
  train.learning_rate = 0.1;
  train.momentum = 1.0;
  CHECK_THROWS_AS(featnet::train(model, samples, train), ConfigError);
  train.momentum = 0.0;
  CHECK_THROWS_AS(featnet::train(model, {}, train), DataError);
}

TEST_CASE("batch gradients validate samples") {
  ModelConfig config;
  config.classes = 2;
  PointModel model = featnet::init_model(config, 1);
  featnet::ModelGrads grads;

  TrainingSample s;
  s.inputs = Eigen::Matrix4Xd::Random(4, 2);
  s.target = 5;
  CHECK_THROWS_AS(featnet::batch_gradients(model, {s}, grads), DataError);
  s.target = 1;
  s.confidence = 0.0;
  CHECK_THROWS_AS(featnet::batch_gradients(model, {s}, grads),
                  ConfidenceOutOfRange);
  s.confidence = 1.0;
  s.inputs.resize(4, 0);
  CHECK_THROWS_AS(featnet::batch_gradients(model, {s}, grads),
                  EmptyNeighborhood);
  CHECK_THROWS_AS(featnet::batch_gradients(model, {}, grads), LengthMismatch);
}

TEST_CASE("init is bounded, zero-biased and seed-deterministic") {
  ModelConfig config;
  config.feature_dim = 6;
  config.hidden = {5};
  const auto a = featnet::init_model(config, 9);
  const auto b = featnet::init_model(config, 9);
  const auto c = featnet::init_model(config, 10);

  CHECK(a.phi.weights[0].cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(4.0));
  CHECK(a.phi.weights[1].cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(5.0));
  CHECK(a.head.weights[0].cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(6.0));
  for (const auto& bias : a.phi.biases) CHECK(bias.isZero(0.0));
  CHECK(a.phi.weights[0] == b.phi.weights[0]);
  CHECK(a.phi.weights[0] != c.phi.weights[0]);
}

TEST_CASE("neighbor inputs carry offsets and scaled time") {
  seqcloud::Sequence seq;
  seqcloud::Scan past;
  past.time_offset = -1;
  past.points.push_back({0.1, 0.2, 0.0, 0.0});
  seqcloud::Scan now;
  now.time_offset = 0;
  now.points.push_back({0.0, 0.0, 0.0, 0.0});
  now.points.push_back({0.4, 0.0, 0.0, 0.0});
  seq.scans = {past, now};
  seq.reference_index = 1;
  seq.aligned = true;

  const auto index = stindex::build_index(seq, stindex::IndexConfig{});
  const auto inputs = featnet::neighbor_inputs(index, {0.0, 0.0, 0.0, 0.0},
                                               1, 0, 0.5);
  REQUIRE(inputs.cols() == 3);
  CHECK(inputs(0, 0) == 0.1);
  CHECK(inputs(1, 0) == 0.2);
  CHECK(inputs(3, 0) == -0.5);  // offset -1 scaled by 0.5
  CHECK(inputs(3, 1) == 0.0);
  CHECK(inputs(0, 2) == 0.4);
}

TEST_CASE("a narrow index cannot serve a wide model") {
  seqcloud::Sequence seq;
  seqcloud::Scan now;
  now.time_offset = 0;
  now.points.push_back({0.0, 0.0, 0.0, 0.0});
  seq.scans = {now};
  seq.aligned = true;
  const auto index = stindex::build_index(seq, stindex::IndexConfig{});

  ModelConfig config;
  config.past = 1;
  config.future = 0;
  const auto model = featnet::init_model(config, 2);
  CHECK_THROWS_AS(
      featnet::featurize_points(model, index, {{0.0, 0.0, 0.0, 0.0}}),
      RangeMismatch);
}

TEST_CASE("predictions are proper distributions") {
  seqcloud::Sequence seq;
  seqcloud::Scan now;
  now.time_offset = 0;
  for (int i = 0; i < 12; ++i) {
    now.points.push_back({0.1 * i, 0.05 * i, 0.0, 0.0});
  }
  seq.scans = {now};
  seq.aligned = true;
  const auto index = stindex::build_index(seq, stindex::IndexConfig{});

  ModelConfig config;
  config.past = 0;
  config.future = 0;
  const auto model = featnet::init_model(config, 4);
  const auto probs = featnet::predict_points(model, index, seq.scans[0].points);
  REQUIRE(probs.size() == 12);
  for (const auto& p : probs) {
    double sum = 0.0;
    for (double v : p) {
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) <= 1e-9);
  }
}

TEST_CASE("checkpoints round-trip bitwise") {
  const auto dir = test_dir("roundtrip");
  ModelConfig config;
  config.classes = 3;
  config.feature_dim = 5;
  config.hidden = {6};
  config.past = 1;
  config.future = 0;
  config.time_scale = 0.25;
  config.index.max_per_offset = 7;
  const auto model = featnet::init_model(config, 77);

  const auto path = dir / "model.json";
  featnet::save_model(model, path);
  const auto loaded = featnet::load_model(path);

  CHECK(loaded.config.classes == 3);
  CHECK(loaded.config.past == 1);
  CHECK(loaded.config.time_scale == 0.25);
  CHECK(loaded.config.index.max_per_offset == 7);
  for (std::size_t l = 0; l < model.phi.weights.size(); ++l) {
    CHECK(loaded.phi.weights[l] == model.phi.weights[l]);
    CHECK(loaded.phi.biases[l] == model.phi.biases[l]);
  }
  CHECK(loaded.head.weights[0] == model.head.weights[0]);
}

TEST_CASE("malformed checkpoints are typed errors") {
  const auto dir = test_dir("malformed");
  const auto model = featnet::init_model(ModelConfig{}, 1);
  const auto path = dir / "model.json";
  featnet::save_model(model, path);

  std::ifstream in(path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  in.close();

  SUBCASE("unknown schema") {
    std::string tampered = text;
    const auto at = tampered.find("concord.model/1");
    REQUIRE(at != std::string::npos);
    tampered.replace(at, 15, "concord.model/9");
    std::ofstream(path) << tampered;
    CHECK_THROWS_AS(featnet::load_model(path), InvalidModel);
  }
  SUBCASE("truncated file") {
    std::ofstream(path) << text.substr(0, text.size() / 2);
    CHECK_THROWS_AS(featnet::load_model(path), InvalidModel);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(featnet::load_model(dir / "absent.json"), DataError);
  }
}

}  // TEST_SUITE
