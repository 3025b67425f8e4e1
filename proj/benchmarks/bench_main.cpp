// Microbenchmarks for the hot paths: fusion, index queries, box IoU,
// clustering and the student forward pass.

#include <benchmark/benchmark.h>

#include <vector>

#include <concord/detfuse.hpp>
#include <concord/featnet.hpp>
#include <concord/fusion.hpp>
#include <concord/seqcloud.hpp>
#include <concord/stindex.hpp>
#include <concord/synthlab.hpp>
#include <concord/util/rng.hpp>

using namespace concord;

namespace {

std::vector<std::vector<double>> random_probs(util::Rng& rng, int points,
                                              int classes) {
  std::vector<std::vector<double>> out(points);
  for (auto& row : out) {
    row.resize(classes);
    double sum = 0.0;
    for (double& v : row) {
      v = rng.uniform() + 1e-3;
      sum += v;
    }
    for (double& v : row) v /= sum;
  }
  return out;
}

std::vector<fusion::TeacherOutput> teacher_set(int points) {
  util::Rng rng(7);
  std::vector<fusion::TeacherOutput> outputs;
  for (int t = 0; t < 3; ++t) {
    fusion::TeacherOutput out;
    out.teacher = "t" + std::to_string(t);
    out.range = t + 1;
    out.probs = random_probs(rng, points, 4);
    outputs.push_back(std::move(out));
  }
  return outputs;
}

seqcloud::Sequence bench_sequence() {
  synthlab::WorldConfig world;
  world.seed = 17;
  world.ground_points = 1200;
  world.vehicles = 4;
  world.walkers = 4;
  world.points_per_object = 60;
  return seqcloud::align_sequence(synthlab::generate_sequence(world));
}

void BM_FuseScan(benchmark::State& state) {
  const auto outputs = teacher_set(static_cast<int>(state.range(0)));
  const fusion::FusionConfig config{0.1, 0.8};
  for (auto _ : state) {
    benchmark::DoNotOptimize(fusion::fuse_scan(outputs, config));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_FuseScan)->Arg(1000)->Arg(10000);

void BM_IndexBuild(benchmark::State& state) {
  const auto seq = bench_sequence();
  const stindex::IndexConfig config;
  for (auto _ : state) {
    benchmark::DoNotOptimize(stindex::build_index(seq, config));
  }
}
BENCHMARK(BM_IndexBuild);

void BM_IndexQuery(benchmark::State& state) {
  const auto seq = bench_sequence();
  const auto index = stindex::build_index(seq, stindex::IndexConfig{});
  const auto& queries = seq.reference().points;
  std::size_t at = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(index.neighbors(queries[at], 2, 2));
    at = (at + 1) % queries.size();
  }
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_IndexQuery);

void BM_Iou3d(benchmark::State& state) {
  Box3D a, b;
  a.center = {0.0, 0.0, 0.0};
  a.length = 4.2;
  a.width = 1.9;
  a.height = 1.6;
  a.yaw = 0.3;
  b = a;
  b.center = {0.8, -0.4, 0.1};
  b.yaw = -0.25;
  for (auto _ : state) {
    benchmark::DoNotOptimize(detfuse::iou3d(a, b));
  }
}
BENCHMARK(BM_Iou3d);

void BM_GreedyCluster(benchmark::State& state) {
  util::Rng rng(11);
  std::vector<Box3D> boxes;
  for (int i = 0; i < state.range(0); ++i) {
    Box3D box;
    box.center = {rng.uniform(-20, 20), rng.uniform(-20, 20), 0.0};
    box.length = rng.uniform(1.0, 4.5);
    box.width = rng.uniform(1.0, 2.0);
    box.height = rng.uniform(1.0, 2.0);
    box.yaw = rng.uniform(-1.5, 1.5);
    const double s = rng.uniform(0.3, 1.0);
    box.probs = {s, 1.0 - s};
    box.teacher = i % 3;
    boxes.push_back(box);
  }
  const detfuse::ClusterConfig config;
  for (auto _ : state) {
    benchmark::DoNotOptimize(detfuse::greedy_cluster(boxes, config));
  }
}
BENCHMARK(BM_GreedyCluster)->Arg(32)->Arg(128);

void BM_PredictPoints(benchmark::State& state) {
  const auto seq = bench_sequence();
  featnet::ModelConfig config;
  config.index.max_per_offset = 8;
  const auto model = featnet::init_model(config, 3);
  const auto index = stindex::build_index(seq, config.index);
  const auto& queries = seq.reference().points;
  for (auto _ : state) {
    benchmark::DoNotOptimize(featnet::predict_points(model, index, queries));
  }
  state.SetItemsProcessed(state.iterations() * queries.size());
}
BENCHMARK(BM_PredictPoints);

}  // namespace

BENCHMARK_MAIN();
