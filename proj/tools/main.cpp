#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "concord/errors.hpp"
#include "concord/interchange.hpp"
#include "concord/pipeline.hpp"

namespace {

namespace pl = concord::pipeline;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct Overrides {
  std::string config_path;
  std::uint64_t seed = 0;
  std::string run_name;
  std::string data_dir;
  std::string out_dir;
  int workers = 0;
  int sequence_count = 0;
  double labeled_fraction = 0.0;
  int eval_sequences = 0;
  double lambda = 0.0;
  double theta = 0.0;
  std::string teacher_kind;
  std::string arrangement;
};

// flag > file > default: start from defaults, overlay the config file (flag
// --config, else $CONCORD_CONFIG), then overlay any flags that were passed.
pl::PipelineConfig resolve_config(const CLI::App& app, const Overrides& ov) {
  std::string path = ov.config_path;
  if (path.empty()) {
    const char* env = std::getenv(pl::kConfigEnvVar);
    if (env != nullptr && *env != '\0') path = env;
  }
  pl::PipelineConfig config;
  if (!path.empty()) config = pl::load_config(path);
  if (app.count("--seed")) config.seed = ov.seed;
  if (app.count("--run-name")) config.run_name = ov.run_name;
  if (app.count("--data-dir")) config.data_dir = ov.data_dir;
  if (app.count("--out-dir")) config.out_dir = ov.out_dir;
  if (app.count("--workers")) config.workers = ov.workers;
  if (app.count("--sequences")) config.sequence_count = ov.sequence_count;
  if (app.count("--labeled-fraction")) config.labeled_fraction = ov.labeled_fraction;
  if (app.count("--eval-sequences")) config.eval_sequences = ov.eval_sequences;
  if (app.count("--lambda")) config.fusion.lambda = ov.lambda;
  if (app.count("--theta")) config.fusion.theta = ov.theta;
  if (app.count("--teacher-kind")) config.teachers.kind = ov.teacher_kind;
  if (app.count("--arrangement")) config.teachers.arrangement = ov.arrangement;
  return config;
}

void report(const std::string& stage, const pl::StageResult& result) {
  std::cout << stage
            << (result.status == pl::StageStatus::skipped ? ": up to date ("
                                                          : ": ran (")
            << result.outputs.size() << " artifacts)\n";
}

int dispatch(const CLI::App& app, const Overrides& ov,
             const std::string& command,
             const std::vector<std::string>& compare_reports,
             const std::string& compare_out) {
  if (command == "compare") {
    std::vector<std::filesystem::path> paths(compare_reports.begin(),
                                             compare_reports.end());
    const auto comparison = pl::run_compare(paths, compare_out);
    std::cout << concord::evalkit::render_table(comparison);
    return kExitOk;
  }

  const pl::PipelineConfig config = resolve_config(app, ov);
  if (command == "synth") {
    report("synth", pl::run_synth(config));
  } else if (command == "teach") {
    report("teach", pl::run_teach(config));
  } else if (command == "fuse-seg") {
    report("fuse-seg", pl::run_fuse_seg(config));
  } else if (command == "fuse-det") {
    report("fuse-det", pl::run_fuse_det(config));
  } else if (command == "select") {
    report("select", pl::run_select(config));
  } else if (command == "train") {
    report("train", pl::run_train(config));
  } else if (command == "eval") {
    report("eval", pl::run_eval(config));
    const auto metrics = concord::interchange::read_metrics(
        std::filesystem::path(config.out_dir) / "metrics.json");
    std::cout << concord::interchange::render_metrics(metrics);
  } else if (command == "sweep") {
    report("sweep", pl::run_sweep(config));
    const auto points = concord::interchange::read_sweep(
        std::filesystem::path(config.out_dir) / "sweep.json");
    for (const auto& point : points) {
      std::cout << "theta " << point.theta;
      for (const auto& [key, value] : point.metrics)
        std::cout << "  " << key << " " << value;
      std::cout << '\n';
    }
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"concordance-of-teachers pseudo-labeling pipeline"};
  app.require_subcommand(1);

  Overrides ov;
  app.add_option("-c,--config", ov.config_path,
                 "pipeline config JSON (default: $CONCORD_CONFIG)");
  app.add_option("--seed", ov.seed, "pipeline seed");
  app.add_option("--run-name", ov.run_name, "name stamped into metric reports");
  app.add_option("--data-dir", ov.data_dir, "dataset directory");
  app.add_option("--out-dir", ov.out_dir, "stage output directory");
  app.add_option("--workers", ov.workers, "worker threads for per-sequence work");
  app.add_option("--sequences", ov.sequence_count, "training sequences to generate");
  app.add_option("--labeled-fraction", ov.labeled_fraction,
                 "fraction of sequences with human labels");
  app.add_option("--eval-sequences", ov.eval_sequences, "held-out sequences");
  app.add_option("--lambda", ov.lambda, "agreement weight");
  app.add_option("--theta", ov.theta, "selection threshold");
  app.add_option("--teacher-kind", ov.teacher_kind, "'synthetic' or 'trained'");
  app.add_option("--arrangement", ov.arrangement, "'concordance' or 'ensemble'");

  app.add_subcommand("synth", "generate the synthetic dataset and manifest");
  app.add_subcommand("teach", "run every teacher over the unlabeled split");
  app.add_subcommand("fuse-seg", "fuse per-point teacher predictions");
  app.add_subcommand("fuse-det", "cluster and fuse teacher boxes");
  app.add_subcommand("select", "apply the confidence threshold");
  app.add_subcommand("train", "train the student on labels + selected pseudo-labels");
  app.add_subcommand("eval", "evaluate the student and pseudo-label quality");
  auto* compare = app.add_subcommand("compare", "tabulate metric reports");
  std::vector<std::string> compare_reports;
  std::string compare_out = "compare.json";
  compare->add_option("reports", compare_reports, "metrics.json files")
      ->required()
      ->expected(2, -1);
  compare->add_option("--out", compare_out, "comparison output path");
  app.add_subcommand("sweep", "train and evaluate across selection thresholds");
  for (CLI::App* sub : app.get_subcommands(/*filter=*/nullptr))
    sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return dispatch(app, ov, command, compare_reports, compare_out);
  } catch (const concord::ConfigError& e) {
    std::cerr << e.what() << '\n';
    return kExitConfig;
  } catch (const concord::NonFiniteLoss& e) {
    std::cerr << e.what() << '\n';
    return kExitNumeric;
  } catch (const concord::Error& e) {
    std::cerr << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << e.what() << '\n';
    return kExitData;
  }
}
