// cst: synthetic data, proposal extraction, training, classification and
// evaluation from one binary.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <spdlog/cfg/helpers.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "commands.hpp"

namespace {

using namespace cst;
using namespace cst::app;

constexpr int kExitOk = 0;
constexpr int kExitPartial = 1;
constexpr int kExitFatal = 2;

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
  std::string dump_tensors;
  std::string unit;
  bool eq1_literal = false;
};

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("cst");
  logger->set_pattern("[%l] %v");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::info);
  if (const char* level = std::getenv("CST_LOG")) spdlog::cfg::helpers::load_levels(level);
}

RunConfig effective_config(const GlobalOptions& g) {
  RunConfig config = g.config.empty() ? RunConfig{} : load_config(g.config);
  if (g.seed) config.reseed(*g.seed);
  if (g.jobs) config.jobs = *g.jobs;
  if (!g.dump_tensors.empty()) config.dump_tensors = g.dump_tensors;
  if (!g.unit.empty()) config.evaluation.unit = eval_unit_from_string(g.unit);
  if (g.eq1_literal) {
    config.enhance.enabled = true;
    config.enhance.equalize.literal_denominator = true;
  }
  config.validate();
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();

  CLI::App app{"Cascaded structure tensor proposals for X-ray scans"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Seed for synthesis, splitting and training");
  app.add_option("--jobs", g.jobs, "Worker threads for per-scan work")->check(CLI::PositiveNumber);
  app.add_option("--dump-tensors", g.dump_tensors, "Write the selected tensor map of every pass here");
  app.add_option("--unit", g.unit, "Evaluation unit")->check(CLI::IsMember({"boxes", "pixels"}));
  app.add_flag("--eq1-literal", g.eq1_literal,
               "Enhance scans first, normalizing the equalization by the whole-image pixel count");

  std::size_t count = 20;
  std::string out, manifest_path, proposals, model, detections, subset = "all";

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth->add_option("--count", count, "Number of scans")->check(CLI::NonNegativeNumber);
  synth->add_option("--out", out, "Output directory")->required();

  auto* extract = app.add_subcommand("extract", "Extract proposals from a dataset");
  extract->add_option("--manifest", manifest_path, "Dataset manifest")->required()->check(CLI::ExistingFile);
  extract->add_option("--out", out, "Output directory")->required();
  extract->add_option("--subset", subset, "Part of the split to process")->check(CLI::IsMember({"all", "train", "test"}));

  auto* train_cmd = app.add_subcommand("train", "Train the proposal classifier");
  train_cmd->add_option("--proposals", proposals, "Labelled proposal set directory")->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("--model", model, "Model file to write")->required();

  auto* classify = app.add_subcommand("classify", "Classify a proposal set");
  classify->add_option("--model", model, "Model file")->required()->check(CLI::ExistingFile);
  classify->add_option("--proposals", proposals, "Proposal set directory")->required()->check(CLI::ExistingDirectory);
  classify->add_option("--out", out, "Detections file (JSON lines)")->required();

  auto* evaluate_cmd = app.add_subcommand("evaluate", "Score detections against ground truth");
  evaluate_cmd->add_option("--detections", detections, "Detections file")->required()->check(CLI::ExistingFile);
  evaluate_cmd->add_option("--manifest", manifest_path, "Dataset manifest")->required()->check(CLI::ExistingFile);
  evaluate_cmd->add_option("--out", out, "Report directory")->required();
  evaluate_cmd->add_option("--subset", subset, "Part of the split to score")->check(CLI::IsMember({"all", "train", "test"}));

  auto* pipeline = app.add_subcommand("pipeline", "Extract, classify and evaluate in one run");
  pipeline->add_option("--manifest", manifest_path, "Dataset manifest")->required()->check(CLI::ExistingFile);
  pipeline->add_option("--model", model, "Model file")->required()->check(CLI::ExistingFile);
  pipeline->add_option("--out", out, "Output directory")->required();
  pipeline->add_option("--subset", subset, "Part of the split to process")->check(CLI::IsMember({"all", "train", "test"}));

  for (auto* sub : {synth, extract, train_cmd, classify, evaluate_cmd, pipeline}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitFatal;
  }

  try {
    const RunConfig config = effective_config(g);
    auto load = [&] { return select_subset(load_manifest(manifest_path), config, subset_from_string(subset)); };
    if (*synth) {
      return cmd_synth(config, count, out).failures ? kExitPartial : kExitOk;
    } else if (*extract) {
      return cmd_extract(config, load(), out).failures ? kExitPartial : kExitOk;
    } else if (*train_cmd) {
      cmd_train(config, proposals, model);
    } else if (*classify) {
      cmd_classify(config, model, proposals, out);
    } else if (*evaluate_cmd) {
      cmd_evaluate(config, detections, load(), out);
    } else if (*pipeline) {
      return cmd_pipeline(config, load(), model, out).failures ? kExitPartial : kExitOk;
    }
    return kExitOk;
  } catch (const StageError& e) {
    spdlog::critical("stage {} failed: {}", e.stage(), e.what());
    return kExitFatal;
  } catch (const std::exception& e) {
    spdlog::critical("{}", e.what());
    return kExitFatal;
  }
}
