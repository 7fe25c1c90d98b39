#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "pccforge/commands.hpp"

namespace {

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

}  // namespace

int main(int argc, char** argv) {
  using namespace pccforge;
#ifdef __GLIBC__
  // Keep large matrix buffers in the heap instead of mapping and unmapping them every step.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif

  CLI::App app{"pccforge: two-stage point cloud completion"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::string run_dir = "runs/default";
  std::string dcg_path, cref_path, coarse_dir;
  app.add_option("-c,--config", config_path, "key = value configuration file");
  app.add_option("-s,--set", overrides, "override a configuration key (key=value), repeatable");
  app.add_option("-r,--run-dir", run_dir, "directory for checkpoints, traces and reports")->capture_default_str();
  app.add_option("--dcg", dcg_path, "coarse generator checkpoint (default <run-dir>/dcg.ckpt)");
  app.add_option("--cref", cref_path, "refiner checkpoint (default <run-dir>/cref.ckpt)");
  app.add_option("--coarse-dir", coarse_dir, "coarse cloud cache (default <run-dir>/coarse)");

  auto* dataset = app.add_subcommand("dataset", "generate the synthetic dataset and manifest");

  std::string resume;
  auto* train_dcg = app.add_subcommand("train-dcg", "train the diffusion coarse generator");
  train_dcg->add_option("--resume", resume, "continue from a checkpoint");
  auto* train_cref = app.add_subcommand("train-cref", "train the refiner on cached coarse clouds");
  train_cref->add_option("--resume", resume, "continue from a checkpoint");

  std::string input, output, emit_coarse, heatmap;
  pccforge::Index heatmap_point = 0;
  auto* complete = app.add_subcommand("complete", "complete one partial cloud");
  complete->add_option("-i,--input", input, "partial cloud (.xyz or .ply)")->required();
  complete->add_option("-o,--output", output, "completed cloud (.xyz or .ply)")->required();
  complete->add_option("--emit-coarse", emit_coarse, "also write the coarse cloud here");
  complete->add_option("--heatmap", heatmap, "write a similarity heatmap CSV here");
  complete->add_option("--heatmap-point", heatmap_point, "sampled point whose similarity row is exported");

  std::string mode = "pipeline", split = "test", eval_out;
  bool no_emd = false;
  auto* evaluate = app.add_subcommand("evaluate", "compute CD, F-score, EMD and UHD over a split");
  evaluate->add_option("--mode", mode, "pipeline, coarse, mixed or ground-truth");
  evaluate->add_option("--split", split, "manifest split to evaluate");
  evaluate->add_option("--out", eval_out, "report directory (default <run-dir>/eval-<mode>)");
  evaluate->add_flag("--no-emd", no_emd, "skip the earth mover's distance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  RunConfig config;
  try {
    if (!config_path.empty()) config = load_config(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      apply_setting(config, kv.substr(0, eq), kv.substr(eq + 1));
    }
    validate(config);
  } catch (const Error& e) {
    std::cerr << "pccforge: " << e.what() << "\n";
    return kUsageError;
  }

  RunLayout layout = RunLayout::in(run_dir);
  if (!dcg_path.empty()) layout.dcg_checkpoint = dcg_path;
  if (!cref_path.empty()) layout.cref_checkpoint = cref_path;
  if (!coarse_dir.empty()) layout.coarse_dir = coarse_dir;
  const std::optional<fs::path> resume_from = resume.empty() ? std::nullopt : std::optional<fs::path>(resume);

  try {
    if (*dataset) {
      cmd_dataset(config, std::cerr);
    } else if (*train_dcg) {
      cmd_train_dcg(config, layout, resume_from, std::cerr);
    } else if (*train_cref) {
      cmd_train_cref(config, layout, resume_from, std::cerr);
    } else if (*complete) {
      write_effective_config(layout.run_dir, config);
      CompleteOptions opt;
      if (!emit_coarse.empty()) opt.coarse_output = emit_coarse;
      if (!heatmap.empty()) opt.heatmap_output = heatmap;
      opt.heatmap_point = heatmap_point;
      cmd_complete(config, layout, input, output, opt, std::cerr);
    } else if (*evaluate) {
      write_effective_config(layout.run_dir, config);
      EvalOptions opt;
      opt.mode = parse_eval_mode(mode);
      opt.split = split;
      opt.emd = !no_emd;
      if (!eval_out.empty()) opt.output_dir = eval_out;
      const EvalReport report = cmd_evaluate(config, layout, opt, std::cerr);
      if (!report.missing.empty()) return kRuntimeError;
    }
  } catch (const ConfigError& e) {
    std::cerr << "pccforge: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "pccforge: " << e.what() << "\n";
    return kRuntimeError;
  }
  return 0;
}
