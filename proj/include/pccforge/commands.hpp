#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "pccforge/checkpoint.hpp"
#include "pccforge/config.hpp"
#include "pccforge/cref.hpp"
#include "pccforge/data.hpp"
#include "pccforge/diffusion.hpp"
#include "pccforge/metrics.hpp"

namespace pccforge {

namespace fs = std::filesystem;

DcgSpec dcg_spec_from(const RunConfig& config);
DiffusionSchedule training_schedule(const RunConfig& config);
/// Training schedule, respaced to `sample_steps` when that is smaller.
DiffusionSchedule sampling_schedule(const RunConfig& config);

/// Per-sample generation seed derived from the run seed.
std::uint64_t sample_seed(const RunConfig& config, const std::string& id);

/// Where a run keeps its artefacts.
struct RunLayout {
  fs::path run_dir;
  fs::path dcg_checkpoint;
  fs::path cref_checkpoint;
  fs::path coarse_dir;

  static RunLayout in(const fs::path& run_dir);
};

/// Writes `config.txt` (the effective configuration) into the run directory.
void write_effective_config(const fs::path& run_dir, const RunConfig& config);

/// A checkpoint together with the configuration it was trained under.
struct LoadedModel {
  Checkpoint checkpoint;
  RunConfig config;
  Index step = 0;
};
LoadedModel load_model(const fs::path& path, const std::string& kind);

struct TrainResult {
  fs::path checkpoint;
  fs::path loss_trace;
  Index final_step = 0;
  double final_loss = 0.0;
  Index logged_rows = 0;
};

Manifest cmd_dataset(const RunConfig& config, std::ostream& log);

TrainResult cmd_train_dcg(const RunConfig& config, const RunLayout& layout, const std::optional<fs::path>& resume,
                          std::ostream& log);

/// Generates (or reuses) cached coarse clouds for the given records. Needs the DCG
/// checkpoint only when something is missing from the cache.
std::vector<Points> ensure_coarse(const RunConfig& config, const RunLayout& layout, const Manifest& manifest,
                                  const std::vector<const SampleRecord*>& records, std::ostream& log);

TrainResult cmd_train_cref(const RunConfig& config, const RunLayout& layout, const std::optional<fs::path>& resume,
                           std::ostream& log);

struct CompleteOptions {
  std::optional<fs::path> coarse_output;
  std::optional<fs::path> heatmap_output;
  Index heatmap_point = 0;  // row of the sampled cloud whose similarity row is exported
};

/// Runs both stages on one partial cloud and writes the completed cloud.
Points cmd_complete(const RunConfig& config, const RunLayout& layout, const fs::path& input, const fs::path& output,
                    const CompleteOptions& options, std::ostream& log);

enum class EvalMode {
  Pipeline,     // coarse generation then refinement
  Coarse,       // coarse cloud only
  MixedSample,  // mixed sampling without any refinement
  GroundTruth,  // ground truth against itself
};
std::string to_string(EvalMode mode);
EvalMode parse_eval_mode(const std::string& text);

struct EvalOptions {
  EvalMode mode = EvalMode::Pipeline;
  bool emd = true;
  std::string split = "test";
  std::optional<fs::path> output_dir;  // defaults to <run>/eval-<mode>
};

struct EvalRow {
  std::string id;
  std::string family;
  MetricReport metrics;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::vector<std::string> missing;  // records skipped because a file could not be read
  std::map<std::string, MetricReport> per_family;
  MetricReport overall;
  fs::path output_dir;
};

EvalReport cmd_evaluate(const RunConfig& config, const RunLayout& layout, const EvalOptions& options,
                        std::ostream& log);

}  // namespace pccforge
