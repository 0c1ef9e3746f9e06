#pragma once

// Config-driven experiment drivers behind the command-line tool: single runs,
// the ablation grid, plot emission and dataset export.

#include "cahqp/config.hpp"
#include "cahqp/report.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace cahqp {

// Table row label of the no-update baseline: cloud model used as pretrained.
inline constexpr const char* kBaselineRow = "baseline";

// A labelled configuration variant; every row of a table is run over all seeds.
struct PlannedRow {
  std::string label;
  ExperimentConfig config;
};

// The baseline configuration: adaptation disabled, every component off.
ExperimentConfig baseline_config(const ExperimentConfig& config);
// Baseline followed by the configuration itself (labelled "+" + its flags).
std::vector<PlannedRow> comparison_rows(const ExperimentConfig& config);
// The five ablation flag combinations in table order.
std::vector<PlannedRow> ablation_plan(const ExperimentConfig& config);

// Optimizer steps a plan would take: pretraining once per seed plus, per row
// and seed, adaptation and edge retraining on every stream (upper bound: the
// retraining step count assumes pseudo-labels are not empty).
struct StepEstimate {
  long pretrain = 0;
  long adaptation = 0;
  long retrain = 0;
  long total() const { return pretrain + adaptation + retrain; }
};
StepEstimate estimate_steps(const std::vector<PlannedRow>& rows, std::size_t seeds);

using ProgressFn = std::function<void(const std::string&)>;

// Runs every row over every seed of the first row's seed list. Pretrained
// models are shared by all rows of a seed. Snapshots go under
// snapshot_root/<row>/ when snapshot_root is non-empty.
std::vector<ReportRecord> execute_rows(const std::vector<PlannedRow>& rows, const std::filesystem::path& snapshot_root,
                                       const ProgressFn& progress = {});

// Files written by write_outputs, relative to the output directory.
inline constexpr const char* kEffectiveConfigFile = "config.json";

// Writes <stem>.jsonl, <stem>_summary_<metric>.{txt,json} for both metrics
// and, when with_seed_detail, <stem>_seed_detail_<metric>.txt, replacing
// earlier files.
void write_outputs(const std::filesystem::path& dir, const std::string& stem, const std::vector<ReportRecord>& records,
                   bool with_seed_detail);
void write_effective_config(const std::filesystem::path& dir, const ExperimentConfig& config);

// Renders every *.jsonl of dir into dir/plots: a grouped per-stream chart per
// file and metric and, for ablation results, a one-bar-per-row mean chart.
// Returns the written paths; throws std::runtime_error when dir holds no records.
std::vector<std::filesystem::path> plot_directory(const std::filesystem::path& dir);

// Writes the source set and every target stream's adaptation and evaluation
// splits with save_dataset. Returns the dataset stems written.
std::vector<std::string> export_benchmark(const BenchmarkConfig& config, const std::filesystem::path& dir);

}  // namespace cahqp
