#include "cahqp/experiment.hpp"

#include "cahqp/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

namespace cahqp {

namespace {

long ceil_div(long n, long d) { return (n + d - 1) / d; }

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

const Metric kMetrics[] = {Metric::pseudo_label_map, Metric::edge_map};

}  // namespace

ExperimentConfig baseline_config(const ExperimentConfig& config) {
  ExperimentConfig c = config;
  c.components = {false, false, false};
  c.adaptation.epochs = 0;
  return c;
}

std::vector<PlannedRow> comparison_rows(const ExperimentConfig& config) {
  const ComponentFlags f = config.components;
  const std::string label = f == ComponentFlags{true, true, true} ? "CA-HQP" : f.label();
  return {{kBaselineRow, baseline_config(config)}, {"+" + label, config}};
}

std::vector<PlannedRow> ablation_plan(const ExperimentConfig& config) {
  std::vector<PlannedRow> rows;
  for (const ComponentFlags& f : ablation_rows()) {
    ExperimentConfig c = config;
    c.components = f;
    rows.push_back({f.label(), c});
  }
  return rows;
}

StepEstimate estimate_steps(const std::vector<PlannedRow>& rows, std::size_t seeds) {
  StepEstimate e;
  if (rows.empty()) return e;
  const ExperimentConfig& first = rows.front().config;
  const auto& b = first.benchmark;
  const long adapt_images = static_cast<long>(b.target_images * b.adaptation_fraction + 0.5);
  const long n_seeds = static_cast<long>(seeds);
  e.pretrain = n_seeds * (first.cloud_pretrain.epochs * ceil_div(b.source_images, first.cloud_pretrain.batch_size) +
                          first.edge_pretrain.epochs * ceil_div(b.source_images, first.edge_pretrain.batch_size));
  for (const auto& row : rows) {
    const ExperimentConfig& c = row.config;
    const long streams = static_cast<long>(c.benchmark.targets.size());
    const long adapt = c.adaptation.epochs *
                       ceil_div(std::max<long>(c.benchmark.source_images, adapt_images), c.adaptation.batch_size);
    const long retrain = c.edge_retrain.epochs * ceil_div(adapt_images, c.edge_retrain.batch_size);
    e.adaptation += n_seeds * streams * adapt;
    e.retrain += n_seeds * streams * retrain;
  }
  return e;
}

std::vector<ReportRecord> execute_rows(const std::vector<PlannedRow>& rows, const std::filesystem::path& snapshot_root,
                                       const ProgressFn& progress) {
  if (rows.empty()) return {};
  const ExperimentConfig& first = rows.front().config;
  validate(first);
  const Benchmark bench = build_benchmark(first.benchmark);
  std::vector<ReportRecord> records;
  for (const std::uint64_t seed : first.seeds) {
    if (progress) progress("seed " + std::to_string(seed) + ": pretraining");
    const Detector cloud = pretrain_cloud_model(first, bench.source, seed);
    const Detector edge = pretrain_edge_model(first, bench.source, seed);
    const CycleInputs inputs{&bench.source, bench.targets, &cloud, &edge};
    for (const auto& row : rows) {
      validate(row.config);
      if (progress) progress("seed " + std::to_string(seed) + ": " + row.label);
      std::filesystem::path snaps;
      if (!snapshot_root.empty()) {
        snaps = snapshot_root / row.label;
        std::filesystem::create_directories(snaps);
      }
      for (const CycleReport& r : run_collaboration_cycle(inputs, row.config, seed, snaps)) {
        records.push_back({row.label, r});
      }
    }
  }
  return records;
}

void write_outputs(const std::filesystem::path& dir, const std::string& stem, const std::vector<ReportRecord>& records,
                   bool with_seed_detail) {
  std::filesystem::create_directories(dir);
  const auto jsonl = dir / (stem + ".jsonl");
  std::filesystem::remove(jsonl);
  append_records(jsonl, records);
  for (const Metric m : kMetrics) {
    const SummaryTable t = summarize(records, m);
    const std::string name = metric_name(m);
    write_text(dir / (stem + "_summary_" + name + ".txt"), format_table(t));
    write_text(dir / (stem + "_summary_" + name + ".json"), table_json(t));
    if (with_seed_detail) write_text(dir / (stem + "_seed_detail_" + name + ".txt"), format_seed_detail(records, m));
  }
}

void write_effective_config(const std::filesystem::path& dir, const ExperimentConfig& config) {
  std::filesystem::create_directories(dir);
  write_text(dir / kEffectiveConfigFile, to_json_text(config));
}

std::vector<std::filesystem::path> plot_directory(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("not a directory: " + dir.string());
  std::vector<std::filesystem::path> inputs;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".jsonl") inputs.push_back(e.path());
  }
  std::sort(inputs.begin(), inputs.end());

  std::vector<std::filesystem::path> written;
  const auto plots = dir / "plots";
  for (const auto& input : inputs) {
    const auto records = read_records(input);
    if (records.empty()) continue;
    std::filesystem::create_directories(plots);
    const std::string stem = input.stem().string();
    for (const Metric m : kMetrics) {
      SummaryTable t = summarize(records, m);
      t.title = stem + ": " + metric_name(m);
      const auto streams = plots / (stem + "_" + metric_name(m) + "_streams.svg");
      write_text(streams, bar_chart_svg(t));
      written.push_back(streams);
      if (stem == "ablation") {
        // Mean over streams only: one group, one bar per ablation row.
        SummaryTable means = t;
        means.columns.clear();
        for (auto& row : means.cells) row.clear();
        const auto chart = plots / (stem + "_" + metric_name(m) + "_rows.svg");
        write_text(chart, bar_chart_svg(means));
        written.push_back(chart);
      }
    }
  }
  if (written.empty()) throw std::runtime_error("no cycle reports found in " + dir.string());
  return written;
}

std::vector<std::string> export_benchmark(const BenchmarkConfig& config, const std::filesystem::path& dir) {
  const std::string err = config.validate();
  if (!err.empty()) throw std::invalid_argument(err);
  const Benchmark bench = build_benchmark(config);
  std::filesystem::create_directories(dir);
  std::vector<std::string> stems;
  save_dataset(bench.source, dir, "source", config.scene.image_size);
  stems.push_back("source");
  for (const auto& t : bench.targets) {
    for (const auto* d : {&t.adaptation, &t.evaluation}) {
      const std::string stem = t.spec.name + (d == &t.adaptation ? "_adaptation" : "_evaluation");
      save_dataset(*d, dir, stem, config.scene.image_size);
      stems.push_back(stem);
    }
  }
  return stems;
}

}  // namespace cahqp
