#pragma once

// Result records, summary tables and plots for experiment runs.

#include "cahqp/pipeline.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace cahqp {

// A cycle report tagged with the table row (method or ablation cell) it belongs to.
struct ReportRecord {
  std::string row;
  CycleReport report;

  bool operator==(const ReportRecord&) const = default;
};

enum class Metric { pseudo_label_map, edge_map };
const char* metric_name(Metric m);
double metric_value(const CycleReport& r, Metric m);

std::string to_json_line(const ReportRecord& record);
ReportRecord parse_json_line(const std::string& line);
// Appends one line per record.
void append_records(const std::filesystem::path& path, const std::vector<ReportRecord>& records);
// Reads a .jsonl file, or every *.jsonl file of a directory in name order.
std::vector<ReportRecord> read_records(const std::filesystem::path& path);

// Rows x streams of seed-averaged values, plus the per-row mean over streams.
struct SummaryTable {
  std::string title;
  std::vector<std::string> rows;
  std::vector<std::string> columns;       // streams, without the Mean column
  std::vector<std::vector<double>> cells; // [row][column], mean over seeds
  std::vector<double> row_means;          // arithmetic mean of the row's cells
  std::vector<std::uint64_t> seeds;
};

// Rows and columns keep first-appearance order of the records.
SummaryTable summarize(const std::vector<ReportRecord>& records, Metric metric);

std::string format_table(const SummaryTable& table);
std::string table_json(const SummaryTable& table);
// Per-seed values of every cell, one line each.
std::string format_seed_detail(const std::vector<ReportRecord>& records, Metric metric);

// Grouped bar chart: one group per stream plus a Mean group, one bar per row.
std::string bar_chart_svg(const SummaryTable& table);

}  // namespace cahqp
