#include "cahqp/report.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace cahqp {

using nlohmann::json;

namespace {

json flags_json(const ComponentFlags& f) { return {{"dqfa", f.dqfa}, {"tiafa", f.tiafa}, {"vpg", f.vpg}}; }

int index_of(std::vector<std::string>& names, const std::string& name) {
  auto it = std::find(names.begin(), names.end(), name);
  if (it != names.end()) return static_cast<int>(it - names.begin());
  names.push_back(name);
  return static_cast<int>(names.size()) - 1;
}

std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

const char* metric_name(Metric m) { return m == Metric::pseudo_label_map ? "pseudo_label_map" : "edge_map"; }

double metric_value(const CycleReport& r, Metric m) {
  return m == Metric::pseudo_label_map ? r.pseudo_label_map : r.edge_map;
}

std::string to_json_line(const ReportRecord& record) {
  const CycleReport& r = record.report;
  const json j = {{"row", record.row},
                  {"cycle", r.cycle},
                  {"stream", r.stream},
                  {"seed", r.seed},
                  {"flags", flags_json(r.flags)},
                  {"pseudo_label_map", r.pseudo_label_map},
                  {"edge_map", r.edge_map},
                  {"pseudo_label_count", r.pseudo_label_count},
                  {"final_detection_loss", r.final_detection_loss},
                  {"final_adversarial_loss", r.final_adversarial_loss}};
  return j.dump();
}

ReportRecord parse_json_line(const std::string& line) {
  try {
    const json j = json::parse(line);
    ReportRecord rec;
    rec.row = j.at("row").get<std::string>();
    CycleReport& r = rec.report;
    r.cycle = j.at("cycle").get<int>();
    r.stream = j.at("stream").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.flags = {j.at("flags").at("dqfa").get<bool>(), j.at("flags").at("tiafa").get<bool>(),
               j.at("flags").at("vpg").get<bool>()};
    r.pseudo_label_map = j.at("pseudo_label_map").get<double>();
    r.edge_map = j.at("edge_map").get<double>();
    r.pseudo_label_count = j.at("pseudo_label_count").get<long>();
    r.final_detection_loss = j.at("final_detection_loss").get<double>();
    r.final_adversarial_loss = j.at("final_adversarial_loss").get<double>();
    return rec;
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("malformed report record: ") + e.what());
  }
}

void append_records(const std::filesystem::path& path, const std::vector<ReportRecord>& records) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : records) out << to_json_line(r) << '\n';
}

std::vector<ReportRecord> read_records(const std::filesystem::path& path) {
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_directory(path)) {
    for (const auto& e : std::filesystem::directory_iterator(path)) {
      if (e.is_regular_file() && e.path().extension() == ".jsonl") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
  } else if (std::filesystem::exists(path)) {
    files.push_back(path);
  } else {
    throw std::runtime_error("no such report path: " + path.string());
  }
  std::vector<ReportRecord> out;
  for (const auto& f : files) {
    std::ifstream in(f);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty()) out.push_back(parse_json_line(line));
    }
  }
  return out;
}

SummaryTable summarize(const std::vector<ReportRecord>& records, Metric metric) {
  SummaryTable t;
  t.title = metric_name(metric);
  std::map<std::pair<int, int>, std::pair<double, int>> acc;
  for (const auto& rec : records) {
    const int r = index_of(t.rows, rec.row);
    const int c = index_of(t.columns, rec.report.stream);
    auto& [sum, n] = acc[{r, c}];
    sum += metric_value(rec.report, metric);
    ++n;
    if (std::find(t.seeds.begin(), t.seeds.end(), rec.report.seed) == t.seeds.end()) t.seeds.push_back(rec.report.seed);
  }
  t.cells.assign(t.rows.size(), std::vector<double>(t.columns.size(), 0.0));
  t.row_means.assign(t.rows.size(), 0.0);
  for (size_t r = 0; r < t.rows.size(); ++r) {
    int present = 0;
    for (size_t c = 0; c < t.columns.size(); ++c) {
      auto it = acc.find({static_cast<int>(r), static_cast<int>(c)});
      if (it == acc.end()) continue;
      t.cells[r][c] = it->second.first / it->second.second;
      t.row_means[r] += t.cells[r][c];
      ++present;
    }
    if (present > 0) t.row_means[r] /= present;
  }
  return t;
}

std::string format_table(const SummaryTable& table) {
  size_t label_width = 4;
  for (const auto& r : table.rows) label_width = std::max(label_width, r.size());
  std::vector<std::string> headers = table.columns;
  headers.push_back("Mean");
  std::vector<size_t> widths;
  for (const auto& h : headers) widths.push_back(std::max<size_t>(h.size(), 6));

  std::ostringstream out;
  out << table.title << " (mean over " << table.seeds.size() << " seed" << (table.seeds.size() == 1 ? "" : "s") << ")\n";
  auto pad_left = [](const std::string& s, size_t w) { return std::string(w > s.size() ? w - s.size() : 0, ' ') + s; };
  auto pad_right = [](const std::string& s, size_t w) { return s + std::string(w > s.size() ? w - s.size() : 0, ' '); };
  out << pad_right("", label_width);
  for (size_t c = 0; c < headers.size(); ++c) out << "  " << pad_left(headers[c], widths[c]);
  out << '\n';
  for (size_t r = 0; r < table.rows.size(); ++r) {
    out << pad_right(table.rows[r], label_width);
    for (size_t c = 0; c < table.columns.size(); ++c) out << "  " << pad_left(fixed(table.cells[r][c]), widths[c]);
    out << "  " << pad_left(fixed(table.row_means[r]), widths.back()) << '\n';
  }
  return out.str();
}

std::string table_json(const SummaryTable& table) {
  json rows = json::array();
  for (size_t r = 0; r < table.rows.size(); ++r) {
    json cells = json::object();
    for (size_t c = 0; c < table.columns.size(); ++c) cells[table.columns[c]] = table.cells[r][c];
    rows.push_back({{"row", table.rows[r]}, {"streams", cells}, {"mean", table.row_means[r]}});
  }
  const json j = {{"metric", table.title}, {"seeds", table.seeds}, {"columns", table.columns}, {"rows", rows}};
  return j.dump(2) + "\n";
}

std::string format_seed_detail(const std::vector<ReportRecord>& records, Metric metric) {
  std::ostringstream out;
  for (const auto& rec : records) {
    out << rec.row << "  seed " << rec.report.seed << "  cycle " << rec.report.cycle << "  " << rec.report.stream << "  "
        << metric_name(metric) << ' ' << fixed(metric_value(rec.report, metric), 4) << '\n';
  }
  return out.str();
}

std::string bar_chart_svg(const SummaryTable& table) {
  static const char* kColors[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c"};
  const int groups = static_cast<int>(table.columns.size()) + 1;
  const int bars = std::max<int>(1, static_cast<int>(table.rows.size()));
  const int bar_w = 14, gap = 18, left = 50, top = 40, plot_h = 240;
  const int group_w = bars * bar_w + gap;
  const int width = left + groups * group_w + 20;
  const int legend_h = 18 * bars;
  const int height = top + plot_h + 50 + legend_h;

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << left << "\" y=\"20\" font-size=\"14\">" << xml_escape(table.title) << " (mAP)</text>\n";
  for (int tick = 0; tick <= 100; tick += 20) {
    const int y = top + plot_h - tick * plot_h / 100;
    s << "<line x1=\"" << left << "\" y1=\"" << y << "\" x2=\"" << width - 20 << "\" y2=\"" << y
      << "\" stroke=\"#dddddd\"/>\n";
    s << "<text x=\"" << left - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << tick << "</text>\n";
  }
  for (int g = 0; g < groups; ++g) {
    const bool mean = g == groups - 1;
    const int x0 = left + g * group_w + gap / 2;
    for (int r = 0; r < static_cast<int>(table.rows.size()); ++r) {
      const double v = std::clamp(mean ? table.row_means[static_cast<size_t>(r)]
                                       : table.cells[static_cast<size_t>(r)][static_cast<size_t>(g)],
                                  0.0, 100.0);
      const double h = v * plot_h / 100.0;
      s << "<rect x=\"" << x0 + r * bar_w << "\" y=\"" << fixed(top + plot_h - h) << "\" width=\"" << bar_w - 2
        << "\" height=\"" << fixed(h) << "\" fill=\"" << kColors[r % 8] << "\"><title>" << xml_escape(table.rows[static_cast<size_t>(r)])
        << ": " << fixed(v) << "</title></rect>\n";
    }
    const std::string label = mean ? "Mean" : table.columns[static_cast<size_t>(g)];
    s << "<text x=\"" << x0 + bars * bar_w / 2 << "\" y=\"" << top + plot_h + 16 << "\" text-anchor=\"middle\">"
      << xml_escape(label) << "</text>\n";
  }
  for (int r = 0; r < static_cast<int>(table.rows.size()); ++r) {
    const int y = top + plot_h + 34 + 18 * r;
    s << "<rect x=\"" << left << "\" y=\"" << y - 10 << "\" width=\"12\" height=\"12\" fill=\"" << kColors[r % 8]
      << "\"/>\n";
    s << "<text x=\"" << left + 18 << "\" y=\"" << y << "\">" << xml_escape(table.rows[static_cast<size_t>(r)])
      << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace cahqp
