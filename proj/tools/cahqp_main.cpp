// cahqp: run the cloud-edge adaptation experiments from a JSON config.
//
//   cahqp run --config exp.json [--seeds 1,2,3] [--no-vpg] [--tau 0.6] [--out dir]
//   cahqp ablation --config exp.json
//   cahqp plot --out runs/exp
//   cahqp gen-data [--config exp.json] --out data/
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.

#include "cahqp/config.hpp"
#include "cahqp/experiment.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;
constexpr const char* kOutputRootEnv = "CAHQP_OUTPUT_ROOT";

struct Overrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::uint64_t> seeds;
  std::string out;
  bool dry_run = false;
  int dqfa = 0;  // > 0 on, < 0 off, 0 from config
  int tiafa = 0;
  int vpg = 0;
  std::optional<double> tau;
  std::optional<int> epochs;
};

void add_experiment_options(CLI::App& cmd, Overrides& o, bool with_flags) {
  cmd.add_option("--config", o.config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd.add_option("--seed", o.seed, "Run a single seed instead of the config's list");
  cmd.add_option("--seeds", o.seeds, "Comma-separated seed list")->delimiter(',');
  cmd.add_option("--out", o.out, "Output directory (default: $" + std::string(kOutputRootEnv) + "/<name>)");
  cmd.add_flag("--dry-run", o.dry_run, "Print the effective config and step estimate, then exit");
  if (with_flags) {
    cmd.add_flag("--dqfa,!--no-dqfa", o.dqfa, "Domain-query feature alignment");
    cmd.add_flag("--tiafa,!--no-tiafa", o.tiafa, "Target-instance adversarial feature alignment");
    cmd.add_flag("--vpg,!--no-vpg", o.vpg, "Visual prompt generator");
  }
  cmd.add_option("--tau", o.tau, "Pseudo-label confidence threshold");
  cmd.add_option("--epochs", o.epochs, "Adaptation epochs per cycle");
}

cahqp::ExperimentConfig effective_config(const Overrides& o) {
  cahqp::ExperimentConfig c = cahqp::load_config(o.config_path);
  if (o.seed) c.seeds = {*o.seed};
  if (!o.seeds.empty()) c.seeds = o.seeds;
  if (o.dqfa != 0) c.components.dqfa = o.dqfa > 0;
  if (o.tiafa != 0) c.components.tiafa = o.tiafa > 0;
  if (o.vpg != 0) c.components.vpg = o.vpg > 0;
  if (o.tau) c.adversarial.tau = *o.tau;
  if (o.epochs) c.adaptation.epochs = *o.epochs;
  if (!o.out.empty()) c.output_dir = o.out;
  cahqp::validate(c);
  return c;
}

std::filesystem::path output_dir(const Overrides& o, const cahqp::ExperimentConfig& c) {
  if (!o.out.empty()) return o.out;
  const char* root = std::getenv(kOutputRootEnv);
  return std::filesystem::path(root && *root ? root : c.output_dir) / c.name;
}

void print_plan(const std::vector<cahqp::PlannedRow>& rows, const cahqp::ExperimentConfig& c,
                const std::filesystem::path& out) {
  const cahqp::StepEstimate e = cahqp::estimate_steps(rows, c.seeds.size());
  std::cout << cahqp::to_json_text(c) << '\n';
  std::cout << "output: " << out.string() << '\n';
  std::cout << "rows:";
  for (const auto& r : rows) std::cout << ' ' << r.label;
  std::cout << "\nseeds: " << c.seeds.size() << "  streams: " << c.benchmark.targets.size() << '\n';
  std::cout << "estimated optimizer steps: " << e.total() << " (pretrain " << e.pretrain << ", adaptation "
            << e.adaptation << ", edge retraining " << e.retrain << ")\n";
}

int run_plan(const Overrides& o, bool ablation) {
  const cahqp::ExperimentConfig c = effective_config(o);
  const auto out = output_dir(o, c);
  const auto rows = ablation ? cahqp::ablation_plan(c) : cahqp::comparison_rows(c);
  if (o.dry_run) {
    print_plan(rows, c, out);
    return 0;
  }
  cahqp::write_effective_config(out, c);
  const auto records = cahqp::execute_rows(rows, out / "snapshots", [](const std::string& msg) {
    std::cerr << "[cahqp] " << msg << std::endl;
  });
  const std::string stem = ablation ? "ablation" : "run";
  cahqp::write_outputs(out, stem, records, ablation);
  for (const auto m : {cahqp::Metric::pseudo_label_map, cahqp::Metric::edge_map}) {
    std::cout << cahqp::format_table(cahqp::summarize(records, m)) << '\n';
  }
  std::cout << "results written to " << out.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cloud-edge collaborative detector adaptation experiments"};
  app.require_subcommand(1);

  Overrides run_opts, ablation_opts;
  CLI::App* run = app.add_subcommand("run", "Baseline vs. configured adaptation over all seeds and streams");
  add_experiment_options(*run, run_opts, true);
  CLI::App* abl = app.add_subcommand("ablation", "The five-row component ablation over all seeds");
  add_experiment_options(*abl, ablation_opts, false);

  std::string plot_dir;
  CLI::App* plot = app.add_subcommand("plot", "Render SVG charts from the reports in a result directory");
  plot->add_option("--out,dir", plot_dir, "Result directory written by run or ablation")->required();

  std::string data_config, data_out;
  bool data_dry_run = false;
  CLI::App* gen = app.add_subcommand("gen-data", "Write the synthetic benchmark datasets to disk");
  gen->add_option("--config", data_config, "Experiment config (JSON); defaults if omitted")->check(CLI::ExistingFile);
  gen->add_option("--out", data_out, "Destination directory")->required();
  gen->add_flag("--dry-run", data_dry_run, "Print the benchmark config and exit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run) return run_plan(run_opts, false);
    if (*abl) return run_plan(ablation_opts, true);
    if (*plot) {
      for (const auto& p : cahqp::plot_directory(plot_dir)) std::cout << p.string() << '\n';
      return 0;
    }
    if (*gen) {
      cahqp::ExperimentConfig c;
      if (!data_config.empty()) c = cahqp::load_config(data_config);
      cahqp::validate(c);
      if (data_dry_run) {
        std::cout << cahqp::to_json_text(c) << '\n';
        return 0;
      }
      for (const auto& stem : cahqp::export_benchmark(c.benchmark, data_out)) std::cout << stem << '\n';
      return 0;
    }
  } catch (const cahqp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitRuntime;
}
