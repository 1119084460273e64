#include <CLI11.hpp>
#include <fmt/format.h>
#include <iostream>

#include "hfl/experiments.hpp"

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string preset;
};

hfl::ExperimentConfig load(const Globals& g) {
  std::optional<std::filesystem::path> path;
  if (!g.config.empty()) path = g.config;
  std::optional<hfl::Preset> preset;
  if (!g.preset.empty()) preset = hfl::preset_from_name(g.preset);
  hfl::ExperimentConfig cfg = hfl::load_config(path, preset);
  if (!g.seed && g.out.empty()) return cfg;
  hfl::RawConfig raw = cfg.raw;
  if (g.seed) raw["experiment"]["seed"] = std::to_string(*g.seed);
  if (!g.out.empty()) raw["experiment"]["output_dir"] = g.out;
  return hfl::resolve_config(raw);
}

void log_line(std::string_view s) { std::cerr << s << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hfflab: feature-fusion and parameter-efficient transfer experiments"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "INI config file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Override experiment.seed");
  app.add_option("--out", g.out, "Override experiment.output_dir");
  app.add_option("--preset", g.preset, "desk or paper-counting")->check(CLI::IsMember({"desk", "paper-counting"}));

  auto* pretrain = app.add_subcommand("pretrain", "Masked-prediction pretraining of the encoder");
  auto* probe = app.add_subcommand("probe-layers", "One frozen single-layer probe per tap");
  std::vector<int> probe_taps;
  probe->add_option("--taps", probe_taps, "Layers to probe (default: probe.taps)")->delimiter(',');
  auto* fusion = app.add_subcommand("fusion-table", "Tap-count, projector-depth and HFF rows");
  auto* comparison = app.add_subcommand("comparison", "Baselines and parameter-efficient methods");
  auto* count = app.add_subcommand("count-params", "Closed-form parameter counts at paper scale");
  auto* sweep = app.add_subcommand("sweep", "Cartesian grid of training runs");
  std::vector<std::string> axes;
  sweep->add_option("--grid", axes, "section.key=v1,v2 (repeatable; 'seed' is experiment.seed)");
  auto* print = app.add_subcommand("print-config", "Print the resolved config");

  CLI11_PARSE(app, argc, argv);

  try {
    if (count->parsed()) {
      std::optional<std::filesystem::path> out;
      if (!g.out.empty()) out = g.out;
      std::vector<hfl::CountRow> rows;
      int code = 0;
      try {
        rows = hfl::cmd_count_params(out);
      } catch (const hfl::GateFailure& e) {
        std::cerr << "gate failure: " << e.what() << '\n';
        rows = hfl::paper_count_rows();
        code = 3;
      }
      fmt::print("{:<24} {:>12} {:>10} {:>8} {:>6}  {}\n", "id", "count", "paper", "dev%", "gated", "label");
      for (const auto& r : rows) {
        fmt::print("{:<24} {:>12} {:>9.1f}M {:>+8.2f} {:>6}  {}\n", r.id, r.count, r.paper / 1e6, r.deviation_pct(),
                   r.gated ? (r.within() ? "ok" : "FAIL") : "-", r.label);
      }
      return code;
    }
    const hfl::ExperimentConfig cfg = load(g);
    if (print->parsed()) {
      std::cout << hfl::to_ini(cfg.raw);
    } else if (pretrain->parsed()) {
      hfl::cmd_pretrain(cfg, log_line);
    } else if (probe->parsed()) {
      std::optional<std::vector<int>> taps;
      if (!probe_taps.empty()) taps = probe_taps;
      for (const auto& r : hfl::cmd_probe_layers(cfg, taps, log_line)) fmt::print("layer {} fer {:.4f}\n", r.layer, r.fer);
    } else if (fusion->parsed()) {
      for (const auto& r : hfl::cmd_fusion_table(cfg, log_line))
        fmt::print("{:<10} {:>9} params  fer {:.4f}  {}\n", r.id, r.head_params, r.fer, r.label);
    } else if (comparison->parsed()) {
      hfl::cmd_comparison(cfg, log_line);
    } else if (sweep->parsed()) {
      hfl::SweepGrid grid;
      for (const auto& a : axes) grid.push_back(hfl::parse_grid_axis(a));
      for (const auto& r : hfl::cmd_sweep(cfg, grid, log_line))
        fmt::print("{} fer {:.4f}\n", r.dir.string(), r.final_fer);
    }
  } catch (const hfl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const hfl::GateFailure& e) {
    std::cerr << "gate failure: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
