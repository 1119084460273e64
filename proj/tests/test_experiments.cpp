#include <doctest.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "hfl/checkpoint.hpp"
#include "hfl/config.hpp"
#include "hfl/encoder.hpp"
#include "hfl/experiments.hpp"

using namespace hfl;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "hfl_tests" / "experiments" / name;
  fs::remove_all(dir);
  fs::create_directories(dir.parent_path());
  return dir;
}

// Small enough that each training row takes a fraction of a second.
RawConfig tiny_raw(const fs::path& out) {
  RawConfig raw = default_raw_config(Preset::desk);
  set_raw(raw, "experiment.output_dir", out.string());
  set_raw(raw, "synth.pretrain_size", "8");
  set_raw(raw, "synth.train_size", "8");
  set_raw(raw, "synth.test_size", "4");
  set_raw(raw, "synth.min_symbols", "4");
  set_raw(raw, "synth.max_symbols", "6");
  set_raw(raw, "train.steps", "2");
  set_raw(raw, "train.batch_size", "2");
  set_raw(raw, "train.warmup_steps", "1");
  set_raw(raw, "train.log_every", "1");
  set_raw(raw, "train.eval_subset", "2");
  set_raw(raw, "comparison.throughput_warmup", "1");
  set_raw(raw, "comparison.throughput_steps", "10");
  return raw;
}

// A random encoder stands in for a pretrained one.
fs::path write_random_checkpoint(const ExperimentConfig& cfg) {
  const Encoder e = Encoder::build(cfg.encoder, 3);
  fs::create_directories(cfg.checkpoint_path().parent_path());
  save_parameters(cfg.checkpoint_path(), e.params());
  return cfg.checkpoint_path();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int line_count(const fs::path& p) {
  const std::string text = slurp(p);
  return static_cast<int>(std::count(text.begin(), text.end(), '\n'));
}

int run_cli(const std::string& args) {
  const std::string cmd = fmt::format("\"{}\" {} > /dev/null 2>&1", HFL_CLI_PATH, args);
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config schema") {
  SUBCASE("unknown keys and sections are rejected") {
    RawConfig raw = default_raw_config(Preset::desk);
    CHECK_THROWS_WITH_AS(set_raw(raw, "train.stepz", "3"), doctest::Contains("stepz"), ConfigError);
    CHECK_THROWS_AS(set_raw(raw, "trian.steps", "3"), ConfigError);
    CHECK_THROWS_AS(set_raw(raw, "steps", "3"), ConfigError);
    CHECK_THROWS_WITH_AS(merge_raw(raw, parse_ini("[train]\nstepz = 3\n"), "f"), doctest::Contains("unknown key"),
                         ConfigError);
    CHECK_THROWS_WITH_AS(merge_raw(raw, parse_ini("[nope]\nx = 1\n"), "f"), doctest::Contains("unknown section"),
                         ConfigError);
  }
  SUBCASE("defaults resolve for both presets") {
    const auto desk = load_config(std::nullopt, Preset::desk);
    CHECK(desk.encoder == EncoderConfig::desk());
    CHECK(desk.preset == Preset::desk);
    const auto paper = load_config(std::nullopt, Preset::paper_counting);
    CHECK(paper.encoder == EncoderConfig::paper());
  }
  SUBCASE("bad values name the field") {
    RawConfig raw = default_raw_config(Preset::desk);
    set_raw(raw, "train.ema_decay", "1.0");
    CHECK_THROWS_WITH_AS(resolve_config(raw), doctest::Contains("ema_decay"), ConfigError);
    raw = default_raw_config(Preset::desk);
    set_raw(raw, "fusion.kind", "linear");
    set_raw(raw, "fusion.taps", "1,1,3");
    CHECK_THROWS_WITH_AS(resolve_config(raw), doctest::Contains("duplicate"), ConfigError);
  }
  SUBCASE("ini round trip") {
    const RawConfig raw = tiny_raw("runs/x");
    CHECK(parse_ini(to_ini(raw)) == raw);
  }
  SUBCASE("tap parsing") {
    CHECK(parse_taps("all", 6).indices() == std::vector<int>{0, 1, 2, 3, 4, 5});
    CHECK(parse_taps("even:2", 6).indices() == std::vector<int>{2, 5});
    CHECK(parse_taps("1, 3,5", 6).indices() == std::vector<int>{1, 3, 5});
    CHECK_THROWS_AS(parse_taps("6", 6), ConfigError);
    CHECK(top_half(6).indices() == std::vector<int>{3, 4, 5});
  }
}

TEST_CASE("raw_for_model round trips every comparison row") {
  const auto cfg = load_config(std::nullopt, Preset::desk);
  for (const auto& [id, spec] : comparison_specs(cfg)) {
    CAPTURE(id);
    const ExperimentConfig back = resolve_config(raw_for_model(cfg.raw, spec));
    CHECK(back.model_spec() == spec);
  }
}

TEST_CASE("paper-counting preset never trains") {
  const auto cfg = load_config(std::nullopt, Preset::paper_counting);
  CHECK_THROWS_AS(require_training_preset(cfg, "comparison"), ConfigError);
  CHECK_THROWS_AS(cmd_probe_layers(cfg, std::nullopt), ConfigError);
  CHECK_THROWS_AS(cmd_pretrain(cfg), ConfigError);
  CHECK_NOTHROW(require_training_preset(load_config(std::nullopt, Preset::desk), "comparison"));
}

TEST_CASE("count-params is fast and within tolerance") {
  const fs::path out = fresh_dir("count");
  fs::create_directories(out);
  const auto t0 = std::chrono::steady_clock::now();
  const auto rows = cmd_count_params(out);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(secs < 1.0);
  int gated = 0;
  for (const auto& r : rows) {
    CAPTURE(r.id);
    if (r.gated) {
      ++gated;
      CHECK(r.within());
    }
  }
  CHECK(gated >= 5);
  CHECK(line_count(out / "count_params.csv") == static_cast<int>(rows.size()) + 1);
}

TEST_CASE("probe-layers") {
  const fs::path out = fresh_dir("probe");
  const ExperimentConfig cfg = resolve_config(tiny_raw(out));

  SUBCASE("missing checkpoint points at pretrain") {
    CHECK_THROWS_WITH_AS(cmd_probe_layers(cfg, std::nullopt), doctest::Contains("hfflab pretrain"),
                         std::runtime_error);
  }
  SUBCASE("duplicate taps are rejected before any work") {
    CHECK_THROWS_WITH_AS(cmd_probe_layers(cfg, std::vector<int>{1, 1}), doctest::Contains("duplicate"), ConfigError);
    CHECK_THROWS_AS(cmd_probe_layers(cfg, std::vector<int>{6}), ConfigError);
  }
  SUBCASE("one row per layer") {
    write_random_checkpoint(cfg);
    const auto rows = cmd_probe_layers(cfg, std::nullopt);
    REQUIRE(rows.size() == 6);
    for (int l = 0; l < 6; ++l) {
      CHECK(rows[l].layer == l);
      CHECK(rows[l].fer >= 0);
      CHECK(rows[l].fer <= 1);
      CHECK(fs::exists(out / "probe" / fmt::format("layer_{}", l) / "metrics.csv"));
    }
    CHECK(line_count(out / "probe_layers.csv") == 7);
    CHECK(fs::exists(out / "probe_layers.dat"));
    CHECK(fs::exists(out / "config.ini"));
    CHECK(slurp(out / "seed") == "1\n");
    CHECK(best_probe_layer(rows, {0, 1, 2, 3, 4, 5}) >= 0);
  }
}

TEST_CASE("fusion table rows") {
  const auto cfg = load_config(std::nullopt, Preset::desk);
  const auto specs = fusion_table_specs(cfg);
  std::int64_t prev_taps = -1, prev_depth = -1;
  int tap_rows = 0, depth_rows = 0;
  for (const auto& [id, spec] : specs) {
    CAPTURE(id);
    const std::int64_t params = fusion_param_count(*spec.fusion, cfg.encoder.model_dim);
    if (id.starts_with("taps_")) {
      ++tap_rows;
      CHECK(params > prev_taps);
      prev_taps = params;
    } else if (id.starts_with("depth_")) {
      const auto& lin = std::get<LinearFusionSpec>(*spec.fusion);
      const std::int64_t dout = lin.projector_dim;
      if (depth_rows > 0) CHECK(params - prev_depth == dout * dout + dout);
      ++depth_rows;
      prev_depth = params;
    }
    CHECK(count_trainable_params(spec.encoder, spec.fusion, spec.peft).encoder == 0);
  }
  CHECK(tap_rows == 4);
  CHECK(depth_rows == 4);
  CHECK(specs.size() == 10);
  CHECK(middle_minus_extremes({{0, 1.0}, {1, 3.0}, {2, 2.0}, {3, 1.0}}) == doctest::Approx(1.5));
  CHECK(middle_minus_extremes({{0, 1.0}, {1, 3.0}}) == 0.0);
}

TEST_CASE("fusion-table command") {
  const fs::path out = fresh_dir("fusion");
  RawConfig raw = tiny_raw(out);
  set_raw(raw, "fusion_table.tap_counts", "1,6");
  set_raw(raw, "fusion_table.depths", "1,2");
  set_raw(raw, "fusion_table.hff", "false");
  const ExperimentConfig cfg = resolve_config(raw);
  write_random_checkpoint(cfg);
  const auto rows = cmd_fusion_table(cfg);
  REQUIRE(rows.size() == 4);
  // taps_6 and depth_1 describe the same model.
  CHECK(rows[1].fer == rows[2].fer);
  CHECK(rows[1].head_params == rows[2].head_params);
  CHECK(rows[1].weight_norms.size() == 6);
  for (const auto& r : rows)
    for (const auto& [l, n] : r.weight_norms) CHECK(n >= 0);
  CHECK(line_count(out / "fusion_table.csv") == 5);
  CHECK(fs::exists(out / "weight_norms.csv"));
}

TEST_CASE("comparison rows") {
  const auto cfg = load_config(std::nullopt, Preset::desk);
  const auto specs = comparison_specs(cfg);
  REQUIRE(specs.size() == 8);
  const std::vector<std::string> ids = {"full",  "fths",  "bitfit", "adapter_all", "adapter_subset",
                                        "hff_b", "hff_b_adapter_subset", "hff_b_adapter_all"};
  for (std::size_t i = 0; i < ids.size(); ++i) CHECK(specs[i].first == ids[i]);
  for (const auto& [id, spec] : specs) {
    CAPTURE(id);
    const auto count = count_trainable_params(spec.encoder, spec.fusion, spec.peft);
    if (id == "hff_b") {
      CHECK(count.encoder == 0);
      CHECK(count.head > 0);
    } else {
      CHECK(count.encoder > 0);
    }
    CHECK_NOTHROW(comparison_paper_id(id));
  }
  CHECK_THROWS_AS(comparison_paper_id("nope"), std::out_of_range);
}

TEST_CASE("comparison command") {
  const fs::path out = fresh_dir("comparison");
  const ExperimentConfig cfg = resolve_config(tiny_raw(out));
  write_random_checkpoint(cfg);
  const auto rows = cmd_comparison(cfg);
  REQUIRE(rows.size() == 8);
  for (const auto& r : rows) {
    CAPTURE(r.id);
    CHECK(r.examples_per_sec > 0);
    CHECK(r.backward_flops > 0);
    CHECK(fs::exists(out / "comparison" / r.id / "resources.txt"));
  }
  CHECK(line_count(out / "comparison.csv") == 9);
  CHECK(fs::exists(out / "comparison.txt"));
}

TEST_CASE("sweep grid parsing") {
  const auto axis = parse_grid_axis("train.lr_head=1e-3,3e-3");
  CHECK(axis.first == "train.lr_head");
  CHECK(axis.second == std::vector<std::string>{"1e-3", "3e-3"});
  CHECK(parse_grid_axis("seed=1").second.size() == 1);
  CHECK_THROWS_AS(parse_grid_axis("seed"), ConfigError);
  CHECK_THROWS_AS(parse_grid_axis("=1"), ConfigError);
  CHECK_THROWS_AS(parse_grid_axis("seed=1,,2"), ConfigError);
}

TEST_CASE("sweep") {
  const fs::path out = fresh_dir("sweep");
  const fs::path ckpt = fresh_dir("sweep_ckpt") / "encoder.ffck";
  RawConfig raw = tiny_raw(out);
  set_raw(raw, "fusion.kind", "single");
  set_raw(raw, "pretrain.checkpoint", ckpt.string());
  const ExperimentConfig cfg = resolve_config(raw);
  write_random_checkpoint(cfg);

  SUBCASE("unknown key fails before any run") {
    CHECK_THROWS_AS(cmd_sweep(cfg, {{"seed", {"1", "2"}}, {"train.stepz", {"1"}}}), ConfigError);
    CHECK_FALSE(fs::exists(out));
    CHECK_THROWS_AS(cmd_sweep(cfg, {{"experiment.output_dir", {"a"}}}), ConfigError);
  }
  SUBCASE("empty grid is one run") {
    const auto runs = cmd_sweep(cfg, {});
    CHECK(runs.size() == 1);
    CHECK(line_count(out / "sweep_summary.csv") == 2);
  }
  SUBCASE("seed grid is three runs, and a rerun is refused") {
    const auto runs = cmd_sweep(cfg, {{"seed", {"1", "2", "3"}}});
    REQUIRE(runs.size() == 3);
    for (std::size_t i = 0; i < runs.size(); ++i) {
      CHECK(fs::exists(runs[i].dir / "metrics.csv"));
      CHECK(slurp(runs[i].dir / "seed") == fmt::format("{}\n", i + 1));
      CHECK(runs[i].overrides == std::vector<std::pair<std::string, std::string>>{{"experiment.seed",
                                                                                    std::to_string(i + 1)}});
    }
    CHECK_THROWS_WITH_AS(cmd_sweep(cfg, {{"seed", {"1", "2", "3"}}}), doctest::Contains("refusing"), ConfigError);
  }
  SUBCASE("cartesian product") {
    const auto runs = cmd_sweep(cfg, {{"seed", {"1", "2"}}, {"train.lr_head", {"1e-3", "2e-3"}}});
    CHECK(runs.size() == 4);
  }
}

TEST_CASE("CLI exit codes") {
  const fs::path dir = fresh_dir("cli");
  fs::create_directories(dir);
  CHECK(run_cli("count-params") == 0);
  CHECK(run_cli(fmt::format("--out {} count-params", (dir / "counts").string())) == 0);
  CHECK(fs::exists(dir / "counts" / "count_params.csv"));
  CHECK(run_cli("print-config") == 0);

  std::ofstream(dir / "bad.ini") << "[train]\nstepz = 3\n";
  CHECK(run_cli(fmt::format("--config {} print-config", (dir / "bad.ini").string())) == 1);
  CHECK(run_cli("--preset paper-counting comparison") == 1);
  CHECK(run_cli(fmt::format("--out {} probe-layers", (dir / "nockpt").string())) == 2);
  CHECK(run_cli("no-such-command") != 0);
}
