#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "hfl/accounting.hpp"
#include "hfl/checkpoint.hpp"
#include "hfl/config.hpp"
#include "hfl/corpus.hpp"
#include "hfl/paper_reference.hpp"
#include "hfl/pretrain.hpp"
#include "hfl/trainer.hpp"

namespace hfl {

/// A check the run is expected to pass did not (CLI exit code 3).
class GateFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Logger = std::function<void(std::string_view)>;

/// Corpus and pretrained encoder weights shared by the rows of one command.
struct Lab {
  ExperimentConfig config;
  Corpus corpus;
  NamedTensors pretrained;
};

/// Throws ConfigError under the paper-counting preset, which only counts.
void require_training_preset(const ExperimentConfig& cfg, std::string_view command);

/// Reads the checkpoint at cfg.checkpoint_path(); a missing file is a
/// runtime error that says how to create it.
NamedTensors load_pretrained(const ExperimentConfig& cfg);
Lab open_lab(const ExperimentConfig& cfg);

/// The resolved config rewritten so that its [fusion] and [peft] sections
/// describe `spec`.
RawConfig raw_for_model(const RawConfig& base, const ModelSpec& spec);

struct RunRecord {
  std::string id;
  std::string label;
  ModelSpec spec;
  TrainResult train;
  ResourceReport resources;
};

/// Builds `spec` from the pretrained weights, trains it with cfg.train and,
/// when `dir` is set, writes config.ini, seed, metrics.csv and resources.txt
/// there. `inspect` sees the trained model (EMA weights loaded).
RunRecord train_row(const Lab& lab, std::string id, const ModelSpec& spec,
                    const std::optional<std::filesystem::path>& dir, const Logger& log = {},
                    const std::function<void(const DownstreamModel&)>& inspect = {});

struct PretrainOutcome {
  PretrainResult result;
  std::filesystem::path checkpoint;
};

/// Pretrains a fresh encoder on the pretrain split and saves it to
/// cfg.checkpoint_path(). Throws GateFailure after saving when the loss did
/// not fall far enough.
PretrainOutcome cmd_pretrain(const ExperimentConfig& cfg, const Logger& log = {});

struct ProbeRow {
  int layer = 0;
  double fer = 0;
};

/// One frozen single-layer probe per tap. Writes probe_layers.csv and
/// probe_layers.dat (whitespace columns for plotting).
std::vector<ProbeRow> cmd_probe_layers(const ExperimentConfig& cfg, const std::optional<std::vector<int>>& taps,
                                       const Logger& log = {});
/// Index of the lowest-FER layer among `layers`.
int best_probe_layer(const std::vector<ProbeRow>& rows, const std::vector<int>& layers);

struct FusionRow {
  std::string id;
  std::string family;  // "taps", "depth" or "hff"
  std::string label;
  int tap_count = 0;
  int depth = 0;
  std::int64_t head_params = 0;
  double fer = 0;
  std::vector<std::pair<int, double>> weight_norms;  // linear heads only
};

/// The fusion row set for `cfg`: tap-count rows, projector-depth rows over
/// all layers and, if enabled, HFF-b and HFF-ub over all layers.
std::vector<std::pair<std::string, ModelSpec>> fusion_table_specs(const ExperimentConfig& cfg);
/// Trains every row (identical specs share one run). Writes
/// fusion_table.csv and weight_norms.csv.
std::vector<FusionRow> cmd_fusion_table(const ExperimentConfig& cfg, const Logger& log = {});

/// Mean norm of the middle taps minus the mean of the first and last tap.
double middle_minus_extremes(const std::vector<std::pair<int, double>>& norms);

struct ComparisonRow {
  std::string id;
  std::string label;
  std::int64_t trainable_encoder_params = 0;
  std::int64_t head_params = 0;
  std::uint64_t activation_bytes = 0;
  std::uint64_t backward_flops = 0;
  double examples_per_sec = 0;
  double fer = 0;
  std::optional<CountRow> paper;
};

/// The eight desk rows: full, fths, bitfit, adapter-all, adapter-subset,
/// hff-b, hff-b+adapter-subset, hff-b+adapter-all.
std::vector<std::pair<std::string, ModelSpec>> comparison_specs(const ExperimentConfig& cfg);
/// Paper count-table id matching a comparison row id.
std::string comparison_paper_id(const std::string& row_id);
/// Writes comparison.csv and comparison.txt.
std::vector<ComparisonRow> cmd_comparison(const ExperimentConfig& cfg, const Logger& log = {});

/// Pure closed-form counts at paper scale. Writes count_params.csv when
/// `out` is set. Throws GateFailure if a gated row misses its tolerance.
std::vector<CountRow> cmd_count_params(const std::optional<std::filesystem::path>& out);
std::string count_rows_csv(const std::vector<CountRow>& rows);

/// Sweep axis: dotted config key (or "seed") and its values.
using SweepGrid = std::vector<std::pair<std::string, std::vector<std::string>>>;
/// "key=v1,v2,..." -> axis.
std::pair<std::string, std::vector<std::string>> parse_grid_axis(const std::string& text);

struct SweepRun {
  std::filesystem::path dir;
  std::vector<std::pair<std::string, std::string>> overrides;
  double final_fer = 0;
  std::int64_t trainable_params = 0;
};

/// Cartesian product of `grid` over cfg; each point trains cfg's model in
/// its own directory under cfg.output_dir, pretraining there first when its
/// checkpoint does not exist. Every key is checked and every directory is
/// verified absent before the first run. Writes sweep_summary.csv.
std::vector<SweepRun> cmd_sweep(const ExperimentConfig& cfg, const SweepGrid& grid, const Logger& log = {});

}  // namespace hfl
