#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hfl/corpus.hpp"
#include "hfl/model.hpp"
#include "hfl/pretrain.hpp"
#include "hfl/trainer.hpp"

namespace hfl {

enum class Preset { desk, paper_counting };

std::string_view preset_name(Preset p);
Preset preset_from_name(std::string_view name);

/// section -> key -> value, exactly as written in the INI file.
using RawConfig = std::map<std::string, std::map<std::string, std::string>>;

/// Every known key with its default value for `preset`. This is also the
/// schema: keys outside it are rejected.
RawConfig default_raw_config(Preset preset);

/// Reads INI text (sections of key = value, '#' or ';' comments).
RawConfig parse_ini(const std::string& text, const std::string& source = "<string>");
RawConfig read_ini_file(const std::filesystem::path& path);
std::string to_ini(const RawConfig& raw);

/// Overlays `overrides` on `base`; unknown sections or keys are ConfigError.
void merge_raw(RawConfig& base, const RawConfig& overrides, const std::string& source);
/// Sets "section.key" = value; unknown keys are ConfigError.
void set_raw(RawConfig& raw, const std::string& dotted_key, const std::string& value);

struct ComparisonSettings {
  int bottleneck = 8;              // desk adapter width
  std::optional<TapSet> subset;    // unset: top half of the stack
  int seq_len = 96;                // input frames used for analytic costs
  int throughput_warmup = 3;
  int throughput_steps = 10;
};

struct FusionTableSettings {
  std::vector<int> tap_counts{1, 2, 4, 6};
  std::vector<int> depths{1, 2, 3, 4};
  bool hff = true;
};

struct ExperimentConfig {
  Preset preset = Preset::desk;
  std::uint64_t seed = 1;
  std::filesystem::path output_dir = "runs/default";
  EncoderConfig encoder = EncoderConfig::desk();
  std::optional<FusionSpec> fusion;
  PeftSpec peft;
  TrainConfig train;
  PretrainConfig pretrain;
  std::filesystem::path checkpoint;  // empty: <output_dir>/pretrained.ffck
  SynthConfig synth;
  std::optional<TapSet> probe_taps;  // unset: every layer
  FusionTableSettings fusion_table;
  ComparisonSettings comparison;
  RawConfig raw;  // the resolved key/value form

  ModelSpec model_spec() const;
  std::filesystem::path checkpoint_path() const;
};

ExperimentConfig resolve_config(const RawConfig& raw);
/// Defaults for the preset named in the file (or `preset`), overlaid with
/// the file.
ExperimentConfig load_config(const std::optional<std::filesystem::path>& path, std::optional<Preset> preset);

/// "1,3,5", "all" or "even:N" against a `num_layers` stack.
TapSet parse_taps(const std::string& text, int num_layers);
/// Layers num_layers/2 .. num_layers-1.
TapSet top_half(int num_layers);
std::vector<int> parse_int_list(const std::string& text, const std::string& field);

}  // namespace hfl
