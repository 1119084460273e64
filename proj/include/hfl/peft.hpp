#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hfl/encoder.hpp"
#include "hfl/fusion.hpp"

namespace hfl {

enum class PeftKind { none, full, fths, bitfit, adapter };

std::string_view peft_kind_name(PeftKind kind);
/// Throws ConfigError listing the valid names.
PeftKind peft_kind_from_name(std::string_view name);

struct PeftSpec {
  PeftKind kind = PeftKind::none;
  // Adapter only.
  std::optional<TapSet> adapter_layers;
  int bottleneck_dim = 0;
  // Fusion head trained alongside the encoder-side strategy.
  std::optional<FusionSpec> combined_fusion;

  bool operator==(const PeftSpec&) const = default;
};

PeftSpec full_finetune();
PeftSpec fths();
PeftSpec bitfit();
PeftSpec adapters(TapSet layers, int bottleneck);

void validate_peft(const PeftSpec& spec, const EncoderConfig& config);
std::string peft_label(const PeftSpec& spec);

/// BitFit selection: conformer-block parameters named ".../bias" (affine
/// biases and layer-norm offsets) with at most `model_dim` elements.
bool bitfit_selects(std::string_view name, std::int64_t numel, int model_dim);

/// Sets trainable flags on `encoder` and inserts adapters. Everything not
/// selected by the strategy is frozen.
void configure_peft(Encoder& encoder, const PeftSpec& spec, std::uint64_t seed);

/// Names of encoder parameters BitFit would train, in model order.
std::vector<std::string> bitfit_inventory(const Encoder& encoder);

inline std::optional<int> lowest_trainable_depth(const Encoder& encoder) {
  return encoder.lowest_trainable_depth();
}

}  // namespace hfl
