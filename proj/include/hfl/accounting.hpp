#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "hfl/model.hpp"
#include "hfl/op_counter.hpp"

namespace hfl {

// Closed-form parameter counts. None of these allocate tensors.

std::int64_t frontend_param_count(const EncoderConfig& c);
std::int64_t block_param_count(const EncoderConfig& c);
std::int64_t encoder_param_count(const EncoderConfig& c);
/// Bias-like vectors BitFit trains in one block.
std::int64_t block_bitfit_count(const EncoderConfig& c);
std::int64_t fusion_param_count(const FusionSpec& spec, int model_dim);
std::int64_t fusion_output_dim(const FusionSpec& spec, int model_dim);

struct TrainableCount {
  std::int64_t encoder = 0;  // includes adapters
  std::int64_t head = 0;     // fusion head; the frame classifier is excluded
  bool operator==(const TrainableCount&) const = default;
};

TrainableCount count_trainable_params(const EncoderConfig& encoder,
                                      const std::optional<FusionSpec>& fusion,
                                      const std::optional<PeftSpec>& peft);
/// Total encoder size including any inserted adapters.
std::int64_t encoder_total_params(const EncoderConfig& encoder, const PeftSpec& peft);
std::int64_t classifier_param_count(const ModelSpec& spec);

/// Analytic cost of one uncached training step on `batch` examples of
/// `seq_len` input frames each, traced op by op over the model graph.
/// Scopes and per-op FLOPs follow the live OpCounter conventions.
struct StepCost {
  OpCounter ops;
  std::uint64_t activation_bytes = 0;  // 4 bytes per retained element
  std::uint64_t state_bytes = 0;       // params + grads + two Adam moments, 4 bytes each
  std::int64_t trainable_params = 0;   // everything the optimizer updates
  std::uint64_t total_bytes() const { return activation_bytes + state_bytes; }
};

StepCost trace_step_cost(const ModelSpec& spec, int batch, int seq_len);
/// Retained-activation bytes plus optimizer-state bytes; activation part is
/// zero for batch 0.
std::uint64_t estimate_activation_memory(const ModelSpec& spec, int batch, int seq_len);
std::uint64_t count_backward_flops(const ModelSpec& spec, int batch, int seq_len);

struct ResourceReport {
  std::string label;
  std::int64_t trainable_encoder_params = 0;
  std::int64_t head_params = 0;
  std::int64_t trainable_params = 0;
  std::int64_t frozen_params = 0;
  std::uint64_t activation_bytes = 0;
  std::uint64_t memory_bytes = 0;
  std::uint64_t forward_flops = 0;   // per example
  std::uint64_t backward_flops = 0;  // per example
  std::optional<double> throughput;  // examples / second
  std::string environment;
  std::string config_fingerprint;
};

ResourceReport resource_report(const ModelSpec& spec, int batch, int seq_len);
std::string spec_fingerprint(const ModelSpec& spec, int batch, int seq_len);
std::string canonical_spec(const ModelSpec& spec);
/// Compiler, thread count and build flags of this process.
std::string environment_descriptor();

/// "key: value" lines for a report file.
std::string format_report(const ResourceReport& r);

inline constexpr const char* kFlopConvention =
    "FLOPs count one multiply-add as 2; data movement (concat, slice, transpose) is free";

}  // namespace hfl
