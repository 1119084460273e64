#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hfl/model.hpp"
#include "hfl/optim.hpp"

namespace hfl {

struct TrainConfig {
  int steps = 3000;
  int batch_size = 16;
  int warmup_steps = 500;
  double lr_head = 1e-3;
  // Used for the encoder's own weights; adapters train at lr_head.
  double lr_encoder = 1e-4;
  double ema_decay = 0.9999;
  AdamConfig adam;
  int log_every = 50;
  // Test utterances used for the FER column of intermediate rows; the
  // final evaluation always uses the whole test set.
  int eval_subset = 64;
  // Reuse frozen encoder prefixes across steps (pure speed-up).
  bool cache_frozen_prefix = true;
  std::uint64_t seed = 1;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct MetricsRow {
  int step = 0;
  double loss = 0;
  double fer = 0;
  double examples_per_sec = 0;
};

struct TrainResult {
  std::vector<MetricsRow> history;
  double final_fer = 0;
};

/// Learning rate group for a parameter name under `cfg`.
double base_learning_rate(const std::string& name, const TrainConfig& cfg);

/// Adam + EMA fine-tuning. The EMA decay in effect at step t is
/// min(ema_decay, (1 + t) / (10 + t)). Final FER uses the EMA weights, which
/// are left loaded in the model on return.
TrainResult train_downstream(DownstreamModel& model, const Dataset& train, const Dataset& test,
                             const TrainConfig& cfg,
                             const std::function<void(const MetricsRow&)>& on_metrics = {});

/// Misclassified subsampled frames over all frames. No gradient state is
/// created and no parameter changes.
double evaluate_fer(const DownstreamModel& model, const Dataset& data);
double evaluate_fer(const DownstreamModel& model, const Dataset& data,
                    const std::vector<EncoderPrefix>& prefixes);
/// FER of given per-example predictions against data's labels.
double frame_error_rate(const std::vector<std::vector<std::int32_t>>& predictions, const Dataset& data);

/// Median examples/second over `timed_steps` full (uncached) training steps
/// after `warmup_steps` untimed ones. Updates the model's weights.
double measure_throughput(DownstreamModel& model, const Dataset& data, const TrainConfig& cfg,
                          int warmup_steps, int timed_steps);

std::string metrics_csv(const std::vector<MetricsRow>& rows);

}  // namespace hfl
