#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hfl/checkpoint.hpp"
#include "hfl/encoder.hpp"
#include "hfl/fusion.hpp"
#include "hfl/peft.hpp"

namespace hfl {

/// Encoder, encoder-side strategy, fusion head and frame classifier.
struct ModelSpec {
  EncoderConfig encoder = EncoderConfig::desk();
  // Head over the taps. Unset means a probe on the top layer.
  std::optional<FusionSpec> fusion;
  PeftSpec peft;
  int num_classes = 12;

  bool operator==(const ModelSpec&) const = default;
};

/// The head actually built: peft.combined_fusion, else fusion, else a
/// single-layer probe on the top block.
FusionSpec resolved_head(const ModelSpec& spec);
void validate_model(const ModelSpec& spec);
std::string model_label(const ModelSpec& spec);

/// One training example: frames (time, input_dim) and one label per
/// subsampled frame.
struct Example {
  Tensor frames;
  std::vector<std::int32_t> labels;
  // Per input frame; synthetic data only.
  std::vector<std::int32_t> frame_symbols;
};

using Dataset = std::vector<Example>;

class DownstreamModel {
 public:
  /// `pretrained`, when given, overwrites every "encoder/**" weight before
  /// the strategy is applied.
  static DownstreamModel build(const ModelSpec& spec, std::uint64_t seed, DType dtype = DType::f32,
                               const NamedTensors* pretrained = nullptr);

  DownstreamModel(DownstreamModel&&) = default;
  DownstreamModel& operator=(DownstreamModel&&) = default;

  const ModelSpec& spec() const { return spec_; }
  Encoder& encoder() { return encoder_; }
  const Encoder& encoder() const { return encoder_; }
  FusionHead& head() { return head_; }
  const FusionHead& head() const { return head_; }
  ParameterStore& classifier_params() { return classifier_params_; }
  const TapSet& taps() const { return taps_; }

  Tensor logits_from_taps(const FeatureTaps& taps) const;
  Tensor logits(const Tensor& frames) const;
  /// Mean frame cross-entropy of one example.
  Tensor example_loss(const Example& ex) const;
  Tensor example_loss(const Example& ex, const EncoderPrefix& prefix) const;
  /// (1/B) * sum of example losses, summed in batch order.
  Tensor batch_loss(std::span<const Example* const> batch) const;

  /// Depth of the encoder prefix that holds no trainable parameter and can
  /// be computed once per example; nullopt when the frontend trains.
  std::optional<int> cacheable_depth() const;
  EncoderPrefix frozen_prefix(const Tensor& frames) const;

  std::vector<Parameter*> all_params();
  std::vector<Parameter*> trainable_params();
  std::int64_t trainable_encoder_params() const;

 private:
  DownstreamModel(Encoder encoder, FusionHead head) : encoder_(std::move(encoder)), head_(std::move(head)) {}

  Tensor loss_from_logits(const Tensor& logits, const std::vector<std::int32_t>& labels) const;

  ModelSpec spec_;
  Encoder encoder_;
  FusionHead head_;
  ParameterStore classifier_params_;
  Linear classifier_;
  TapSet taps_;
};

}  // namespace hfl
