#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "hfl/encoder.hpp"
#include "hfl/parameter.hpp"

namespace hfl {

/// Probe on one layer's output; the head itself has no parameters.
struct SingleLayerSpec {
  int layer = 0;
  bool operator==(const SingleLayerSpec&) const = default;
};

/// Concatenate taps (ascending layer order) and project with `depth` affine
/// layers of width `projector_dim`, ReLU between layers.
struct LinearFusionSpec {
  TapSet taps;
  int projector_depth = 1;
  int projector_dim = 64;
  bool operator==(const LinearFusionSpec&) const = default;
};

enum class HffVariant { balanced, unbalanced };

/// Hierarchical fusion. Balanced: per-tap FP, neighbouring pairs
/// concatenated, then Concat & Project. Unbalanced: a bottom-up chain and a
/// top-down chain meeting in the middle, then Concat & Project.
struct HffSpec {
  TapSet taps;
  HffVariant variant = HffVariant::balanced;
  int fp_out_dim = 32;
  int final_depth = 3;
  int final_dim = 64;
  bool operator==(const HffSpec&) const = default;
};

using FusionSpec = std::variant<SingleLayerSpec, LinearFusionSpec, HffSpec>;

/// Desk defaults: projector / final width = model_dim, FP width model_dim/2.
LinearFusionSpec default_linear_fusion(TapSet taps, int model_dim, int depth = 1);
HffSpec default_hff(TapSet taps, int model_dim, HffVariant variant = HffVariant::balanced);

TapSet fusion_taps(const FusionSpec& spec);
std::string fusion_label(const FusionSpec& spec);
std::string_view hff_variant_name(HffVariant v);
/// Throws ConfigError if `spec` cannot be built on a `model_dim` encoder.
void validate_fusion(const FusionSpec& spec, int model_dim, int num_layers);

class FusionHead {
 public:
  /// Parameters are named "head/..." and are all trainable.
  static FusionHead build(const FusionSpec& spec, int model_dim, std::uint64_t seed,
                          DType dtype = DType::f32);

  FusionHead(FusionHead&&) = default;
  FusionHead& operator=(FusionHead&&) = default;

  Tensor forward(const FeatureTaps& taps) const;

  const FusionSpec& spec() const { return spec_; }
  int model_dim() const { return model_dim_; }
  int output_dim() const;
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  std::int64_t param_count() const { return params_.count_elements(false); }

  // Layer access for tests and the weight-norm analysis.
  const std::vector<Linear>& projector() const { return projector_; }
  const std::vector<Linear>& tap_projections() const { return fps_; }

 private:
  FusionHead() = default;

  friend Tensor linear_fusion_forward(const FusionHead&, const FeatureTaps&);
  friend Tensor hff_balanced_forward(const FusionHead&, const FeatureTaps&);
  friend Tensor hff_unbalanced_forward(const FusionHead&, const FeatureTaps&);

  Tensor project(const Tensor& x) const;

  FusionSpec spec_;
  int model_dim_ = 0;
  ParameterStore params_;
  // Linear fusion: the projector stack. HFF: the Concat & Project stack.
  std::vector<Linear> projector_;
  // HFF-b: one FP per tap. HFF-ub: bottom chain steps, then top chain steps.
  std::vector<Linear> fps_;
  std::size_t bottom_steps_ = 0;
};

Tensor single_layer_head(const FeatureTaps& taps, int layer);
Tensor linear_fusion_forward(const FusionHead& head, const FeatureTaps& taps);
Tensor hff_balanced_forward(const FusionHead& head, const FeatureTaps& taps);
Tensor hff_unbalanced_forward(const FusionHead& head, const FeatureTaps& taps);

/// Per-tap l2 norm of the first projector layer's rows belonging to that
/// tap, in tap order. Linear fusion heads only.
std::vector<std::pair<int, double>> layer_weight_norms(const FusionHead& head);

/// Bottom / top chain sizes for the unbalanced variant: ceil(n/2), floor(n/2).
std::pair<std::size_t, std::size_t> hff_chain_split(std::size_t n);

}  // namespace hfl
