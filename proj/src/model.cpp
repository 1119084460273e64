#include "hfl/model.hpp"

#include <fmt/format.h>

#include "hfl/autodiff.hpp"
#include "hfl/op_counter.hpp"
#include "hfl/ops.hpp"

namespace hfl {

FusionSpec resolved_head(const ModelSpec& spec) {
  if (spec.peft.combined_fusion) return *spec.peft.combined_fusion;
  if (spec.fusion) return *spec.fusion;
  return SingleLayerSpec{spec.encoder.num_layers - 1};
}

void validate_model(const ModelSpec& spec) {
  spec.encoder.validate();
  validate_peft(spec.peft, spec.encoder);
  validate_fusion(resolved_head(spec), spec.encoder.model_dim, spec.encoder.num_layers);
  if (spec.num_classes < 2) throw ConfigError("model.num_classes must be at least 2");
}

std::string model_label(const ModelSpec& spec) {
  if (spec.peft.kind == PeftKind::none && !spec.peft.combined_fusion)
    return fusion_label(resolved_head(spec));
  return peft_label(spec.peft);
}

DownstreamModel DownstreamModel::build(const ModelSpec& spec, std::uint64_t seed, DType dtype,
                                       const NamedTensors* pretrained) {
  validate_model(spec);
  Encoder encoder = Encoder::build(spec.encoder, seed, dtype);
  if (pretrained) assign_parameters(encoder.params(), *pretrained, "encoder/**", "pretrained weights");
  configure_peft(encoder, spec.peft, seed + 1);
  const FusionSpec head_spec = resolved_head(spec);
  DownstreamModel m(std::move(encoder), FusionHead::build(head_spec, spec.encoder.model_dim, seed + 2, dtype));
  m.spec_ = spec;
  m.taps_ = fusion_taps(head_spec);
  Rng rng(seed + 3);
  m.classifier_ = make_linear(m.classifier_params_, "classifier", m.head_.output_dim(),
                              spec.num_classes, rng, dtype);
  return m;
}

Tensor DownstreamModel::logits_from_taps(const FeatureTaps& taps) const {
  const Tensor h = head_.forward(taps);
  ScopeGuard scope("classifier");
  return classifier_(h);
}

Tensor DownstreamModel::logits(const Tensor& frames) const {
  return logits_from_taps(encoder_.encode_with_taps(frames, taps_));
}

Tensor DownstreamModel::loss_from_logits(const Tensor& logits,
                                         const std::vector<std::int32_t>& labels) const {
  if (static_cast<std::int64_t>(labels.size()) != logits.dim(0)) {
    throw ShapeError(fmt::format("{} labels for {} output frames", labels.size(), logits.dim(0)));
  }
  ScopeGuard scope("loss");
  return cross_entropy(logits, labels);
}

Tensor DownstreamModel::example_loss(const Example& ex) const {
  return loss_from_logits(logits(ex.frames), ex.labels);
}

Tensor DownstreamModel::example_loss(const Example& ex, const EncoderPrefix& prefix) const {
  return loss_from_logits(logits_from_taps(encoder_.resume(prefix, taps_)), ex.labels);
}

Tensor DownstreamModel::batch_loss(std::span<const Example* const> batch) const {
  if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
  Tensor total = example_loss(*batch[0]);
  for (std::size_t i = 1; i < batch.size(); ++i) {
    const Tensor l = example_loss(*batch[i]);
    ScopeGuard scope("loss");
    total = add(total, l);
  }
  ScopeGuard scope("loss");
  return scale(total, 1.0 / static_cast<double>(batch.size()));
}

std::optional<int> DownstreamModel::cacheable_depth() const {
  if (encoder_.frontend_trainable()) return std::nullopt;
  const int top = taps_.max() + 1;
  const auto lowest = encoder_.lowest_trainable_depth();
  return lowest ? std::min(*lowest, top) : top;
}

EncoderPrefix DownstreamModel::frozen_prefix(const Tensor& frames) const {
  const auto depth = cacheable_depth();
  if (!depth) throw std::logic_error("frozen_prefix: the frontend is trainable");
  NoGradGuard no_grad;
  return encoder_.run_prefix(frames, *depth, taps_);
}

std::vector<Parameter*> DownstreamModel::all_params() {
  std::vector<Parameter*> out = encoder_.params().all();
  for (auto* p : head_.params().all()) out.push_back(p);
  for (auto* p : classifier_params_.all()) out.push_back(p);
  return out;
}

std::vector<Parameter*> DownstreamModel::trainable_params() {
  std::vector<Parameter*> out;
  for (auto* p : all_params())
    if (p->trainable()) out.push_back(p);
  return out;
}

std::int64_t DownstreamModel::trainable_encoder_params() const {
  return encoder_.params().count_elements(true);
}

}  // namespace hfl
