#include "hfl/peft.hpp"

#include <fmt/format.h>

#include "hfl/ops.hpp"

namespace hfl {

AdapterModule make_adapter(ParameterStore& store, const std::string& prefix,
                           std::int64_t model_dim, std::int64_t bottleneck, Rng& rng,
                           DType dtype) {
  AdapterModule a;
  a.pre_norm = make_norm(store, prefix + "/norm", model_dim, dtype);
  a.down = make_linear(store, prefix + "/down", model_dim, bottleneck, rng, dtype);
  a.up.weight = &store.add(prefix + "/up/weight", Tensor::zeros({bottleneck, model_dim}, dtype));
  a.up.bias = &store.add(prefix + "/up/bias", Tensor::zeros({model_dim}, dtype));
  return a;
}

Tensor adapter_forward(const AdapterModule& adapter, const Tensor& x) {
  if (x.rank() != 2 || x.dim(1) != adapter.model_dim()) {
    throw ShapeError(fmt::format("adapter: input {} does not match model_dim {}",
                                 shape_str(x.shape()), adapter.model_dim()));
  }
  return add(x, adapter.up(relu(adapter.down(adapter.pre_norm(x)))));
}

namespace {

constexpr std::string_view kKindNames[] = {"none", "full", "fths", "bitfit", "adapter"};

}  // namespace

std::string_view peft_kind_name(PeftKind kind) { return kKindNames[static_cast<int>(kind)]; }

PeftKind peft_kind_from_name(std::string_view name) {
  for (int i = 0; i < 5; ++i)
    if (kKindNames[i] == name) return static_cast<PeftKind>(i);
  throw ConfigError(fmt::format(
      "unknown peft kind '{}' (expected none, full, fths, bitfit or adapter)", name));
}

PeftSpec full_finetune() { return PeftSpec{PeftKind::full, std::nullopt, 0, std::nullopt}; }
PeftSpec fths() { return PeftSpec{PeftKind::fths, std::nullopt, 0, std::nullopt}; }
PeftSpec bitfit() { return PeftSpec{PeftKind::bitfit, std::nullopt, 0, std::nullopt}; }
PeftSpec adapters(TapSet layers, int bottleneck) {
  return PeftSpec{PeftKind::adapter, std::move(layers), bottleneck, std::nullopt};
}

void validate_peft(const PeftSpec& spec, const EncoderConfig& config) {
  if (spec.kind == PeftKind::adapter) {
    if (!spec.adapter_layers) throw ConfigError("peft.adapter_layers is required for adapters");
    spec.adapter_layers->validate_for(config.num_layers);
    if (spec.bottleneck_dim <= 0 || spec.bottleneck_dim >= config.model_dim) {
      throw ConfigError(fmt::format("peft.bottleneck_dim must be in (0, model_dim={}), got {}",
                                    config.model_dim, spec.bottleneck_dim));
    }
  } else if (spec.adapter_layers) {
    throw ConfigError(fmt::format("peft.adapter_layers given for kind '{}'",
                                  peft_kind_name(spec.kind)));
  }
  if (spec.combined_fusion) {
    validate_fusion(*spec.combined_fusion, config.model_dim, config.num_layers);
  }
}

std::string peft_label(const PeftSpec& spec) {
  std::string s;
  switch (spec.kind) {
    case PeftKind::none: s = "frozen"; break;
    case PeftKind::full: s = "fine-tune all"; break;
    case PeftKind::fths: s = "FTHS"; break;
    case PeftKind::bitfit: s = "BitFit"; break;
    case PeftKind::adapter:
      s = fmt::format("adapter(d={}) at {}", spec.bottleneck_dim,
                      spec.adapter_layers ? spec.adapter_layers->str() : "?");
      break;
  }
  if (spec.combined_fusion) s = fusion_label(*spec.combined_fusion) + " + " + s;
  return s;
}

bool bitfit_selects(std::string_view name, std::int64_t numel, int model_dim) {
  if (!name.starts_with("encoder/layer_") || !name.ends_with("/bias")) return false;
  return numel <= model_dim;
}

void configure_peft(Encoder& encoder, const PeftSpec& spec, std::uint64_t seed) {
  const EncoderConfig& cfg = encoder.config();
  validate_peft(spec, cfg);
  ParameterStore& store = encoder.params();
  set_trainable(store, "**", false);
  switch (spec.kind) {
    case PeftKind::none:
      break;
    case PeftKind::full:
      set_trainable(store, "**", true);
      break;
    case PeftKind::fths:
      set_trainable(store, layer_prefix(cfg.num_layers - 1) + "/**", true);
      break;
    case PeftKind::bitfit:
      for (Parameter* p : store.all())
        if (bitfit_selects(p->name(), p->numel(), cfg.model_dim)) p->set_trainable(true);
      break;
    case PeftKind::adapter: {
      Rng rng(seed);
      for (int layer : spec.adapter_layers->indices()) {
        if (!encoder.has_adapter(layer)) encoder.attach_adapter(layer, spec.bottleneck_dim, rng);
        set_trainable(store, layer_prefix(layer) + "/adapter/**", true);
      }
      break;
    }
  }
}

std::vector<std::string> bitfit_inventory(const Encoder& encoder) {
  std::vector<std::string> out;
  for (const Parameter* p : encoder.params().all())
    if (bitfit_selects(p->name(), p->numel(), encoder.config().model_dim)) out.push_back(p->name());
  return out;
}

}  // namespace hfl
