#include "hfl/fusion.hpp"

#include <cmath>
#include <fmt/format.h>

#include "hfl/op_counter.hpp"
#include "hfl/ops.hpp"

namespace hfl {

LinearFusionSpec default_linear_fusion(TapSet taps, int model_dim, int depth) {
  return LinearFusionSpec{std::move(taps), depth, model_dim};
}

HffSpec default_hff(TapSet taps, int model_dim, HffVariant variant) {
  return HffSpec{std::move(taps), variant, model_dim / 2, 3, model_dim};
}

std::string_view hff_variant_name(HffVariant v) {
  return v == HffVariant::balanced ? "balanced" : "unbalanced";
}

TapSet fusion_taps(const FusionSpec& spec) {
  return std::visit([](const auto& s) -> TapSet {
    using S = std::decay_t<decltype(s)>;
    if constexpr (std::is_same_v<S, SingleLayerSpec>) {
      return TapSet({s.layer});
    } else {
      return s.taps;
    }
  }, spec);
}

std::string fusion_label(const FusionSpec& spec) {
  return std::visit([](const auto& s) -> std::string {
    using S = std::decay_t<decltype(s)>;
    if constexpr (std::is_same_v<S, SingleLayerSpec>) {
      return fmt::format("single layer {}", s.layer);
    } else if constexpr (std::is_same_v<S, LinearFusionSpec>) {
      return fmt::format("linear fusion {} depth {} width {}", s.taps.str(), s.projector_depth,
                         s.projector_dim);
    } else {
      return fmt::format("HFF-{} {} fp {} final {}x{}",
                         s.variant == HffVariant::balanced ? "b" : "ub", s.taps.str(),
                         s.fp_out_dim, s.final_depth, s.final_dim);
    }
  }, spec);
}

void validate_fusion(const FusionSpec& spec, int model_dim, int num_layers) {
  fusion_taps(spec).validate_for(num_layers);
  if (const auto* lin = std::get_if<LinearFusionSpec>(&spec)) {
    if (lin->projector_depth < 1 || lin->projector_depth > 4) {
      throw ConfigError(fmt::format("fusion.projector_depth must be in [1,4], got {}",
                                    lin->projector_depth));
    }
    if (lin->projector_dim <= 0) throw ConfigError("fusion.projector_dim must be positive");
  } else if (const auto* hff = std::get_if<HffSpec>(&spec)) {
    const std::size_t min_taps = hff->variant == HffVariant::balanced ? 2 : 3;
    if (hff->taps.size() < min_taps) {
      throw ConfigError(fmt::format(
          "HFF-{} needs at least {} taps, got {}; use a single-layer head for one tap",
          hff->variant == HffVariant::balanced ? "b" : "ub", min_taps, hff->taps.size()));
    }
    if (hff->fp_out_dim <= 0 || hff->fp_out_dim > model_dim) {
      throw ConfigError(fmt::format("fusion.fp_out_dim must be in (0, model_dim={}], got {}",
                                    model_dim, hff->fp_out_dim));
    }
    if (hff->final_depth < 1) throw ConfigError("fusion.final_depth must be >= 1");
    if (hff->final_dim <= 0) throw ConfigError("fusion.final_dim must be positive");
  }
}

std::pair<std::size_t, std::size_t> hff_chain_split(std::size_t n) {
  const std::size_t bottom = (n + 1) / 2;
  return {bottom, n - bottom};
}

FusionHead FusionHead::build(const FusionSpec& spec, int model_dim, std::uint64_t seed,
                             DType dtype) {
  const int num_layers = fusion_taps(spec).max() + 1;
  validate_fusion(spec, model_dim, num_layers);
  FusionHead h;
  h.spec_ = spec;
  h.model_dim_ = model_dim;
  Rng rng(seed);
  const std::int64_t d = model_dim;

  auto stack = [&](std::int64_t in, int depth, std::int64_t width) {
    for (int i = 0; i < depth; ++i) {
      h.projector_.push_back(make_linear(h.params_, fmt::format("head/project_{}", i),
                                         i == 0 ? in : width, width, rng, dtype));
    }
  };

  if (const auto* lin = std::get_if<LinearFusionSpec>(&spec)) {
    stack(static_cast<std::int64_t>(lin->taps.size()) * d, lin->projector_depth, lin->projector_dim);
  } else if (const auto* hff = std::get_if<HffSpec>(&spec)) {
    const std::int64_t fp = hff->fp_out_dim;
    const std::size_t n = hff->taps.size();
    if (hff->variant == HffVariant::balanced) {
      for (std::size_t i = 0; i < n; ++i)
        h.fps_.push_back(make_linear(h.params_, fmt::format("head/fp_{}", i), d, fp, rng, dtype));
      stack(static_cast<std::int64_t>(n) * fp, hff->final_depth, hff->final_dim);
    } else {
      const auto [bottom, top] = hff_chain_split(n);
      auto chain = [&](const char* name, std::size_t len) {
        for (std::size_t i = 0; i < len; ++i) {
          h.fps_.push_back(make_linear(h.params_, fmt::format("head/{}/step_{}", name, i),
                                       i == 0 ? d : fp + d, fp, rng, dtype));
        }
      };
      chain("bottom", bottom);
      chain("top", top);
      h.bottom_steps_ = bottom;
      stack(2 * fp, hff->final_depth, hff->final_dim);
    }
  }
  return h;
}

int FusionHead::output_dim() const {
  if (const auto* s = std::get_if<SingleLayerSpec>(&spec_)) {
    (void)s;
    return model_dim_;
  }
  return static_cast<int>(projector_.back().out_dim());
}

Tensor FusionHead::project(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t i = 0; i < projector_.size(); ++i) {
    h = projector_[i](h);
    if (i + 1 < projector_.size()) h = relu(h);
  }
  return h;
}

Tensor FusionHead::forward(const FeatureTaps& taps) const {
  return std::visit([&](const auto& s) -> Tensor {
    using S = std::decay_t<decltype(s)>;
    if constexpr (std::is_same_v<S, SingleLayerSpec>) {
      return single_layer_head(taps, s.layer);
    } else if constexpr (std::is_same_v<S, LinearFusionSpec>) {
      return linear_fusion_forward(*this, taps);
    } else if (s.variant == HffVariant::balanced) {
      return hff_balanced_forward(*this, taps);
    } else {
      return hff_unbalanced_forward(*this, taps);
    }
  }, spec_);
}

namespace {

std::vector<Tensor> gather(const TapSet& wanted, const FeatureTaps& taps, int model_dim) {
  std::vector<Tensor> out;
  out.reserve(wanted.size());
  for (int layer : wanted.indices()) {
    if (!taps.contains(layer)) {
      throw std::out_of_range(fmt::format("fusion head needs layer {} but it was not tapped", layer));
    }
    const Tensor& t = taps.at(layer);
    if (t.rank() != 2 || t.dim(1) != model_dim || t.dim(0) != taps.at(wanted.min()).dim(0)) {
      throw ShapeError(fmt::format("fusion head: tap {} has shape {}, expected (time, {})", layer,
                                   shape_str(t.shape()), model_dim));
    }
    out.push_back(t);
  }
  return out;
}

}  // namespace

Tensor single_layer_head(const FeatureTaps& taps, int layer) {
  if (!taps.contains(layer)) {
    throw std::out_of_range(fmt::format("single-layer head: layer {} was not tapped", layer));
  }
  return taps.at(layer);
}

Tensor linear_fusion_forward(const FusionHead& head, const FeatureTaps& taps) {
  const auto* spec = std::get_if<LinearFusionSpec>(&head.spec_);
  if (!spec) throw std::invalid_argument("linear_fusion_forward: head is not a linear fusion head");
  ScopeGuard scope("head");
  const auto parts = gather(spec->taps, taps, head.model_dim_);
  return head.project(parts.size() == 1 ? parts[0] : concat(parts));
}

Tensor hff_balanced_forward(const FusionHead& head, const FeatureTaps& taps) {
  const auto* spec = std::get_if<HffSpec>(&head.spec_);
  if (!spec || spec->variant != HffVariant::balanced) {
    throw std::invalid_argument("hff_balanced_forward: head is not an HFF-b head");
  }
  ScopeGuard scope("head");
  const auto parts = gather(spec->taps, taps, head.model_dim_);
  std::vector<Tensor> pairs;
  for (std::size_t i = 0; i < parts.size(); i += 2) {
    const Tensor a = head.fps_[i](parts[i]);
    if (i + 1 < parts.size()) {
      const Tensor pair[] = {a, head.fps_[i + 1](parts[i + 1])};
      pairs.push_back(concat(pair));
    } else {
      pairs.push_back(a);
    }
  }
  return head.project(concat(pairs));
}

Tensor hff_unbalanced_forward(const FusionHead& head, const FeatureTaps& taps) {
  const auto* spec = std::get_if<HffSpec>(&head.spec_);
  if (!spec || spec->variant != HffVariant::unbalanced) {
    throw std::invalid_argument("hff_unbalanced_forward: head is not an HFF-ub head");
  }
  ScopeGuard scope("head");
  const auto parts = gather(spec->taps, taps, head.model_dim_);
  const auto [bottom, top] = hff_chain_split(parts.size());

  // Bottom chain walks taps upward from the lowest; top chain walks downward
  // from the highest. Both stop at the middle.
  auto run_chain = [&](std::size_t first_step, std::size_t len, auto tap_index) {
    Tensor state = head.fps_[first_step](parts[tap_index(0)]);
    for (std::size_t s = 1; s < len; ++s) {
      const Tensor joined[] = {state, parts[tap_index(s)]};
      state = head.fps_[first_step + s](concat(joined));
    }
    return state;
  };
  const Tensor low = run_chain(0, bottom, [](std::size_t s) { return s; });
  const std::size_t n = parts.size();
  const Tensor high = run_chain(bottom, top, [n](std::size_t s) { return n - 1 - s; });
  const Tensor both[] = {low, high};
  return head.project(concat(both));
}

std::vector<std::pair<int, double>> layer_weight_norms(const FusionHead& head) {
  const auto* spec = std::get_if<LinearFusionSpec>(&head.spec());
  if (!spec) throw std::invalid_argument("layer_weight_norms: requires a linear fusion head");
  const Tensor& w = head.projector().front().weight->value();
  const std::int64_t d = head.model_dim();
  const std::int64_t cols = w.dim(1);
  std::vector<std::pair<int, double>> out;
  const auto values = w.to_vector();
  for (std::size_t i = 0; i < spec->taps.size(); ++i) {
    double sq = 0;
    const auto row0 = static_cast<std::int64_t>(i) * d;
    for (std::int64_t r = row0; r < row0 + d; ++r)
      for (std::int64_t c = 0; c < cols; ++c) sq += values[static_cast<std::size_t>(r * cols + c)] *
                                                    values[static_cast<std::size_t>(r * cols + c)];
    out.emplace_back(spec->taps.indices()[i], std::sqrt(sq));
  }
  return out;
}

}  // namespace hfl
