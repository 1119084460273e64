#include "hfl/accounting.hpp"

#include <Eigen/Core>
#include <fmt/format.h>
#include <thread>

#include "hfl/adapter.hpp"

namespace hfl {

std::int64_t frontend_param_count(const EncoderConfig& c) {
  const std::int64_t d = c.model_dim, in = c.input_dim;
  return (3 * in * d + d) + (3 * d * d + d) + (d * d + d);
}

std::int64_t block_param_count(const EncoderConfig& c) {
  const std::int64_t d = c.model_dim;
  const std::int64_t f = d * c.ffn_expansion;
  const std::int64_t norm = 2 * d;
  const std::int64_t ffn = norm + (d * f + f) + (f * d + d);
  const std::int64_t attn = norm + 4 * (d * d + d);
  const std::int64_t conv = norm + (d * 2 * d + 2 * d) + (c.conv_kernel * d + d) + norm + (d * d + d);
  return 2 * ffn + attn + conv + norm;
}

std::int64_t encoder_param_count(const EncoderConfig& c) {
  return frontend_param_count(c) + c.num_layers * block_param_count(c);
}

std::int64_t block_bitfit_count(const EncoderConfig& c) {
  const std::int64_t d = c.model_dim;
  const std::int64_t f = d * c.ffn_expansion;
  // Six layer-norm offsets, two FFN output biases, four attention biases,
  // depthwise and second pointwise biases. Wider biases only when they fit.
  std::int64_t n = 6 * d + 2 * d + 4 * d + 2 * d;
  if (f <= d) n += 2 * f;
  return n;
}

namespace {

std::int64_t affine(std::int64_t in, std::int64_t out) { return in * out + out; }

std::int64_t stack_count(std::int64_t in, int depth, std::int64_t width) {
  return affine(in, width) + (depth - 1) * affine(width, width);
}

}  // namespace

std::int64_t fusion_param_count(const FusionSpec& spec, int model_dim) {
  const std::int64_t d = model_dim;
  if (const auto* lin = std::get_if<LinearFusionSpec>(&spec)) {
    return stack_count(static_cast<std::int64_t>(lin->taps.size()) * d, lin->projector_depth,
                       lin->projector_dim);
  }
  if (const auto* hff = std::get_if<HffSpec>(&spec)) {
    const std::int64_t n = static_cast<std::int64_t>(hff->taps.size());
    const std::int64_t fp = hff->fp_out_dim;
    if (hff->variant == HffVariant::balanced) {
      return n * affine(d, fp) + stack_count(n * fp, hff->final_depth, hff->final_dim);
    }
    const auto [bottom, top] = hff_chain_split(static_cast<std::size_t>(n));
    auto chain = [&](std::int64_t len) { return affine(d, fp) + (len - 1) * affine(fp + d, fp); };
    return chain(static_cast<std::int64_t>(bottom)) + chain(static_cast<std::int64_t>(top)) +
           stack_count(2 * fp, hff->final_depth, hff->final_dim);
  }
  return 0;
}

std::int64_t fusion_output_dim(const FusionSpec& spec, int model_dim) {
  if (const auto* lin = std::get_if<LinearFusionSpec>(&spec)) return lin->projector_dim;
  if (const auto* hff = std::get_if<HffSpec>(&spec)) return hff->final_dim;
  return model_dim;
}

TrainableCount count_trainable_params(const EncoderConfig& encoder,
                                      const std::optional<FusionSpec>& fusion,
                                      const std::optional<PeftSpec>& peft) {
  TrainableCount out;
  const PeftSpec p = peft.value_or(PeftSpec{});
  switch (p.kind) {
    case PeftKind::none: break;
    case PeftKind::full: out.encoder = encoder_param_count(encoder); break;
    case PeftKind::fths: out.encoder = block_param_count(encoder); break;
    case PeftKind::bitfit: out.encoder = encoder.num_layers * block_bitfit_count(encoder); break;
    case PeftKind::adapter:
      out.encoder = static_cast<std::int64_t>(p.adapter_layers ? p.adapter_layers->size() : 0) *
                    adapter_param_count(encoder.model_dim, p.bottleneck_dim);
      break;
  }
  if (p.combined_fusion) {
    out.head = fusion_param_count(*p.combined_fusion, encoder.model_dim);
  } else if (fusion) {
    out.head = fusion_param_count(*fusion, encoder.model_dim);
  }
  return out;
}

std::int64_t encoder_total_params(const EncoderConfig& encoder, const PeftSpec& peft) {
  std::int64_t n = encoder_param_count(encoder);
  if (peft.kind == PeftKind::adapter && peft.adapter_layers) {
    n += static_cast<std::int64_t>(peft.adapter_layers->size()) *
         adapter_param_count(encoder.model_dim, peft.bottleneck_dim);
  }
  return n;
}

std::int64_t classifier_param_count(const ModelSpec& spec) {
  return affine(fusion_output_dim(resolved_head(spec), spec.encoder.model_dim), spec.num_classes);
}

namespace {

struct Sym {
  Shape shape;
  bool rg = false;
};

// Replays the op sequence of one training step on shapes only, charging an
// OpCounter exactly as the live kernels and backward pass would.
class Tracer {
 public:
  Tracer(const ModelSpec& spec, OpCounter& counter) : spec_(spec), c_(counter) {}

  void example(std::int64_t seq_len);
  void batch_reduce(int batch) {
    scope_ = "loss";
    Sym total{{}, any_trainable_};
    for (int i = 1; i < batch; ++i) total = op(OpKind::Add, {total, Sym{{}, any_trainable_}}, {});
    op(OpKind::Scale, {total}, {});
  }
 private:
  bool trainable(const std::string& name, std::int64_t numel) const {
    const PeftSpec& p = spec_.peft;
    if (name.starts_with("head/") || name.starts_with("classifier/")) return true;
    switch (p.kind) {
      case PeftKind::none: return false;
      case PeftKind::full: return true;
      case PeftKind::fths:
        return scope_within(name, layer_prefix(spec_.encoder.num_layers - 1));
      case PeftKind::bitfit: return bitfit_selects(name, numel, spec_.encoder.model_dim);
      case PeftKind::adapter:
        for (int l : p.adapter_layers->indices())
          if (scope_within(name, layer_prefix(l) + "/adapter")) return true;
        return false;
    }
    return false;
  }

  Sym param(const std::string& name, Shape shape) {
    const bool rg = trainable(name, shape_numel(shape));
    if (rg) any_trainable_ = true;
    return Sym{std::move(shape), rg};
  }

  Sym op(OpKind kind, std::initializer_list<Sym> ins, Shape out) {
    return op(kind, std::vector<Sym>(ins), std::move(out));
  }

  Sym op(OpKind kind, const std::vector<Sym>& ins, Shape out) {
    std::vector<Shape> shapes;
    bool rg = false;
    for (const auto& s : ins) {
      shapes.push_back(s.shape);
      rg = rg || s.rg;
    }
    const auto n = static_cast<std::uint64_t>(shape_numel(out));
    c_.record_forward(kind, scope_, forward_flops(kind, shapes, out), rg, n);
    if (rg) {
      std::uint64_t flops = 0;
      for (std::size_t i = 0; i < ins.size(); ++i)
        if (ins[i].rg) flops += backward_flops(kind, i, shapes, out);
      c_.record_backward(kind, scope_, flops);
    }
    return Sym{std::move(out), rg};
  }

  Sym linear(const Sym& x, const std::string& name, std::int64_t in, std::int64_t out) {
    const Sym w = param(name + "/weight", {in, out});
    const Sym b = param(name + "/bias", {out});
    const Sym h = op(OpKind::MatMul, {x, w}, {x.shape[0], out});
    return op(OpKind::BiasAdd, {h, b}, h.shape);
  }
  Sym norm(const Sym& x, const std::string& name) {
    const std::int64_t d = x.shape[1];
    const Sym g = param(name + "/scale", {d});
    const Sym b = param(name + "/bias", {d});
    return op(OpKind::LayerNorm, {x, g, b}, x.shape);
  }
  Sym unary(OpKind k, const Sym& x) { return op(k, {x}, x.shape); }
  Sym add(const Sym& a, const Sym& b) { return op(OpKind::Add, {a, b}, a.shape); }
  Sym concat(const std::vector<Sym>& parts) {
    std::int64_t cols = 0;
    for (const auto& p : parts) cols += p.shape[1];
    return op(OpKind::Concat, parts, {parts[0].shape[0], cols});
  }
  Sym project(Sym h, int depth, std::int64_t width) {
    for (int i = 0; i < depth; ++i) {
      h = linear(h, fmt::format("head/project_{}", i), h.shape[1], width);
      if (i + 1 < depth) h = unary(OpKind::Relu, h);
    }
    return h;
  }

  Sym frontend(std::int64_t seq_len);
  Sym block(int layer, const Sym& x);
  Sym ffn(const Sym& x, const std::string& p);
  Sym head(const std::vector<Sym>& taps);

  const ModelSpec& spec_;
  OpCounter& c_;
  std::string scope_;
  bool any_trainable_ = false;
};

Sym Tracer::frontend(std::int64_t seq_len) {
  const EncoderConfig& e = spec_.encoder;
  const std::int64_t d = e.model_dim;
  scope_ = "encoder/frontend";
  const Sym frames{{seq_len, e.input_dim}, false};
  const std::int64_t t1 = seq_len / 2, t2 = t1 / 2;
  Sym h = op(OpKind::Conv1d, {frames, param("encoder/frontend/conv1/weight", {3, e.input_dim, d})},
             {t1, d});
  h = unary(OpKind::Swish, op(OpKind::BiasAdd, {h, param("encoder/frontend/conv1/bias", {d})}, h.shape));
  h = op(OpKind::Conv1d, {h, param("encoder/frontend/conv2/weight", {3, d, d})}, {t2, d});
  h = unary(OpKind::Swish, op(OpKind::BiasAdd, {h, param("encoder/frontend/conv2/bias", {d})}, h.shape));
  h = linear(h, "encoder/frontend/proj", d, d);
  return add(h, Sym{h.shape, false});
}

Sym Tracer::ffn(const Sym& x, const std::string& p) {
  const std::int64_t d = spec_.encoder.model_dim;
  const std::int64_t f = d * spec_.encoder.ffn_expansion;
  Sym h = norm(x, p + "/norm");
  h = unary(OpKind::Swish, linear(h, p + "/fc1", d, f));
  return linear(h, p + "/fc2", f, d);
}

Sym Tracer::block(int layer, const Sym& x) {
  const EncoderConfig& e = spec_.encoder;
  const std::int64_t d = e.model_dim, t = x.shape[0];
  const std::string p = layer_prefix(layer);
  scope_ = p;
  Sym h = add(x, unary(OpKind::Scale, ffn(x, p + "/ffn1")));

  {
    const Sym n = norm(h, p + "/attn/norm");
    const Sym q = linear(n, p + "/attn/query", d, d);
    const Sym k = linear(n, p + "/attn/key", d, d);
    const Sym v = linear(n, p + "/attn/value", d, d);
    const std::int64_t dh = d / e.num_heads;
    std::vector<Sym> heads;
    for (int i = 0; i < e.num_heads; ++i) {
      const Sym qh = op(OpKind::Slice, {q}, {t, dh});
      const Sym kh = op(OpKind::Slice, {k}, {t, dh});
      const Sym vh = op(OpKind::Slice, {v}, {t, dh});
      const Sym kt = op(OpKind::Transpose, {kh}, {dh, t});
      const Sym s = unary(OpKind::Softmax, unary(OpKind::Scale, op(OpKind::MatMul, {qh, kt}, {t, t})));
      heads.push_back(op(OpKind::MatMul, {s, vh}, {t, dh}));
    }
    h = add(h, linear(concat(heads), p + "/attn/out", d, d));
  }
  {
    const int k = e.conv_kernel;
    Sym c = linear(norm(h, p + "/conv/norm"), p + "/conv/pointwise1", d, 2 * d);
    c = op(OpKind::Glu, {c}, {t, d});
    c = op(OpKind::DepthwiseConv1d, {c, param(p + "/conv/depthwise/weight", {k, d})}, {t, d});
    c = op(OpKind::BiasAdd, {c, param(p + "/conv/depthwise/bias", {d})}, c.shape);
    c = unary(OpKind::Swish, norm(c, p + "/conv/inner_norm"));
    h = add(h, linear(c, p + "/conv/pointwise2", d, d));
  }
  h = add(h, unary(OpKind::Scale, ffn(h, p + "/ffn2")));
  h = norm(h, p + "/final_norm");
  const PeftSpec& peft = spec_.peft;
  if (peft.kind == PeftKind::adapter && peft.adapter_layers->contains(layer)) {
    scope_ = p + "/adapter";
    const std::string a = p + "/adapter";
    Sym r = linear(norm(h, a + "/norm"), a + "/down", d, peft.bottleneck_dim);
    r = linear(unary(OpKind::Relu, r), a + "/up", peft.bottleneck_dim, d);
    h = add(h, r);
  }
  return h;
}

Sym Tracer::head(const std::vector<Sym>& taps) {
  const FusionSpec spec = resolved_head(spec_);
  const std::int64_t d = spec_.encoder.model_dim;
  scope_ = "head";
  if (std::holds_alternative<SingleLayerSpec>(spec)) return taps[0];
  if (const auto* lin = std::get_if<LinearFusionSpec>(&spec)) {
    const Sym x = taps.size() == 1 ? taps[0] : concat(taps);
    return project(x, lin->projector_depth, lin->projector_dim);
  }
  const auto& hff = std::get<HffSpec>(spec);
  const std::int64_t fp = hff.fp_out_dim;
  if (hff.variant == HffVariant::balanced) {
    std::vector<Sym> pairs;
    for (std::size_t i = 0; i < taps.size(); i += 2) {
      const Sym a = linear(taps[i], fmt::format("head/fp_{}", i), d, fp);
      if (i + 1 < taps.size()) {
        pairs.push_back(concat({a, linear(taps[i + 1], fmt::format("head/fp_{}", i + 1), d, fp)}));
      } else {
        pairs.push_back(a);
      }
    }
    return project(concat(pairs), hff.final_depth, hff.final_dim);
  }
  const auto [bottom, top] = hff_chain_split(taps.size());
  const std::size_t n = taps.size();
  auto chain = [&](const char* name, std::size_t len, auto tap_index) {
    Sym state = linear(taps[tap_index(0)], fmt::format("head/{}/step_0", name), d, fp);
    for (std::size_t s = 1; s < len; ++s) {
      state = linear(concat({state, taps[tap_index(s)]}), fmt::format("head/{}/step_{}", name, s),
                     fp + d, fp);
    }
    return state;
  };
  const Sym low = chain("bottom", bottom, [](std::size_t s) { return s; });
  const Sym high = chain("top", top, [n](std::size_t s) { return n - 1 - s; });
  return project(concat({low, high}), hff.final_depth, hff.final_dim);
}

void Tracer::example(std::int64_t seq_len) {
  const TapSet taps = fusion_taps(resolved_head(spec_));
  Sym h = frontend(seq_len);
  std::vector<Sym> outs;
  for (int i = 0; i <= taps.max(); ++i) {
    h = block(i, h);
    if (taps.contains(i)) outs.push_back(h);
  }
  Sym y = head(outs);
  scope_ = "classifier";
  y = linear(y, "classifier", y.shape[1], spec_.num_classes);
  scope_ = "loss";
  op(OpKind::CrossEntropy, {y}, {});
}

}  // namespace

StepCost trace_step_cost(const ModelSpec& spec, int batch, int seq_len) {
  validate_model(spec);
  if (batch < 0) throw ConfigError("batch must be non-negative");
  if (seq_len < spec.encoder.frontend_subsampling) {
    throw ConfigError(fmt::format("seq_len {} is shorter than the frontend receptive field", seq_len));
  }
  StepCost cost;
  const TrainableCount tc = count_trainable_params(spec.encoder, spec.fusion, spec.peft);
  cost.trainable_params = tc.encoder + tc.head + classifier_param_count(spec);
  Tracer t(spec, cost.ops);
  for (int b = 0; b < batch; ++b) t.example(seq_len);
  if (batch > 0) t.batch_reduce(batch);
  cost.activation_bytes = 4 * cost.ops.retained_elements();
  cost.state_bytes = 16 * static_cast<std::uint64_t>(cost.trainable_params);
  return cost;
}

std::uint64_t estimate_activation_memory(const ModelSpec& spec, int batch, int seq_len) {
  return trace_step_cost(spec, batch, seq_len).total_bytes();
}

std::uint64_t count_backward_flops(const ModelSpec& spec, int batch, int seq_len) {
  return trace_step_cost(spec, batch, seq_len).ops.backward_flops();
}

std::string canonical_spec(const ModelSpec& spec) {
  const EncoderConfig& e = spec.encoder;
  std::string s = fmt::format("encoder:{},{},{},{},{},{},{};", e.num_layers, e.model_dim, e.num_heads,
                              e.ffn_expansion, e.conv_kernel, e.frontend_subsampling, e.input_dim);
  s += fmt::format("peft:{},{},{};", peft_kind_name(spec.peft.kind),
                   spec.peft.adapter_layers ? spec.peft.adapter_layers->str() : "-",
                   spec.peft.bottleneck_dim);
  s += "head:" + fusion_label(resolved_head(spec));
  s += spec.peft.combined_fusion ? ",combined;" : ";";
  s += fmt::format("classes:{}", spec.num_classes);
  return s;
}

std::string spec_fingerprint(const ModelSpec& spec, int batch, int seq_len) {
  const std::string s = canonical_spec(spec) + fmt::format(";batch:{};seq:{}", batch, seq_len);
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return fmt::format("{:016x}", h);
}

std::string environment_descriptor() {
  return fmt::format("compiler={} eigen={}.{}.{} hardware_threads={} simd={}", __VERSION__,
                     EIGEN_WORLD_VERSION, EIGEN_MAJOR_VERSION, EIGEN_MINOR_VERSION,
                     std::thread::hardware_concurrency(), Eigen::SimdInstructionSetsInUse());
}

ResourceReport resource_report(const ModelSpec& spec, int batch, int seq_len) {
  const StepCost cost = trace_step_cost(spec, batch, seq_len);
  const TrainableCount tc = count_trainable_params(spec.encoder, spec.fusion, spec.peft);
  ResourceReport r;
  r.label = model_label(spec);
  r.trainable_encoder_params = tc.encoder;
  r.head_params = tc.head;
  r.trainable_params = cost.trainable_params;
  r.frozen_params = encoder_total_params(spec.encoder, spec.peft) - tc.encoder;
  r.activation_bytes = cost.activation_bytes;
  r.memory_bytes = cost.total_bytes();
  const auto b = static_cast<std::uint64_t>(std::max(batch, 1));
  r.forward_flops = cost.ops.forward_flops() / b;
  r.backward_flops = cost.ops.backward_flops() / b;
  r.environment = environment_descriptor();
  r.config_fingerprint = spec_fingerprint(spec, batch, seq_len);
  return r;
}

std::string format_report(const ResourceReport& r) {
  std::string s;
  s += fmt::format("# {}\n", kFlopConvention);
  s += fmt::format("label: {}\n", r.label);
  s += fmt::format("trainable_encoder_params: {}\n", r.trainable_encoder_params);
  s += fmt::format("head_params: {}\n", r.head_params);
  s += fmt::format("trainable_params: {}\n", r.trainable_params);
  s += fmt::format("frozen_params: {}\n", r.frozen_params);
  s += fmt::format("activation_bytes: {}\n", r.activation_bytes);
  s += fmt::format("memory_bytes: {}\n", r.memory_bytes);
  s += fmt::format("forward_flops_per_example: {}\n", r.forward_flops);
  s += fmt::format("backward_flops_per_example: {}\n", r.backward_flops);
  s += fmt::format("throughput_examples_per_sec: {}\n",
                   r.throughput ? fmt::format("{:.2f}", *r.throughput) : std::string("n/a"));
  s += fmt::format("environment: {}\n", r.environment);
  s += fmt::format("config_fingerprint: {}\n", r.config_fingerprint);
  return s;
}

}  // namespace hfl
