#include "hfl/encoder.hpp"

#include <cmath>
#include <fmt/format.h>

#include "hfl/op_counter.hpp"
#include "hfl/ops.hpp"

namespace hfl {

EncoderConfig EncoderConfig::desk() { return EncoderConfig{}; }

EncoderConfig EncoderConfig::paper() {
  EncoderConfig c;
  c.num_layers = 24;
  c.model_dim = 1024;
  c.num_heads = 8;
  c.ffn_expansion = 4;
  c.conv_kernel = 32;
  c.frontend_subsampling = 4;
  c.input_dim = 128;
  return c;
}

void EncoderConfig::validate() const {
  auto positive = [](int v, const char* field) {
    if (v <= 0) throw ConfigError(fmt::format("encoder.{} must be positive, got {}", field, v));
  };
  positive(num_layers, "num_layers");
  positive(model_dim, "model_dim");
  positive(num_heads, "num_heads");
  positive(ffn_expansion, "ffn_expansion");
  positive(conv_kernel, "conv_kernel");
  positive(frontend_subsampling, "frontend_subsampling");
  positive(input_dim, "input_dim");
  if (model_dim % num_heads != 0) {
    throw ConfigError(fmt::format("encoder.num_heads ({}) must divide encoder.model_dim ({})",
                                  num_heads, model_dim));
  }
  if (frontend_subsampling != 4) {
    throw ConfigError(fmt::format(
        "encoder.frontend_subsampling must be 4 (two stride-2 convolutions), got {}",
        frontend_subsampling));
  }
}

TapSet::TapSet(std::vector<int> indices) : indices_(std::move(indices)) {
  if (indices_.empty()) throw ConfigError("tap set must not be empty");
  for (std::size_t i = 0; i < indices_.size(); ++i) {
    if (indices_[i] < 0) throw ConfigError(fmt::format("tap index {} is negative", indices_[i]));
    if (i > 0 && indices_[i] <= indices_[i - 1]) {
      throw ConfigError(fmt::format("tap indices must be strictly increasing: {}", str()));
    }
  }
}

TapSet TapSet::evenly_spaced(int count, int num_layers) {
  if (count <= 0 || count > num_layers) {
    throw ConfigError(fmt::format("cannot place {} taps on {} layers", count, num_layers));
  }
  std::vector<int> idx;
  for (int i = 0; i < count; ++i) idx.push_back((i + 1) * num_layers / count - 1);
  return TapSet(std::move(idx));
}

TapSet TapSet::all(int num_layers) {
  std::vector<int> idx(static_cast<std::size_t>(num_layers));
  for (int i = 0; i < num_layers; ++i) idx[static_cast<std::size_t>(i)] = i;
  return TapSet(std::move(idx));
}

bool TapSet::contains(int layer) const {
  return std::find(indices_.begin(), indices_.end(), layer) != indices_.end();
}

void TapSet::validate_for(int num_layers) const {
  if (indices_.empty()) throw ConfigError("tap set must not be empty");
  if (max() >= num_layers) {
    throw ConfigError(fmt::format("tap index {} out of range for a {}-layer encoder", max(),
                                  num_layers));
  }
}

std::string TapSet::str() const {
  std::string s = "{";
  for (std::size_t i = 0; i < indices_.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(indices_[i]);
  }
  return s + "}";
}

const Tensor& FeatureTaps::at(int layer) const {
  auto it = taps_.find(layer);
  if (it == taps_.end()) throw std::out_of_range(fmt::format("no feature tap for layer {}", layer));
  return it->second;
}

std::vector<int> FeatureTaps::indices() const {
  std::vector<int> out;
  for (const auto& [k, v] : taps_) out.push_back(k);
  return out;
}

std::string layer_prefix(int layer) { return fmt::format("encoder/layer_{}", layer); }

Tensor sinusoidal_positions(std::int64_t time, std::int64_t dim, DType dtype) {
  Tensor pe = Tensor::zeros({time, dim}, dtype);
  for (std::int64_t t = 0; t < time; ++t) {
    for (std::int64_t i = 0; i < dim; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
      pe.set(t * dim + i, std::sin(static_cast<double>(t) * freq));
      if (i + 1 < dim) pe.set(t * dim + i + 1, std::cos(static_cast<double>(t) * freq));
    }
  }
  return pe;
}

Encoder Encoder::build(const EncoderConfig& config, std::uint64_t seed, DType dtype) {
  config.validate();
  Encoder e;
  e.config_ = config;
  e.dtype_ = dtype;
  Rng rng(seed);
  const std::int64_t d = config.model_dim;
  auto& s = e.params_;

  auto& fe = e.frontend_;
  fe.conv1_weight = &s.add("encoder/frontend/conv1/weight",
                           random_normal({3, config.input_dim, d},
                                         1.0 / std::sqrt(3.0 * config.input_dim), rng, dtype));
  fe.conv1_bias = &s.add("encoder/frontend/conv1/bias", Tensor::zeros({d}, dtype));
  fe.conv2_weight = &s.add("encoder/frontend/conv2/weight",
                           random_normal({3, d, d}, 1.0 / std::sqrt(3.0 * d), rng, dtype));
  fe.conv2_bias = &s.add("encoder/frontend/conv2/bias", Tensor::zeros({d}, dtype));
  fe.proj = make_linear(s, "encoder/frontend/proj", d, d, rng, dtype);

  const std::int64_t f = static_cast<std::int64_t>(config.ffn_expansion) * d;
  auto make_ffn = [&](const std::string& p) {
    FeedForward ff;
    ff.norm = make_norm(s, p + "/norm", d, dtype);
    ff.fc1 = make_linear(s, p + "/fc1", d, f, rng, dtype);
    ff.fc2 = make_linear(s, p + "/fc2", f, d, rng, dtype);
    return ff;
  };
  for (int i = 0; i < config.num_layers; ++i) {
    const std::string p = layer_prefix(i);
    Block b;
    b.ffn1 = make_ffn(p + "/ffn1");
    b.attn.norm = make_norm(s, p + "/attn/norm", d, dtype);
    b.attn.query = make_linear(s, p + "/attn/query", d, d, rng, dtype);
    b.attn.key = make_linear(s, p + "/attn/key", d, d, rng, dtype);
    b.attn.value = make_linear(s, p + "/attn/value", d, d, rng, dtype);
    b.attn.out = make_linear(s, p + "/attn/out", d, d, rng, dtype);
    b.conv.norm = make_norm(s, p + "/conv/norm", d, dtype);
    b.conv.pointwise1 = make_linear(s, p + "/conv/pointwise1", d, 2 * d, rng, dtype);
    b.conv.depthwise_weight =
        &s.add(p + "/conv/depthwise/weight",
               random_normal({config.conv_kernel, d}, 1.0 / std::sqrt(static_cast<double>(config.conv_kernel)),
                             rng, dtype));
    b.conv.depthwise_bias = &s.add(p + "/conv/depthwise/bias", Tensor::zeros({d}, dtype));
    b.conv.inner_norm = make_norm(s, p + "/conv/inner_norm", d, dtype);
    b.conv.pointwise2 = make_linear(s, p + "/conv/pointwise2", d, d, rng, dtype);
    b.ffn2 = make_ffn(p + "/ffn2");
    b.final_norm = make_norm(s, p + "/final_norm", d, dtype);
    e.blocks_.push_back(std::move(b));
  }
  return e;
}

Tensor Encoder::frontend(const Tensor& frames) const {
  ScopeGuard scope("encoder/frontend");
  if (frames.rank() != 2 || frames.dim(1) != config_.input_dim) {
    throw ShapeError(fmt::format("encoder frontend expects (time, {}) frames, got {}",
                                 config_.input_dim, shape_str(frames.shape())));
  }
  if (frames.dim(0) < config_.frontend_subsampling) {
    throw ShapeError(fmt::format(
        "encoder frontend: sequence of {} frames is shorter than the receptive field ({})",
        frames.dim(0), config_.frontend_subsampling));
  }
  // kernel 3, stride 2, one frame of left padding: floor(t / 2) outputs.
  Tensor h = swish(bias_add(conv1d(frames, frontend_.conv1_weight->var(), 2, 1, 0),
                            frontend_.conv1_bias->var()));
  h = swish(bias_add(conv1d(h, frontend_.conv2_weight->var(), 2, 1, 0),
                     frontend_.conv2_bias->var()));
  h = frontend_.proj(h);
  return add(h, sinusoidal_positions(h.dim(0), h.dim(1), dtype_));
}

Tensor Encoder::feed_forward(const FeedForward& f, const Tensor& x) const {
  return f.fc2(swish(f.fc1(f.norm(x))));
}

Tensor Encoder::attention(const Attention& a, const Tensor& x) const {
  const Tensor h = a.norm(x);
  const Tensor q = a.query(h);
  const Tensor k = a.key(h);
  const Tensor v = a.value(h);
  const std::int64_t dh = config_.model_dim / config_.num_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> heads;
  heads.reserve(static_cast<std::size_t>(config_.num_heads));
  for (int i = 0; i < config_.num_heads; ++i) {
    const Tensor qh = slice(q, 1, i * dh, dh);
    const Tensor kh = slice(k, 1, i * dh, dh);
    const Tensor vh = slice(v, 1, i * dh, dh);
    const Tensor probs = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt));
    heads.push_back(matmul(probs, vh));
  }
  return a.out(concat(heads));
}

Tensor Encoder::conv_module(const ConvModule& c, const Tensor& x) const {
  const int k = config_.conv_kernel;
  const int left = (k - 1) / 2;
  Tensor h = glu(c.pointwise1(c.norm(x)));
  h = bias_add(depthwise_conv1d(h, c.depthwise_weight->var(), left, k - 1 - left),
               c.depthwise_bias->var());
  return c.pointwise2(swish(c.inner_norm(h)));
}

Tensor Encoder::run_block(int layer, const Tensor& x) const {
  const Block& b = blocks_.at(static_cast<std::size_t>(layer));
  ScopeGuard scope(layer_prefix(layer));
  Tensor h = add(x, scale(feed_forward(b.ffn1, x), 0.5));
  h = add(h, attention(b.attn, h));
  h = add(h, conv_module(b.conv, h));
  h = add(h, scale(feed_forward(b.ffn2, h), 0.5));
  h = b.final_norm(h);
  if (b.adapter) {
    ScopeGuard adapter_scope("adapter");
    h = adapter_forward(*b.adapter, h);
  }
  return h;
}

EncoderPrefix Encoder::run_prefix(const Tensor& frames, int depth, const TapSet& tap_set) const {
  tap_set.validate_for(config_.num_layers);
  if (depth < 0 || depth > config_.num_layers) {
    throw ConfigError(fmt::format("prefix depth {} out of range", depth));
  }
  EncoderPrefix prefix;
  prefix.depth = depth;
  prefix.stream = frontend(frames);
  for (int i = 0; i < depth; ++i) {
    prefix.stream = run_block(i, prefix.stream);
    if (tap_set.contains(i)) prefix.taps.insert(i, prefix.stream);
  }
  return prefix;
}

FeatureTaps Encoder::resume(const EncoderPrefix& prefix, const TapSet& tap_set) const {
  tap_set.validate_for(config_.num_layers);
  FeatureTaps taps;
  for (int i : tap_set.indices()) {
    if (i < prefix.depth) taps.insert(i, prefix.taps.at(i));
  }
  Tensor h = prefix.stream;
  for (int i = prefix.depth; i <= tap_set.max(); ++i) {
    h = run_block(i, h);
    if (tap_set.contains(i)) taps.insert(i, h);
  }
  return taps;
}

FeatureTaps Encoder::encode_with_taps(const Tensor& frames, const TapSet& tap_set) const {
  return resume(run_prefix(frames, 0, tap_set), tap_set);
}

void Encoder::attach_adapter(int layer, int bottleneck, Rng& rng) {
  if (layer < 0 || layer >= config_.num_layers) {
    throw ConfigError(fmt::format("adapter layer {} out of range for a {}-layer encoder", layer,
                                  config_.num_layers));
  }
  if (bottleneck <= 0 || bottleneck >= config_.model_dim) {
    throw ConfigError(fmt::format("adapter bottleneck {} must be in (0, model_dim={})", bottleneck,
                                  config_.model_dim));
  }
  auto& b = blocks_[static_cast<std::size_t>(layer)];
  if (b.adapter) throw ConfigError(fmt::format("layer {} already has an adapter", layer));
  b.adapter = make_adapter(params_, layer_prefix(layer) + "/adapter", config_.model_dim, bottleneck,
                           rng, dtype_);
}

bool Encoder::has_adapter(int layer) const {
  return blocks_.at(static_cast<std::size_t>(layer)).adapter.has_value();
}

std::vector<int> Encoder::adapter_layers() const {
  std::vector<int> out;
  for (int i = 0; i < config_.num_layers; ++i)
    if (has_adapter(i)) out.push_back(i);
  return out;
}

std::optional<int> Encoder::lowest_trainable_depth() const {
  for (int i = 0; i < config_.num_layers; ++i) {
    const std::string prefix = layer_prefix(i);
    for (const Parameter* p : params_.all()) {
      if (p->trainable() && scope_within(p->name(), prefix)) return i;
    }
  }
  return std::nullopt;
}

bool Encoder::frontend_trainable() const {
  for (const Parameter* p : params_.all())
    if (p->trainable() && scope_within(p->name(), "encoder/frontend")) return true;
  return false;
}

Encoder Encoder::clone() const {
  Encoder e = build(config_, 0, dtype_);
  Rng rng(0);
  for (int layer : adapter_layers())
    e.attach_adapter(layer, static_cast<int>(blocks_[static_cast<std::size_t>(layer)].adapter->bottleneck()), rng);
  for (const Parameter* p : params_.all()) {
    Parameter& dst = e.params_.at(p->name());
    dst.value() = p->value().clone();
    dst.set_trainable(p->trainable());
  }
  return e;
}

}  // namespace hfl
