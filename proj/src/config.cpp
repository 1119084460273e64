#include "hfl/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <fmt/format.h>
#include <fstream>
#include <set>
#include <sstream>

namespace hfl {

std::string_view preset_name(Preset p) { return p == Preset::desk ? "desk" : "paper-counting"; }

Preset preset_from_name(std::string_view name) {
  if (name == "desk") return Preset::desk;
  if (name == "paper-counting") return Preset::paper_counting;
  throw ConfigError(fmt::format("unknown preset '{}' (expected desk or paper-counting)", name));
}

RawConfig default_raw_config(Preset preset) {
  const EncoderConfig e = preset == Preset::desk ? EncoderConfig::desk() : EncoderConfig::paper();
  const TrainConfig t;
  const PretrainConfig p;
  const SynthConfig s;
  RawConfig r;
  r["experiment"] = {{"preset", std::string(preset_name(preset))}, {"seed", "1"}, {"output_dir", "runs/default"}};
  r["encoder"] = {{"num_layers", std::to_string(e.num_layers)},
                  {"model_dim", std::to_string(e.model_dim)},
                  {"num_heads", std::to_string(e.num_heads)},
                  {"ffn_expansion", std::to_string(e.ffn_expansion)},
                  {"conv_kernel", std::to_string(e.conv_kernel)},
                  {"frontend_subsampling", std::to_string(e.frontend_subsampling)},
                  {"input_dim", std::to_string(e.input_dim)}};
  r["fusion"] = {{"kind", "none"},          {"layer", "top"},        {"taps", "all"},
                 {"projector_depth", "1"},  {"projector_dim", "auto"}, {"variant", "balanced"},
                 {"fp_out_dim", "auto"},    {"final_depth", "3"},    {"final_dim", "auto"}};
  r["peft"] = {{"kind", "none"}, {"adapter_layers", "all"}, {"bottleneck_dim", "8"}, {"combine_with_fusion", "false"}};
  r["train"] = {{"steps", std::to_string(t.steps)},
                {"batch_size", std::to_string(t.batch_size)},
                {"warmup_steps", std::to_string(t.warmup_steps)},
                {"lr_head", fmt::format("{}", t.lr_head)},
                {"lr_encoder", fmt::format("{}", t.lr_encoder)},
                {"ema_decay", fmt::format("{}", t.ema_decay)},
                {"log_every", std::to_string(t.log_every)},
                {"eval_subset", std::to_string(t.eval_subset)},
                {"cache_frozen_prefix", "true"}};
  r["pretrain"] = {{"steps", std::to_string(p.steps)},
                   {"batch_size", std::to_string(p.batch_size)},
                   {"warmup_steps", std::to_string(p.warmup_steps)},
                   {"lr", fmt::format("{}", p.lr)},
                   {"num_codes", std::to_string(p.num_codes)},
                   {"code_dim", std::to_string(p.code_dim)},
                   {"mask_prob", fmt::format("{}", p.mask_prob)},
                   {"mask_span", std::to_string(p.mask_span)},
                   {"log_every", std::to_string(p.log_every)},
                   {"checkpoint", ""}};
  r["synth"] = {{"vocab", std::to_string(s.vocab)},
                {"min_frames_per_symbol", std::to_string(s.min_frames_per_symbol)},
                {"max_frames_per_symbol", std::to_string(s.max_frames_per_symbol)},
                {"input_dim", std::to_string(e.input_dim)},
                {"emission_rank", std::to_string(s.emission_rank)},
                {"noise_std", fmt::format("{}", s.noise_std)},
                {"min_symbols", std::to_string(s.min_symbols)},
                {"max_symbols", std::to_string(s.max_symbols)},
                {"pretrain_size", std::to_string(s.pretrain_size)},
                {"train_size", std::to_string(s.train_size)},
                {"test_size", std::to_string(s.test_size)},
                {"self_transition", fmt::format("{}", s.self_transition)},
                {"successor_bias", fmt::format("{}", s.successor_bias)},
                {"latent_smoothness", fmt::format("{}", s.latent_smoothness)},
                {"latent_std", fmt::format("{}", s.latent_std)},
                {"offset_scale", fmt::format("{}", s.offset_scale)},
                {"confusable_pairs", std::to_string(s.confusable_pairs)},
                {"pair_distance", fmt::format("{}", s.pair_distance)}};
  r["probe"] = {{"taps", "all"}};
  r["fusion_table"] = {{"tap_counts", "1,2,4,6"}, {"depths", "1,2,3,4"}, {"hff", "true"}};
  r["comparison"] = {{"bottleneck", "8"},
                     {"subset", "top-half"},
                     {"seq_len", "96"},
                     {"throughput_warmup", "3"},
                     {"throughput_steps", "10"}};
  return r;
}

RawConfig parse_ini(const std::string& text, const std::string& source) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(fmt::format("{}: line {}: {}", source, e.line(), e.message()));
  }
  RawConfig raw;
  for (const auto& [section, body] : tree) {
    if (body.empty()) {
      throw ConfigError(fmt::format("{}: key '{}' outside any [section]", source, section));
    }
    auto& out = raw[section];
    for (const auto& [key, value] : body) out[key] = value.get_value<std::string>();
  }
  return raw;
}

RawConfig read_ini_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot read config '{}'", path.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_ini(ss.str(), path.string());
}

std::string to_ini(const RawConfig& raw) {
  std::string s;
  for (const auto& [section, body] : raw) {
    if (!s.empty()) s += "\n";
    s += fmt::format("[{}]\n", section);
    for (const auto& [k, v] : body) s += fmt::format("{} = {}\n", k, v);
  }
  return s;
}

void merge_raw(RawConfig& base, const RawConfig& overrides, const std::string& source) {
  for (const auto& [section, body] : overrides) {
    auto sit = base.find(section);
    if (sit == base.end()) throw ConfigError(fmt::format("{}: unknown section [{}]", source, section));
    for (const auto& [k, v] : body) {
      auto kit = sit->second.find(k);
      if (kit == sit->second.end()) {
        throw ConfigError(fmt::format("{}: unknown key '{}' in [{}]", source, k, section));
      }
      kit->second = v;
    }
  }
}

void set_raw(RawConfig& raw, const std::string& dotted_key, const std::string& value) {
  const auto dot = dotted_key.find('.');
  if (dot == std::string::npos) {
    throw ConfigError(fmt::format("config key '{}' must be written section.key", dotted_key));
  }
  merge_raw(raw, RawConfig{{dotted_key.substr(0, dot), {{dotted_key.substr(dot + 1), value}}}}, "override");
}

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t");
  const auto e = s.find_last_not_of(" \t");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

class Reader {
 public:
  Reader(const RawConfig& raw, std::string section) : raw_(raw), section_(std::move(section)) {}

  const std::string& str(const std::string& key) const { return raw_.at(section_).at(key); }
  std::string field(const std::string& key) const { return section_ + "." + key; }

  long long integer(const std::string& key) const {
    const std::string v = trim(str(key));
    long long out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
      throw ConfigError(fmt::format("{} must be an integer, got '{}'", field(key), v));
    }
    return out;
  }
  int i32(const std::string& key) const { return static_cast<int>(integer(key)); }
  double real(const std::string& key) const {
    const std::string v = trim(str(key));
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw ConfigError(fmt::format("{} must be a number, got '{}'", field(key), v));
  }
  bool boolean(const std::string& key) const {
    const std::string v = trim(str(key));
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(fmt::format("{} must be true or false, got '{}'", field(key), v));
  }
  int auto_or(const std::string& key, int fallback) const {
    return trim(str(key)) == "auto" ? fallback : i32(key);
  }

 private:
  const RawConfig& raw_;
  std::string section_;
};

}  // namespace

std::vector<int> parse_int_list(const std::string& text, const std::string& field) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    int v = 0;
    auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (item.empty() || ec != std::errc() || p != item.data() + item.size()) {
      throw ConfigError(fmt::format("{}: '{}' is not an integer list", field, text));
    }
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError(fmt::format("{}: empty list", field));
  return out;
}

TapSet parse_taps(const std::string& raw_text, int num_layers) {
  const std::string text = trim(raw_text);
  if (text == "all") return TapSet::all(num_layers);
  if (text.starts_with("even:")) {
    return TapSet::evenly_spaced(parse_int_list(text.substr(5), "taps").at(0), num_layers);
  }
  auto v = parse_int_list(text, "taps");
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] == v[i - 1]) throw ConfigError(fmt::format("duplicate tap index {} in '{}'", v[i], text));
  }
  TapSet t(std::move(v));
  t.validate_for(num_layers);
  return t;
}

TapSet top_half(int num_layers) {
  std::vector<int> idx;
  for (int i = num_layers / 2; i < num_layers; ++i) idx.push_back(i);
  return TapSet(std::move(idx));
}

ExperimentConfig resolve_config(const RawConfig& raw) {
  {
    RawConfig schema = default_raw_config(Preset::desk);
    RawConfig copy = schema;
    merge_raw(copy, raw, "config");
    for (const auto& [section, body] : schema) {
      auto it = raw.find(section);
      if (it == raw.end()) throw ConfigError(fmt::format("config is missing section [{}]", section));
      for (const auto& [k, v] : body) {
        if (!it->second.contains(k)) throw ConfigError(fmt::format("config is missing {}.{}", section, k));
      }
    }
  }
  ExperimentConfig c;
  c.raw = raw;
  const Reader x(raw, "experiment");
  c.preset = preset_from_name(trim(x.str("preset")));
  c.seed = static_cast<std::uint64_t>(x.integer("seed"));
  c.output_dir = trim(x.str("output_dir"));

  const Reader e(raw, "encoder");
  c.encoder.num_layers = e.i32("num_layers");
  c.encoder.model_dim = e.i32("model_dim");
  c.encoder.num_heads = e.i32("num_heads");
  c.encoder.ffn_expansion = e.i32("ffn_expansion");
  c.encoder.conv_kernel = e.i32("conv_kernel");
  c.encoder.frontend_subsampling = e.i32("frontend_subsampling");
  c.encoder.input_dim = e.i32("input_dim");
  c.encoder.validate();
  const int layers = c.encoder.num_layers;
  const int d = c.encoder.model_dim;

  const Reader f(raw, "fusion");
  const std::string kind = trim(f.str("kind"));
  if (kind == "none") {
  } else if (kind == "single") {
    const std::string l = trim(f.str("layer"));
    c.fusion = SingleLayerSpec{l == "top" ? layers - 1 : f.i32("layer")};
  } else if (kind == "linear") {
    c.fusion = LinearFusionSpec{parse_taps(f.str("taps"), layers), f.i32("projector_depth"),
                                f.auto_or("projector_dim", d)};
  } else if (kind == "hff") {
    const std::string v = trim(f.str("variant"));
    if (v != "balanced" && v != "unbalanced") {
      throw ConfigError(fmt::format("fusion.variant must be balanced or unbalanced, got '{}'", v));
    }
    c.fusion = HffSpec{parse_taps(f.str("taps"), layers),
                       v == "balanced" ? HffVariant::balanced : HffVariant::unbalanced,
                       f.auto_or("fp_out_dim", d / 2), f.i32("final_depth"), f.auto_or("final_dim", d)};
  } else {
    throw ConfigError(fmt::format("fusion.kind must be none, single, linear or hff, got '{}'", kind));
  }
  if (c.fusion) validate_fusion(*c.fusion, d, layers);

  const Reader p(raw, "peft");
  c.peft.kind = peft_kind_from_name(trim(p.str("kind")));
  if (c.peft.kind == PeftKind::adapter) {
    const std::string l = trim(p.str("adapter_layers"));
    c.peft.adapter_layers = l == "top-half" ? top_half(layers) : parse_taps(l, layers);
    c.peft.bottleneck_dim = p.i32("bottleneck_dim");
  }
  if (p.boolean("combine_with_fusion")) {
    if (!c.fusion) throw ConfigError("peft.combine_with_fusion requires a [fusion] head");
    c.peft.combined_fusion = c.fusion;
  }
  validate_peft(c.peft, c.encoder);

  const Reader t(raw, "train");
  c.train.steps = t.i32("steps");
  c.train.batch_size = t.i32("batch_size");
  c.train.warmup_steps = t.i32("warmup_steps");
  c.train.lr_head = t.real("lr_head");
  c.train.lr_encoder = t.real("lr_encoder");
  c.train.ema_decay = t.real("ema_decay");
  c.train.log_every = t.i32("log_every");
  c.train.eval_subset = t.i32("eval_subset");
  c.train.cache_frozen_prefix = t.boolean("cache_frozen_prefix");
  c.train.seed = c.seed;
  c.train.validate();

  const Reader q(raw, "pretrain");
  c.pretrain.steps = q.i32("steps");
  c.pretrain.batch_size = q.i32("batch_size");
  c.pretrain.warmup_steps = q.i32("warmup_steps");
  c.pretrain.lr = q.real("lr");
  c.pretrain.num_codes = q.i32("num_codes");
  c.pretrain.code_dim = q.i32("code_dim");
  c.pretrain.mask_prob = q.real("mask_prob");
  c.pretrain.mask_span = q.i32("mask_span");
  c.pretrain.log_every = q.i32("log_every");
  c.pretrain.seed = c.seed;
  c.pretrain.validate();
  c.checkpoint = trim(q.str("checkpoint"));

  const Reader s(raw, "synth");
  c.synth.vocab = s.i32("vocab");
  c.synth.min_frames_per_symbol = s.i32("min_frames_per_symbol");
  c.synth.max_frames_per_symbol = s.i32("max_frames_per_symbol");
  c.synth.input_dim = s.i32("input_dim");
  c.synth.emission_rank = s.i32("emission_rank");
  c.synth.noise_std = s.real("noise_std");
  c.synth.min_symbols = s.i32("min_symbols");
  c.synth.max_symbols = s.i32("max_symbols");
  c.synth.pretrain_size = s.i32("pretrain_size");
  c.synth.train_size = s.i32("train_size");
  c.synth.test_size = s.i32("test_size");
  c.synth.self_transition = s.real("self_transition");
  c.synth.successor_bias = s.real("successor_bias");
  c.synth.latent_smoothness = s.real("latent_smoothness");
  c.synth.latent_std = s.real("latent_std");
  c.synth.offset_scale = s.real("offset_scale");
  c.synth.confusable_pairs = s.i32("confusable_pairs");
  c.synth.pair_distance = s.real("pair_distance");
  c.synth.subsampling = c.encoder.frontend_subsampling;
  c.synth.validate();
  if (c.synth.input_dim != c.encoder.input_dim) {
    throw ConfigError(fmt::format("synth.input_dim ({}) must equal encoder.input_dim ({})", c.synth.input_dim,
                                  c.encoder.input_dim));
  }

  c.probe_taps = parse_taps(Reader(raw, "probe").str("taps"), layers);

  const Reader ft(raw, "fusion_table");
  c.fusion_table.tap_counts = parse_int_list(ft.str("tap_counts"), "fusion_table.tap_counts");
  c.fusion_table.depths = parse_int_list(ft.str("depths"), "fusion_table.depths");
  c.fusion_table.hff = ft.boolean("hff");
  for (int n : c.fusion_table.tap_counts) TapSet::evenly_spaced(n, layers);

  const Reader cmp(raw, "comparison");
  c.comparison.bottleneck = cmp.i32("bottleneck");
  const std::string subset = trim(cmp.str("subset"));
  if (subset != "top-half") c.comparison.subset = parse_taps(subset, layers);
  c.comparison.seq_len = cmp.i32("seq_len");
  c.comparison.throughput_warmup = cmp.i32("throughput_warmup");
  c.comparison.throughput_steps = cmp.i32("throughput_steps");
  if (c.comparison.bottleneck <= 0 || c.comparison.bottleneck >= d) {
    throw ConfigError(fmt::format("comparison.bottleneck must be in (0, {})", d));
  }
  if (c.comparison.throughput_steps < 10) throw ConfigError("comparison.throughput_steps must be >= 10");
  return c;
}

ExperimentConfig load_config(const std::optional<std::filesystem::path>& path, std::optional<Preset> preset) {
  RawConfig file;
  if (path) file = read_ini_file(*path);
  Preset chosen = Preset::desk;
  if (auto it = file.find("experiment"); it != file.end() && it->second.contains("preset")) {
    chosen = preset_from_name(trim(it->second.at("preset")));
  }
  if (preset) chosen = *preset;
  RawConfig raw = default_raw_config(chosen);
  merge_raw(raw, file, path ? path->string() : "config");
  raw["experiment"]["preset"] = std::string(preset_name(chosen));
  return resolve_config(raw);
}

ModelSpec ExperimentConfig::model_spec() const {
  ModelSpec m;
  m.encoder = encoder;
  m.fusion = fusion;
  m.peft = peft;
  m.num_classes = synth.vocab;
  return m;
}

std::filesystem::path ExperimentConfig::checkpoint_path() const {
  return checkpoint.empty() ? output_dir / "pretrained.ffck" : checkpoint;
}

}  // namespace hfl
