#include "hfl/corpus.hpp"

#include <cmath>
#include <fmt/format.h>
#include <random>

namespace hfl {

void SynthConfig::validate() const {
  auto positive = [](double v, const char* field) {
    if (!(v > 0)) throw ConfigError(fmt::format("synth.{} must be positive, got {}", field, v));
  };
  positive(vocab, "vocab");
  positive(min_frames_per_symbol, "min_frames_per_symbol");
  positive(input_dim, "input_dim");
  positive(emission_rank, "emission_rank");
  positive(min_symbols, "min_symbols");
  positive(pretrain_size, "pretrain_size");
  positive(train_size, "train_size");
  positive(test_size, "test_size");
  positive(subsampling, "subsampling");
  if (vocab < 3) throw ConfigError("synth.vocab must be at least 3");
  if (max_frames_per_symbol < min_frames_per_symbol)
    throw ConfigError("synth.max_frames_per_symbol must be >= synth.min_frames_per_symbol");
  if (max_symbols < min_symbols) throw ConfigError("synth.max_symbols must be >= synth.min_symbols");
  if (noise_std < 0) throw ConfigError("synth.noise_std must be non-negative");
  if (latent_std < 0 || offset_scale < 0) throw ConfigError("synth scales must be non-negative");
  if (self_transition < 0 || successor_bias < 0 || self_transition + successor_bias > 1)
    throw ConfigError("synth.self_transition + synth.successor_bias must be within [0, 1]");
  if (latent_smoothness < 0 || latent_smoothness >= 1)
    throw ConfigError("synth.latent_smoothness must be in [0, 1)");
  if (confusable_pairs < 0 || 2 * confusable_pairs > vocab)
    throw ConfigError("synth.confusable_pairs must be in [0, vocab/2]");
  if (input_dim - confusable_pairs < 1)
    throw ConfigError("synth.input_dim must exceed synth.confusable_pairs");
  if (pair_distance < 0) throw ConfigError("synth.pair_distance must be non-negative");
  if (min_symbols * min_frames_per_symbol < subsampling)
    throw ConfigError("synth: shortest utterance is shorter than the subsampling window");
}

SynthWorld::SynthWorld(const SynthConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const int k = cfg.vocab, d = cfg.input_dim, r = cfg.emission_rank;
  // The last confusable_pairs input dims are pair channels; everything else
  // lives in the leading base dims.
  const int pairs = cfg.confusable_pairs;
  const int base = d - pairs;
  for (int s = 0; s < k; ++s) {
    const bool second = s % 2 == 1 && s / 2 < pairs;
    if (second) {
      emission_.push_back(emission_.back());
      offset_.push_back(offset_.back());
    } else {
      std::vector<double> a(static_cast<std::size_t>(d * r), 0.0);
      for (int i = 0; i < base * r; ++i) a[static_cast<std::size_t>(i)] = normal(rng) / std::sqrt(static_cast<double>(r));
      emission_.push_back(std::move(a));
      std::vector<double> b(static_cast<std::size_t>(d), 0.0);
      for (int i = 0; i < base; ++i) b[static_cast<std::size_t>(i)] = cfg.offset_scale * normal(rng);
      offset_.push_back(std::move(b));
    }
    if (s / 2 < pairs)
      offset_.back()[static_cast<std::size_t>(base + s / 2)] = second ? cfg.pair_distance : -cfg.pair_distance;
  }
  transition_.assign(static_cast<std::size_t>(k * k), 0.0);
  std::uniform_int_distribution<int> pick(0, k - 1);
  for (int s = 0; s < k; ++s) {
    int a = pick(rng), b = pick(rng);
    while (a == s) a = pick(rng);
    while (b == s || b == a) b = pick(rng);
    const double rest = (1.0 - cfg.self_transition - cfg.successor_bias) / (k - 1);
    for (int t = 0; t < k; ++t) {
      double p = t == s ? cfg.self_transition : rest;
      if (t == a || t == b) p += cfg.successor_bias / 2;
      transition_[static_cast<std::size_t>(s * k + t)] = p;
    }
  }
}

Example SynthWorld::sample(std::mt19937_64& rng, DType dtype) const {
  const SynthConfig& c = cfg_;
  const int k = c.vocab, d = c.input_dim, r = c.emission_rank;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> n_symbols(c.min_symbols, c.max_symbols);
  std::uniform_int_distribution<int> run(c.min_frames_per_symbol, c.max_frames_per_symbol);

  const int count = n_symbols(rng);
  std::vector<std::int32_t> frame_symbols;
  int s = std::uniform_int_distribution<int>(0, k - 1)(rng);
  for (int i = 0; i < count; ++i) {
    if (i > 0) {
      std::discrete_distribution<int> next(transition_.begin() + s * k,
                                           transition_.begin() + (s + 1) * k);
      s = next(rng);
    }
    const int len = run(rng);
    for (int j = 0; j < len; ++j) frame_symbols.push_back(s);
  }

  const auto time = static_cast<std::int64_t>(frame_symbols.size());
  std::vector<double> x(static_cast<std::size_t>(time * d));
  std::vector<double> u(static_cast<std::size_t>(r));
  for (auto& v : u) v = c.latent_std * normal(rng);
  const double rho = c.latent_smoothness;
  const double innov = c.latent_std * std::sqrt(1.0 - rho * rho);
  for (std::int64_t t = 0; t < time; ++t) {
    if (t > 0)
      for (auto& v : u) v = rho * v + innov * normal(rng);
    const auto sym = static_cast<std::size_t>(frame_symbols[static_cast<std::size_t>(t)]);
    const auto& a = emission_[sym];
    const auto& b = offset_[sym];
    for (int i = 0; i < d; ++i) {
      double v = b[static_cast<std::size_t>(i)];
      for (int j = 0; j < r; ++j) v += a[static_cast<std::size_t>(i * r + j)] * u[static_cast<std::size_t>(j)];
      x[static_cast<std::size_t>(t * d + i)] = v + c.noise_std * normal(rng);
    }
  }
  Example ex;
  ex.frames = Tensor::from_values({time, d}, x, dtype);
  ex.labels = window_labels(frame_symbols, c.subsampling);
  ex.frame_symbols = std::move(frame_symbols);
  return ex;
}

std::vector<std::int32_t> window_labels(const std::vector<std::int32_t>& frame_symbols, int subsampling) {
  std::vector<std::int32_t> out;
  const std::size_t w = static_cast<std::size_t>(subsampling);
  for (std::size_t start = 0; start + w <= frame_symbols.size(); start += w) {
    std::int32_t best = frame_symbols[start];
    int best_count = 0;
    for (std::size_t i = start; i < start + w; ++i) {
      int c = 0;
      for (std::size_t j = start; j < start + w; ++j) c += frame_symbols[j] == frame_symbols[i];
      if (c > best_count) {
        best = frame_symbols[i];
        best_count = c;
      }
    }
    out.push_back(best);
  }
  return out;
}

namespace {

std::uint64_t split_seed(std::uint64_t seed, Split split) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(split) + 1u, 0x5eedu};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

int split_size(const SynthConfig& cfg, Split split) {
  switch (split) {
    case Split::pretrain: return cfg.pretrain_size;
    case Split::train: return cfg.train_size;
    case Split::test: return cfg.test_size;
  }
  return 0;
}

}  // namespace

Dataset generate_split(const SynthConfig& cfg, std::uint64_t seed, Split split, DType dtype) {
  const SynthWorld world(cfg, seed);
  std::mt19937_64 rng(split_seed(seed, split));
  Dataset out;
  const int n = split_size(cfg, split);
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(world.sample(rng, dtype));
  return out;
}

Corpus generate_corpus(const SynthConfig& cfg, std::uint64_t seed, DType dtype) {
  return Corpus{generate_split(cfg, seed, Split::pretrain, dtype),
                generate_split(cfg, seed, Split::train, dtype),
                generate_split(cfg, seed, Split::test, dtype)};
}

}  // namespace hfl
