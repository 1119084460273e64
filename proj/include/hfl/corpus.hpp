#pragma once

#include <cstdint>
#include <vector>

#include "hfl/model.hpp"

namespace hfl {

/// Synthetic sequence-labeling task. Each utterance is a Markov chain of
/// symbols; each symbol emits a run of frames x = A_s u + b_s + noise, where
/// u is a smooth latent process shared across the utterance.
struct SynthConfig {
  int vocab = 12;
  int min_frames_per_symbol = 4;
  int max_frames_per_symbol = 8;
  int input_dim = 16;
  int emission_rank = 4;
  double noise_std = 0.3;
  int min_symbols = 8;
  int max_symbols = 24;
  int pretrain_size = 2000;
  int train_size = 1000;
  int test_size = 200;
  double self_transition = 0.1;
  // Probability mass on each symbol's two preferred successors.
  double successor_bias = 0.6;
  // Latent AR(1) coefficient and stationary std; per-dim std of b_s.
  double latent_smoothness = 0.9;
  double latent_std = 0.5;
  double offset_scale = 1.0;
  // Symbols (2i, 2i+1) for i < confusable_pairs share an emission map and
  // differ only on input channel input_dim - confusable_pairs + i, where they
  // sit at -pair_distance and +pair_distance.
  int confusable_pairs = 6;
  double pair_distance = 0.15;
  int subsampling = 4;

  void validate() const;
  bool operator==(const SynthConfig&) const = default;
};

enum class Split { pretrain, train, test };

/// Emission and transition parameters drawn once per world seed.
class SynthWorld {
 public:
  SynthWorld(const SynthConfig& cfg, std::uint64_t seed);

  const SynthConfig& config() const { return cfg_; }
  Example sample(std::mt19937_64& rng, DType dtype) const;
  /// Row-major (vocab, vocab) transition matrix.
  const std::vector<double>& transitions() const { return transition_; }

 private:
  SynthConfig cfg_;
  std::vector<std::vector<double>> emission_;  // per symbol, (input_dim, rank) row-major
  std::vector<std::vector<double>> offset_;    // per symbol, (input_dim)
  std::vector<double> transition_;
};

/// Majority symbol per window of `subsampling` frames; ties go to the
/// earliest frame's symbol among the tied ones. Trailing partial windows
/// are dropped.
std::vector<std::int32_t> window_labels(const std::vector<std::int32_t>& frame_symbols, int subsampling);

/// The split's utterances. Splits use disjoint derived seeds over one world.
Dataset generate_split(const SynthConfig& cfg, std::uint64_t seed, Split split,
                       DType dtype = DType::f32);

struct Corpus {
  Dataset pretrain;
  Dataset train;
  Dataset test;
};

Corpus generate_corpus(const SynthConfig& cfg, std::uint64_t seed, DType dtype = DType::f32);

}  // namespace hfl
