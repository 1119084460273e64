#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "hfl/encoder.hpp"
#include "hfl/model.hpp"

namespace hfl {

/// Simplified masked-prediction pretraining: stacked windows of input
/// frames are quantized by a frozen random projection and codebook, spans
/// of input frames are replaced by a learned mask embedding, and a linear
/// head on the top layer predicts the codes of masked positions.
struct PretrainConfig {
  int steps = 2000;
  int batch_size = 16;
  int warmup_steps = 200;
  double lr = 1e-3;
  int num_codes = 64;
  int code_dim = 16;
  double mask_prob = 0.15;
  int mask_span = 4;
  int log_every = 50;
  std::uint64_t seed = 1;

  void validate() const;
  bool operator==(const PretrainConfig&) const = default;
};

/// Frozen random-projection quantizer over windows of `window` frames.
class RandomProjectionQuantizer {
 public:
  RandomProjectionQuantizer(int input_dim, int window, int code_dim, int num_codes, std::uint64_t seed,
                            const Dataset& normalization_data);
  /// One code per complete window.
  std::vector<std::int32_t> codes(const Tensor& frames) const;
  int num_codes() const { return num_codes_; }

 private:
  int input_dim_, window_, code_dim_, num_codes_;
  std::vector<double> mean_, inv_std_;
  std::vector<double> projection_;  // (input_dim * window, code_dim)
  std::vector<double> codebook_;    // (num_codes, code_dim), unit rows
};

struct PretrainResult {
  std::vector<std::pair<int, double>> loss_history;  // (step, mean loss since last row)
  double initial_loss = 0;  // mean over the first 50 steps
  double final_loss = 0;    // mean over the last 50 steps
  bool gate_passed = false; // final <= 0.7 * initial
};

/// Trains every encoder parameter plus the mask embedding and code head.
/// Throws std::runtime_error naming the step on a non-finite loss.
PretrainResult pretrain_masked_prediction(Encoder& encoder, const Dataset& data, const PretrainConfig& cfg,
                                          const std::function<void(int, double)>& on_log = {});

/// Saves the "encoder/**" parameters in FFCK format.
void save_encoder(const std::filesystem::path& path, const Encoder& encoder);

}  // namespace hfl
