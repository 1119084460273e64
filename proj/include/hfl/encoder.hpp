#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hfl/adapter.hpp"
#include "hfl/parameter.hpp"
#include "hfl/tensor.hpp"

namespace hfl {

struct EncoderConfig {
  int num_layers = 6;
  int model_dim = 64;
  int num_heads = 4;
  int ffn_expansion = 4;
  int conv_kernel = 8;
  int frontend_subsampling = 4;
  int input_dim = 16;

  /// 6 x 64 conformer used for every training run.
  static EncoderConfig desk();
  /// 24 x 1024 conformer, used for analytic counting only. Heads, kernel
  /// and FFN expansion are conventional guesses.
  static EncoderConfig paper();

  /// Throws ConfigError naming the offending field.
  void validate() const;

  bool operator==(const EncoderConfig&) const = default;
};

/// Strictly increasing, non-empty list of 0-based conformer layer indices.
class TapSet {
 public:
  TapSet() = default;
  explicit TapSet(std::vector<int> indices);

  /// `count` taps spread evenly over a `num_layers` stack, always including
  /// the top layer (12 over 24 gives 1,3,...,23).
  static TapSet evenly_spaced(int count, int num_layers);
  static TapSet all(int num_layers);

  const std::vector<int>& indices() const { return indices_; }
  std::size_t size() const { return indices_.size(); }
  int max() const { return indices_.back(); }
  int min() const { return indices_.front(); }
  bool contains(int layer) const;
  void validate_for(int num_layers) const;
  std::string str() const;

  bool operator==(const TapSet&) const = default;

 private:
  std::vector<int> indices_;
};

/// Layer index -> (time, model_dim) output of that layer.
class FeatureTaps {
 public:
  void insert(int layer, Tensor t) { taps_[layer] = std::move(t); }
  const Tensor& at(int layer) const;
  bool contains(int layer) const { return taps_.contains(layer); }
  std::size_t size() const { return taps_.size(); }
  std::vector<int> indices() const;
  const std::map<int, Tensor>& items() const { return taps_; }

 private:
  std::map<int, Tensor> taps_;
};

/// Encoder state after the frontend and the first `depth` blocks.
struct EncoderPrefix {
  int depth = 0;
  Tensor stream;
  FeatureTaps taps;
};

class Encoder {
 public:
  /// Parameters are named "encoder/frontend/..." and "encoder/layer_i/..."
  /// and start trainable.
  static Encoder build(const EncoderConfig& config, std::uint64_t seed, DType dtype = DType::f32);

  Encoder(Encoder&&) = default;
  Encoder& operator=(Encoder&&) = default;

  const EncoderConfig& config() const { return config_; }
  DType dtype() const { return dtype_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  /// Two stride-2 convolutions with swish, then a linear projection and
  /// sinusoidal positions. Output length is floor(time / 4).
  Tensor frontend(const Tensor& frames) const;
  /// One conformer block, followed by its adapter when one is attached.
  Tensor run_block(int layer, const Tensor& x) const;

  /// Runs the frontend and blocks up to tap_set.max() only.
  FeatureTaps encode_with_taps(const Tensor& frames, const TapSet& tap_set) const;
  EncoderPrefix run_prefix(const Tensor& frames, int depth, const TapSet& tap_set) const;
  FeatureTaps resume(const EncoderPrefix& prefix, const TapSet& tap_set) const;

  void attach_adapter(int layer, int bottleneck, Rng& rng);
  bool has_adapter(int layer) const;
  std::vector<int> adapter_layers() const;

  /// Smallest block index holding a trainable parameter (adapters count
  /// toward the block they follow).
  std::optional<int> lowest_trainable_depth() const;
  bool frontend_trainable() const;

  /// Deep copy: same structure, values and trainable flags.
  Encoder clone() const;

 private:
  struct FeedForward {
    Norm norm;
    Linear fc1;
    Linear fc2;
  };
  struct Attention {
    Norm norm;
    Linear query, key, value, out;
  };
  struct ConvModule {
    Norm norm;
    Linear pointwise1;
    Parameter* depthwise_weight = nullptr;  // (kernel, dim)
    Parameter* depthwise_bias = nullptr;
    Norm inner_norm;
    Linear pointwise2;
  };
  struct Block {
    FeedForward ffn1;
    Attention attn;
    ConvModule conv;
    FeedForward ffn2;
    Norm final_norm;
    std::optional<AdapterModule> adapter;
  };
  struct Frontend {
    Parameter* conv1_weight = nullptr;
    Parameter* conv1_bias = nullptr;
    Parameter* conv2_weight = nullptr;
    Parameter* conv2_bias = nullptr;
    Linear proj;
  };

  Encoder() = default;

  Tensor feed_forward(const FeedForward& f, const Tensor& x) const;
  Tensor attention(const Attention& a, const Tensor& x) const;
  Tensor conv_module(const ConvModule& c, const Tensor& x) const;

  EncoderConfig config_;
  DType dtype_ = DType::f32;
  ParameterStore params_;
  Frontend frontend_;
  std::vector<Block> blocks_;
};

std::string layer_prefix(int layer);

/// (time, dim) sinusoidal position table.
Tensor sinusoidal_positions(std::int64_t time, std::int64_t dim, DType dtype);

}  // namespace hfl
