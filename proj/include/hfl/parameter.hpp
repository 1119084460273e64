#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "hfl/tensor.hpp"

namespace hfl {

/// A named tensor with a trainable flag. Frozen parameters enter the graph
/// as constants and never receive gradient buffers.
class Parameter {
 public:
  Parameter(std::string name, Tensor value, bool trainable = true);

  const std::string& name() const { return name_; }
  const Tensor& value() const { return value_; }
  Tensor& value() { return value_; }
  bool trainable() const { return trainable_; }
  void set_trainable(bool flag) { trainable_ = flag; }
  std::int64_t numel() const { return value_.numel(); }

  /// Graph leaf sharing this parameter's storage.
  Tensor var() const;

 private:
  std::string name_;
  Tensor value_;
  bool trainable_;
};

/// Insertion-ordered parameter collection with stable element addresses.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  Parameter& add(std::string name, Tensor value, bool trainable = true);
  Parameter& at(std::string_view name);
  const Parameter& at(std::string_view name) const;
  Parameter* find(std::string_view name);
  const Parameter* find(std::string_view name) const;
  bool contains(std::string_view name) const { return find(name) != nullptr; }

  std::size_t size() const { return params_.size(); }
  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::vector<Parameter*> trainable();
  std::vector<Parameter*> match(std::string_view pattern);

  std::int64_t count_elements(bool trainable_only) const;

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Glob over '/'-separated names: '*' and '?' within a segment, '**' for
/// any number of whole segments. Throws ConfigError on a malformed pattern.
bool glob_match(std::string_view pattern, std::string_view name);

/// Sets `trainable = flag` on every parameter matching `pattern`. Returns
/// the number matched; zero is a warning-level outcome left to the caller.
std::size_t set_trainable(ParameterStore& store, std::string_view pattern, bool flag);

// Building blocks shared by the encoder, adapters and heads.

struct Linear {
  Parameter* weight = nullptr;  // (in, out)
  Parameter* bias = nullptr;    // (out)

  Tensor operator()(const Tensor& x) const;
  std::int64_t in_dim() const { return weight->value().dim(0); }
  std::int64_t out_dim() const { return weight->value().dim(1); }
};

struct Norm {
  Parameter* scale = nullptr;
  Parameter* bias = nullptr;

  Tensor operator()(const Tensor& x) const;
};

using Rng = std::mt19937_64;

/// Weights ~ N(0, init_gain^2 / in), bias zero.
Linear make_linear(ParameterStore& store, const std::string& prefix, std::int64_t in,
                   std::int64_t out, Rng& rng, DType dtype, double init_gain = 1.0);
Norm make_norm(ParameterStore& store, const std::string& prefix, std::int64_t dim, DType dtype);
Tensor random_normal(Shape shape, double stddev, Rng& rng, DType dtype = DType::f32);

}  // namespace hfl
