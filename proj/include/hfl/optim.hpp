#pragma once

#include <map>
#include <string>
#include <vector>

#include "hfl/autodiff.hpp"
#include "hfl/parameter.hpp"

namespace hfl {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a fixed parameter list, each with its own base learning rate.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, std::vector<double> base_lr, AdamConfig cfg = {});

  /// One update with learning rate base_lr * lr_scale. Parameters without
  /// a gradient entry are left untouched; frozen parameters are rejected.
  void step(const GradientMap& grads, double lr_scale);
  long steps_taken() const { return t_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<double> base_lr_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::vector<long> count_;
  long t_ = 0;
};

/// Linear warmup to 1 over `warmup` steps, then constant.
double warmup_scale(long step, long warmup);

using ShadowWeights = std::map<std::string, Tensor>;

/// Copies of the trainable parameters' current values.
ShadowWeights ema_snapshot(const std::vector<Parameter*>& params);

/// shadow = decay * shadow + (1 - decay) * current over trainable
/// parameters. Throws std::invalid_argument if the name sets differ.
void ema_update(ShadowWeights& shadow, const std::vector<Parameter*>& current, double decay);

/// Swaps shadow values into the parameters (and the previous values into
/// the shadow). Calling it twice restores the original state.
void swap_in(ShadowWeights& shadow, const std::vector<Parameter*>& params);

}  // namespace hfl
