#pragma once

#include <cstdint>
#include <string>

#include "hfl/parameter.hpp"

namespace hfl {

/// Residual bottleneck adapter: x + up(relu(down(norm(x)))). The
/// up-projection starts at zero so a fresh adapter is an exact identity.
struct AdapterModule {
  Norm pre_norm;
  Linear down;
  Linear up;

  std::int64_t model_dim() const { return down.in_dim(); }
  std::int64_t bottleneck() const { return down.out_dim(); }
};

AdapterModule make_adapter(ParameterStore& store, const std::string& prefix,
                           std::int64_t model_dim, std::int64_t bottleneck, Rng& rng,
                           DType dtype);

Tensor adapter_forward(const AdapterModule& adapter, const Tensor& x);

/// Closed-form adapter size: pre-norm (2d) + down (d*b + b) + up (b*d + d).
constexpr std::int64_t adapter_param_count(std::int64_t model_dim, std::int64_t bottleneck) {
  return 2 * model_dim + (model_dim * bottleneck + bottleneck) + (bottleneck * model_dim + model_dim);
}

}  // namespace hfl
