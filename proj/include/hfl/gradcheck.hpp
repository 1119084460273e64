#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "hfl/parameter.hpp"

namespace hfl {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::int64_t worst_index = -1;
  std::size_t coordinates_checked = 0;
};

/// Compares backward() against central differences with step
/// eps * (1 + |w|) on up to `max_coords` sampled coordinates per parameter.
/// Relative error is |a - n| / max(1e-4, |a| + |n|). Parameters must be
/// float64 and trainable; `loss_fn` must be deterministic.
GradCheckReport finite_difference_check(const std::function<Tensor()>& loss_fn,
                                        std::span<Parameter* const> params, double eps = 1e-6,
                                        std::size_t max_coords = 64, std::uint64_t seed = 0);

}  // namespace hfl
