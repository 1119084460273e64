#pragma once

#include <optional>
#include <vector>

#include "hfl/autodiff.hpp"

namespace hfl::detail {

/// Input gradients for one recorded node; entries are empty where the input
/// needs no gradient.
std::vector<std::optional<Buffer>> backward_primitive(const Node& node,
                                                      const Buffer& grad_out);

}  // namespace hfl::detail
