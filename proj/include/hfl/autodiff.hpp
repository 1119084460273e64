#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "hfl/ops.hpp"
#include "hfl/tensor.hpp"

namespace hfl {

/// One recorded op in the reverse-mode graph.
struct Node {
  std::uint64_t index = 0;  // creation order; backward visits descending
  OpKind kind{};
  std::string scope;
  std::vector<Tensor> inputs;
  std::vector<bool> needs_grad;
  std::shared_ptr<Buffer> output;
  Shape output_shape;
  OpAttrs attrs;
  bool freed = false;
};

std::uint64_t next_node_index();

using GradientMap = std::map<std::string, Tensor>;

/// Reverse pass from a scalar loss. Only nodes that were recorded (some
/// input required a gradient) are visited, so frozen-only subgraphs cost
/// nothing. The graph is released afterwards unless `retain_graph`.
GradientMap backward(const Tensor& loss, bool retain_graph = false);

/// Disables node recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

}  // namespace hfl
