#include "hfl/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <fmt/format.h>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "hfl/op_counter.hpp"
#include "ops_internal.hpp"

namespace hfl {

namespace {

std::atomic<std::uint64_t> g_node_index{0};
thread_local bool t_grad_enabled = true;

void accumulate(Buffer& dst, Buffer&& src) {
  if (buffer_size(dst) == 0) {
    dst = std::move(src);
    return;
  }
  std::visit([&](auto& d) {
    using V = std::decay_t<decltype(d)>;
    const auto& s = std::get<V>(src);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  }, dst);
}

Buffer ones_like(DType dtype, std::size_t n) {
  if (dtype == DType::f32) return std::vector<float>(n, 1.0f);
  return std::vector<double>(n, 1.0);
}

}  // namespace

std::uint64_t next_node_index() { return g_node_index.fetch_add(1, std::memory_order_relaxed); }

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

GradientMap backward(const Tensor& loss, bool retain_graph) {
  if (!loss.defined()) throw std::invalid_argument("backward: undefined loss tensor");
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  GradientMap result;
  if (loss.is_leaf()) {
    if (loss.requires_grad() && !loss.leaf_name().empty()) {
      result.emplace(loss.leaf_name(), Tensor::full(loss.shape(), 1.0, loss.dtype()));
    }
    return result;
  }
  Node* root = loss.node().get();
  if (root->freed) {
    throw std::logic_error("backward: graph already freed by a previous backward; "
                           "pass retain_graph=true to reuse it");
  }

  std::vector<Node*> order;
  // Owning handles keep every node alive while inputs are released below.
  std::vector<std::shared_ptr<Node>> owned;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root};
  seen.insert(root);
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (n->freed) throw std::logic_error("backward: graph contains freed nodes");
    order.push_back(n);
    for (const auto& in : n->inputs) {
      const auto& child = in.node();
      if (child && seen.insert(child.get()).second) {
        owned.push_back(child);
        stack.push_back(child.get());
      }
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->index > b->index; });

  std::unordered_map<Node*, Buffer> grads;
  grads.emplace(root, ones_like(loss.dtype(), 1));
  struct LeafGrad {
    Shape shape;
    Buffer grad;
  };
  std::map<std::string, LeafGrad> leaf_grads;
  OpCounter* counter = active_counter();
  std::vector<Shape> in_shapes;

  for (Node* node : order) {
    auto it = grads.find(node);
    if (it == grads.end()) continue;
    Buffer g = std::move(it->second);
    grads.erase(it);
    auto in_grads = detail::backward_primitive(*node, g);

    if (counter) {
      in_shapes.clear();
      for (const auto& in : node->inputs) in_shapes.push_back(in.shape());
      std::uint64_t flops = 0;
      for (std::size_t i = 0; i < node->inputs.size(); ++i)
        if (node->needs_grad[i]) flops += backward_flops(node->kind, i, in_shapes, node->output_shape);
      counter->record_backward(node->kind, node->scope, flops);
    }

    for (std::size_t i = 0; i < in_grads.size(); ++i) {
      if (!in_grads[i]) continue;
      const Tensor& in = node->inputs[i];
      if (Node* child = in.node().get()) {
        accumulate(grads[child], std::move(*in_grads[i]));
      } else if (!in.leaf_name().empty()) {
        auto [lit, inserted] = leaf_grads.try_emplace(in.leaf_name());
        if (inserted) lit->second.shape = in.shape();
        accumulate(lit->second.grad, std::move(*in_grads[i]));
      }
    }
  }

  if (!retain_graph) {
    for (Node* n : order) {
      n->inputs.clear();
      n->output.reset();
      n->freed = true;
    }
  }

  for (auto& [name, lg] : leaf_grads) {
    result.emplace(name, Tensor::from_buffer(lg.shape, std::move(lg.grad)));
  }
  return result;
}

}  // namespace hfl
