#include "hfl/op_counter.hpp"

#include <numeric>
#include <vector>

namespace hfl {

namespace {
thread_local OpCounter* t_counter = nullptr;
thread_local std::vector<std::string> t_scopes;
const std::string kRootScope;
}  // namespace

void OpCounter::record_forward(OpKind kind, std::string_view scope, std::uint64_t flops,
                               bool recorded_node, std::uint64_t output_elements) {
  ++fwd_by_kind_[static_cast<std::size_t>(kind)];
  auto it = by_scope_.find(scope);
  if (it == by_scope_.end()) it = by_scope_.emplace(std::string(scope), ScopeStats{}).first;
  for (ScopeStats* s : {&it->second, &total_}) {
    ++s->forward_ops;
    s->forward_flops += flops;
    if (recorded_node) s->retained_elements += output_elements;
  }
}

void OpCounter::record_backward(OpKind kind, std::string_view scope, std::uint64_t flops) {
  ++bwd_by_kind_[static_cast<std::size_t>(kind)];
  auto it = by_scope_.find(scope);
  if (it == by_scope_.end()) it = by_scope_.emplace(std::string(scope), ScopeStats{}).first;
  for (ScopeStats* s : {&it->second, &total_}) {
    ++s->backward_ops;
    s->backward_flops += flops;
  }
}

std::uint64_t OpCounter::forward_ops() const { return total_.forward_ops; }
std::uint64_t OpCounter::backward_ops() const { return total_.backward_ops; }
std::uint64_t OpCounter::forward_ops(OpKind kind) const {
  return fwd_by_kind_[static_cast<std::size_t>(kind)];
}
std::uint64_t OpCounter::backward_ops(OpKind kind) const {
  return bwd_by_kind_[static_cast<std::size_t>(kind)];
}

ScopeStats OpCounter::under(std::string_view prefix) const {
  ScopeStats out;
  for (const auto& [scope, s] : by_scope_) {
    if (!scope_within(scope, prefix)) continue;
    out.forward_ops += s.forward_ops;
    out.forward_flops += s.forward_flops;
    out.backward_ops += s.backward_ops;
    out.backward_flops += s.backward_flops;
    out.retained_elements += s.retained_elements;
  }
  return out;
}

void OpCounter::reset() { *this = OpCounter{}; }

CounterGuard::CounterGuard(OpCounter& counter) : previous_(t_counter) { t_counter = &counter; }
CounterGuard::~CounterGuard() { t_counter = previous_; }

OpCounter* active_counter() { return t_counter; }

ScopeGuard::ScopeGuard(std::string_view name) {
  if (t_scopes.empty() || t_scopes.back().empty()) {
    t_scopes.emplace_back(name);
  } else {
    t_scopes.push_back(t_scopes.back() + "/" + std::string(name));
  }
}

ScopeGuard::~ScopeGuard() { t_scopes.pop_back(); }

const std::string& current_scope() { return t_scopes.empty() ? kRootScope : t_scopes.back(); }

bool scope_within(std::string_view scope, std::string_view prefix) {
  if (prefix.empty()) return true;
  if (scope.size() < prefix.size() || scope.substr(0, prefix.size()) != prefix) return false;
  return scope.size() == prefix.size() || scope[prefix.size()] == '/';
}

}  // namespace hfl
