#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>

#include "hfl/ops.hpp"

namespace hfl {

struct ScopeStats {
  std::uint64_t forward_ops = 0;
  std::uint64_t forward_flops = 0;
  std::uint64_t backward_ops = 0;
  std::uint64_t backward_flops = 0;
  // Elements of op outputs kept alive for the backward pass.
  std::uint64_t retained_elements = 0;
};

/// Forward/backward op and FLOP tallies, by op kind and by attribution scope.
class OpCounter {
 public:
  void record_forward(OpKind kind, std::string_view scope, std::uint64_t flops,
                      bool recorded_node, std::uint64_t output_elements);
  void record_backward(OpKind kind, std::string_view scope,
                       std::uint64_t flops);

  std::uint64_t forward_ops() const;
  std::uint64_t backward_ops() const;
  std::uint64_t forward_ops(OpKind kind) const;
  std::uint64_t backward_ops(OpKind kind) const;
  std::uint64_t forward_flops() const { return total_.forward_flops; }
  std::uint64_t backward_flops() const { return total_.backward_flops; }
  std::uint64_t retained_elements() const { return total_.retained_elements; }

  /// Totals over the scope `prefix` and all scopes nested below it.
  ScopeStats under(std::string_view prefix) const;
  const std::map<std::string, ScopeStats, std::less<>>& scopes() const {
    return by_scope_;
  }

  void reset();

 private:
  std::array<std::uint64_t, kNumOpKinds> fwd_by_kind_{};
  std::array<std::uint64_t, kNumOpKinds> bwd_by_kind_{};
  ScopeStats total_;
  std::map<std::string, ScopeStats, std::less<>> by_scope_;
};

/// Routes op accounting on this thread to `counter` while alive.
class CounterGuard {
 public:
  explicit CounterGuard(OpCounter& counter);
  ~CounterGuard();
  CounterGuard(const CounterGuard&) = delete;
  CounterGuard& operator=(const CounterGuard&) = delete;

 private:
  OpCounter* previous_;
};

OpCounter* active_counter();

/// Pushes an attribution scope; nested scopes join with '/'.
class ScopeGuard {
 public:
  explicit ScopeGuard(std::string_view name);
  ~ScopeGuard();
  ScopeGuard(const ScopeGuard&) = delete;
  ScopeGuard& operator=(const ScopeGuard&) = delete;
};

const std::string& current_scope();

/// True when `scope` equals `prefix` or is nested below it.
bool scope_within(std::string_view scope, std::string_view prefix);

}  // namespace hfl
