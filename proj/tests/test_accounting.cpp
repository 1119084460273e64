#include <doctest.h>

#include <cmath>

#include "hfl/accounting.hpp"
#include "hfl/autodiff.hpp"
#include "hfl/config.hpp"
#include "hfl/experiments.hpp"
#include "hfl/op_counter.hpp"
#include "hfl/trainer.hpp"

using namespace hfl;

namespace {

Dataset random_batch(int n, std::int64_t time, std::uint64_t seed) {
  Rng rng(seed);
  Dataset out;
  for (int i = 0; i < n; ++i) {
    Example ex;
    ex.frames = random_normal({time, 16}, 1.0, rng);
    for (std::int64_t j = 0; j < time / 4; ++j) ex.labels.push_back(static_cast<std::int32_t>((i + j) % 12));
    out.push_back(std::move(ex));
  }
  return out;
}

struct LiveStep {
  OpCounter ops;
  std::int64_t trainable = 0;
};

LiveStep live_step(const ModelSpec& spec, const Dataset& batch) {
  DownstreamModel m = DownstreamModel::build(spec, 1);
  LiveStep out;
  for (Parameter* p : m.trainable_params()) out.trainable += p->numel();
  std::vector<const Example*> ptrs;
  for (const auto& ex : batch) ptrs.push_back(&ex);
  CounterGuard g(out.ops);
  backward(m.batch_loss(ptrs));
  return out;
}

double rel_diff(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

std::vector<std::pair<std::string, ModelSpec>> desk_rows() {
  return comparison_specs(load_config(std::nullopt, Preset::desk));
}

}  // namespace

TEST_CASE("paper-scale trainable counts") {
  const auto paper = EncoderConfig::paper();
  const auto lin = count_trainable_params(paper, LinearFusionSpec{TapSet::evenly_spaced(12, 24), 1, 640}, {});
  CHECK(lin == TrainableCount{0, 7'864'960});
  const auto a512 = count_trainable_params(paper, std::nullopt, adapters(TapSet::all(24), 512));
  CHECK(a512.encoder == 24 * (2 * 1024 + (1024 * 512 + 512) + (512 * 1024 + 1024)));
  CHECK(std::abs(a512.encoder - 25.9e6) / 25.9e6 < 0.05);
  CHECK(count_trainable_params(paper, std::nullopt, std::nullopt) == TrainableCount{0, 0});
}

TEST_CASE("analytic cost matches a live step for the comparison rows") {
  const int batch = 2, seq = 96;
  const Dataset data = random_batch(batch, seq, 3);
  for (const auto& [id, spec] : desk_rows()) {
    CAPTURE(id);
    const StepCost cost = trace_step_cost(spec, batch, seq);
    const LiveStep live = live_step(spec, data);
    CHECK(cost.trainable_params == live.trainable);
    CHECK(rel_diff(static_cast<double>(cost.ops.backward_flops()), static_cast<double>(live.ops.backward_flops())) <
          0.01);
    CHECK(rel_diff(static_cast<double>(cost.ops.forward_flops()), static_cast<double>(live.ops.forward_flops())) <
          0.01);
    CHECK(cost.ops.retained_elements() == live.ops.retained_elements());
    CHECK(cost.ops.backward_ops() == live.ops.backward_ops());
    CHECK(cost.ops.backward_flops() <= 2 * cost.ops.forward_flops());
  }
}

TEST_CASE("frozen encoder retains nothing inside the encoder") {
  ModelSpec spec;
  spec.fusion = LinearFusionSpec{TapSet::all(6), 1, 64};
  const StepCost cost = trace_step_cost(spec, 2, 96);
  CHECK(cost.ops.under("encoder").retained_elements == 0);
  CHECK(cost.ops.under("encoder").backward_flops == 0);
  CHECK(cost.ops.under("head").retained_elements > 0);
}

TEST_CASE("batch 0 has no activation bytes") {
  for (const auto& [id, spec] : desk_rows()) {
    CAPTURE(id);
    const StepCost cost = trace_step_cost(spec, 0, 96);
    CHECK(cost.activation_bytes == 0);
    CHECK(estimate_activation_memory(spec, 0, 96) == cost.state_bytes);
  }
  CHECK_THROWS_AS(trace_step_cost(ModelSpec{}, -1, 96), ConfigError);
  CHECK_THROWS_AS(trace_step_cost(ModelSpec{}, 1, 3), ConfigError);
}

TEST_CASE("adding adapter layers never lowers cost") {
  std::int64_t prev_params = -1;
  std::uint64_t prev_act = 0, prev_bwd = 0;
  for (int lowest = 5; lowest >= 0; --lowest) {
    std::vector<int> layers;
    for (int l = lowest; l < 6; ++l) layers.push_back(l);
    ModelSpec spec;
    spec.peft = adapters(TapSet(layers), 8);
    const StepCost c = trace_step_cost(spec, 4, 96);
    CHECK(c.trainable_params > prev_params);
    CHECK(c.activation_bytes >= prev_act);
    CHECK(c.ops.backward_flops() >= prev_bwd);
    prev_params = c.trainable_params;
    prev_act = c.activation_bytes;
    prev_bwd = c.ops.backward_flops();
  }
}

TEST_CASE("adapters cost more than a fusion head") {
  ModelSpec head;
  head.fusion = default_hff(TapSet::all(6), 64);
  ModelSpec adapt;
  adapt.peft = adapters(TapSet::all(6), 8);
  CHECK(estimate_activation_memory(adapt, 16, 96) > estimate_activation_memory(head, 16, 96));
  CHECK(count_backward_flops(adapt, 16, 96) > count_backward_flops(head, 16, 96));
}

TEST_CASE("backward attribution per strategy") {
  SUBCASE("fths covers only the top block") {
    ModelSpec spec;
    spec.peft = fths();
    const StepCost c = trace_step_cost(spec, 1, 96);
    for (int l = 0; l < 5; ++l) CHECK(c.ops.under(layer_prefix(l)).backward_ops == 0);
    CHECK(c.ops.under(layer_prefix(5)).backward_ops > 0);
    CHECK(c.ops.under("encoder/frontend").backward_ops == 0);
  }
  SUBCASE("HFF-b covers no encoder block") {
    ModelSpec spec;
    spec.fusion = default_hff(TapSet::all(6), 64);
    CHECK(trace_step_cost(spec, 1, 96).ops.under("encoder").backward_ops == 0);
  }
  SUBCASE("full fine-tuning is the largest") {
    ModelSpec full;
    full.peft = full_finetune();
    const StepCost fc = trace_step_cost(full, 4, 96);
    for (int l = 0; l < 6; ++l) CHECK(fc.ops.under(layer_prefix(l)).backward_ops > 0);
    CHECK(fc.ops.under("encoder/frontend").backward_ops > 0);
    for (const auto& [id, spec] : desk_rows()) {
      if (id == "full") continue;
      CAPTURE(id);
      const StepCost c = trace_step_cost(spec, 4, 96);
      CHECK(c.ops.backward_flops() < fc.ops.backward_flops());
      CHECK(c.total_bytes() < fc.total_bytes());
    }
  }
}

TEST_CASE("resource report fields") {
  ModelSpec spec;
  spec.peft = adapters(TapSet({3, 4, 5}), 8);
  const ResourceReport r = resource_report(spec, 4, 96);
  CHECK(r.trainable_encoder_params == 3 * adapter_param_count(64, 8));
  CHECK(r.frozen_params == encoder_param_count(spec.encoder));
  CHECK(r.backward_flops <= 2 * r.forward_flops);
  CHECK(r.config_fingerprint.size() == 16);
  CHECK(r.config_fingerprint == resource_report(spec, 4, 96).config_fingerprint);
  CHECK(r.config_fingerprint != resource_report(spec, 8, 96).config_fingerprint);
  const std::string text = format_report(r);
  CHECK(text.find("multiply-add as 2") != std::string::npos);
  CHECK(text.find("throughput_examples_per_sec: n/a") != std::string::npos);
}

TEST_CASE("throughput is stable across two measurements") {
  ModelSpec spec;
  spec.fusion = default_hff(TapSet::all(6), 64);
  const Dataset data = random_batch(32, 96, 5);
  TrainConfig cfg;
  cfg.batch_size = 8;
  DownstreamModel m = DownstreamModel::build(spec, 1);
  CHECK_THROWS_AS(measure_throughput(m, data, cfg, 1, 9), std::invalid_argument);
  const double a = measure_throughput(m, data, cfg, 2, 10);
  const double b = measure_throughput(m, data, cfg, 2, 10);
  CHECK(a > 0);
  CHECK(std::abs(a - b) / std::max(a, b) < 0.2);
}
