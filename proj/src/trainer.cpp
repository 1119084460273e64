#include "hfl/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fmt/format.h>
#include <random>

#include "hfl/autodiff.hpp"
#include "hfl/ops.hpp"

namespace hfl {

void TrainConfig::validate() const {
  if (steps < 0) throw ConfigError("train.steps must be non-negative");
  if (batch_size <= 0) throw ConfigError("train.batch_size must be positive");
  if (warmup_steps < 0) throw ConfigError("train.warmup_steps must be non-negative");
  if (!(lr_head > 0) || !(lr_encoder > 0)) throw ConfigError("train learning rates must be positive");
  if (!(ema_decay >= 0 && ema_decay < 1)) throw ConfigError("train.ema_decay must be in [0, 1)");
  if (log_every <= 0) throw ConfigError("train.log_every must be positive");
  if (eval_subset <= 0) throw ConfigError("train.eval_subset must be positive");
}

double base_learning_rate(const std::string& name, const TrainConfig& cfg) {
  if (name.starts_with("encoder/") && name.find("/adapter/") == std::string::npos) return cfg.lr_encoder;
  return cfg.lr_head;
}

namespace {

using Clock = std::chrono::steady_clock;

std::vector<std::int32_t> argmax_rows(const Tensor& logits) {
  const auto v = logits.to_vector();
  const auto rows = logits.dim(0), cols = logits.dim(1);
  std::vector<std::int32_t> out(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const auto* row = v.data() + r * cols;
    out[static_cast<std::size_t>(r)] = static_cast<std::int32_t>(std::max_element(row, row + cols) - row);
  }
  return out;
}

double fer_impl(const DownstreamModel& model, const Dataset& data, std::size_t limit,
                const std::vector<EncoderPrefix>* prefixes) {
  if (data.empty()) throw std::invalid_argument("evaluate_fer: empty dataset");
  NoGradGuard no_grad;
  const std::size_t n = std::min(limit, data.size());
  const Dataset subset(data.begin(), data.begin() + static_cast<std::ptrdiff_t>(n));
  std::vector<std::vector<std::int32_t>> predictions;
  predictions.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor logits = prefixes ? model.logits_from_taps(model.encoder().resume((*prefixes)[i], model.taps()))
                                   : model.logits(data[i].frames);
    predictions.push_back(argmax_rows(logits));
  }
  return frame_error_rate(predictions, subset);
}

struct Step {
  DownstreamModel& model;
  Adam adam;
  std::vector<Parameter*> params;

  static Step make(DownstreamModel& model, const TrainConfig& cfg) {
    auto params = model.trainable_params();
    if (params.empty()) throw std::runtime_error("nothing to train: every parameter is frozen");
    std::vector<double> lr;
    for (const Parameter* p : params) lr.push_back(base_learning_rate(p->name(), cfg));
    return Step{model, Adam(params, std::move(lr), cfg.adam), params};
  }

  double run(const std::vector<const Example*>& batch, const std::vector<const EncoderPrefix*>* prefixes,
             double lr_scale) {
    Tensor loss;
    if (prefixes) {
      loss = model.example_loss(*batch[0], *(*prefixes)[0]);
      for (std::size_t i = 1; i < batch.size(); ++i) {
        const Tensor l = model.example_loss(*batch[i], *(*prefixes)[i]);
        loss = add(loss, l);
      }
      loss = scale(loss, 1.0 / static_cast<double>(batch.size()));
    } else {
      loss = model.batch_loss(batch);
    }
    const double value = loss.item();
    if (!std::isfinite(value)) throw std::runtime_error("training loss is not finite");
    adam.step(backward(loss), lr_scale);
    return value;
  }
};

}  // namespace

double frame_error_rate(const std::vector<std::vector<std::int32_t>>& predictions, const Dataset& data) {
  if (data.empty()) throw std::invalid_argument("frame_error_rate: empty dataset");
  if (predictions.size() != data.size()) throw std::invalid_argument("frame_error_rate: one prediction per example");
  std::int64_t errors = 0, total = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& labels = data[i].labels;
    if (predictions[i].size() != labels.size())
      throw ShapeError(fmt::format("frame_error_rate: example {} has {} predictions for {} labels", i,
                                   predictions[i].size(), labels.size()));
    for (std::size_t j = 0; j < labels.size(); ++j) errors += predictions[i][j] != labels[j];
    total += static_cast<std::int64_t>(labels.size());
  }
  return total ? static_cast<double>(errors) / static_cast<double>(total) : 0.0;
}

double evaluate_fer(const DownstreamModel& model, const Dataset& data) {
  return fer_impl(model, data, data.size(), nullptr);
}

double evaluate_fer(const DownstreamModel& model, const Dataset& data,
                    const std::vector<EncoderPrefix>& prefixes) {
  if (prefixes.size() != data.size()) throw std::invalid_argument("evaluate_fer: one prefix per example");
  return fer_impl(model, data, data.size(), &prefixes);
}

TrainResult train_downstream(DownstreamModel& model, const Dataset& train, const Dataset& test,
                             const TrainConfig& cfg,
                             const std::function<void(const MetricsRow&)>& on_metrics) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("train_downstream: empty training set");
  if (test.empty()) throw std::invalid_argument("train_downstream: empty test set");
  Step step = Step::make(model, cfg);
  ShadowWeights shadow = ema_snapshot(step.params);

  const bool cache = cfg.cache_frozen_prefix && model.cacheable_depth().has_value();
  std::vector<EncoderPrefix> train_prefix, test_prefix;
  if (cache) {
    for (const auto& ex : train) train_prefix.push_back(model.frozen_prefix(ex.frames));
    for (const auto& ex : test) test_prefix.push_back(model.frozen_prefix(ex.frames));
  }
  const std::size_t eval_n = std::min(test.size(), static_cast<std::size_t>(cfg.eval_subset));
  auto eval_with_shadow = [&](std::size_t limit) {
    swap_in(shadow, step.params);
    const double fer = fer_impl(model, test, limit, cache ? &test_prefix : nullptr);
    swap_in(shadow, step.params);
    return fer;
  };

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
  TrainResult result;
  double loss_sum = 0;
  int loss_count = 0;
  double seconds = 0;
  std::vector<const Example*> batch(static_cast<std::size_t>(cfg.batch_size));
  std::vector<const EncoderPrefix*> prefixes(batch.size());
  for (int t = 0; t < cfg.steps; ++t) {
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const std::size_t i = pick(rng);
      batch[b] = &train[i];
      if (cache) prefixes[b] = &train_prefix[i];
    }
    const auto start = Clock::now();
    double loss = 0;
    try {
      loss = step.run(batch, cache ? &prefixes : nullptr, warmup_scale(t, cfg.warmup_steps));
    } catch (const std::runtime_error& e) {
      throw std::runtime_error(fmt::format("step {}: {}", t + 1, e.what()));
    }
    const double decay = std::min(cfg.ema_decay, (1.0 + t) / (10.0 + t));
    ema_update(shadow, step.params, decay);
    seconds += std::chrono::duration<double>(Clock::now() - start).count();
    loss_sum += loss;
    ++loss_count;
    if ((t + 1) % cfg.log_every == 0 || t + 1 == cfg.steps) {
      MetricsRow row;
      row.step = t + 1;
      row.loss = loss_sum / loss_count;
      row.fer = eval_with_shadow(eval_n);
      row.examples_per_sec = seconds > 0 ? loss_count * cfg.batch_size / seconds : 0.0;
      result.history.push_back(row);
      if (on_metrics) on_metrics(row);
      loss_sum = 0;
      loss_count = 0;
      seconds = 0;
    }
  }
  swap_in(shadow, step.params);
  result.final_fer = fer_impl(model, test, test.size(), cache ? &test_prefix : nullptr);
  return result;
}

double measure_throughput(DownstreamModel& model, const Dataset& data, const TrainConfig& cfg,
                          int warmup_steps, int timed_steps) {
  if (timed_steps < 10) throw std::invalid_argument("measure_throughput: timed_steps must be >= 10");
  if (data.empty()) throw std::invalid_argument("measure_throughput: empty dataset");
  Step step = Step::make(model, cfg);
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::vector<const Example*> batch(static_cast<std::size_t>(cfg.batch_size));
  std::vector<double> times;
  for (int t = 0; t < warmup_steps + timed_steps; ++t) {
    for (auto& b : batch) b = &data[pick(rng)];
    const auto start = Clock::now();
    step.run(batch, nullptr, 1.0);
    const double s = std::chrono::duration<double>(Clock::now() - start).count();
    if (t >= warmup_steps) times.push_back(s);
  }
  std::sort(times.begin(), times.end());
  const std::size_t n = times.size();
  const double median = n % 2 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
  return static_cast<double>(cfg.batch_size) / median;
}

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string s = "step,loss,fer,examples_per_sec\n";
  for (const auto& r : rows) s += fmt::format("{},{:.6f},{:.6f},{:.2f}\n", r.step, r.loss, r.fer, r.examples_per_sec);
  return s;
}

}  // namespace hfl
