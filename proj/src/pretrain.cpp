#include "hfl/pretrain.hpp"

#include <cmath>
#include <fmt/format.h>
#include <limits>
#include <random>

#include "hfl/autodiff.hpp"
#include "hfl/checkpoint.hpp"
#include "hfl/op_counter.hpp"
#include "hfl/ops.hpp"
#include "hfl/optim.hpp"
#include "hfl/trainer.hpp"

namespace hfl {

void PretrainConfig::validate() const {
  if (steps < 0) throw ConfigError("pretrain.steps must be non-negative");
  if (batch_size <= 0) throw ConfigError("pretrain.batch_size must be positive");
  if (!(lr > 0)) throw ConfigError("pretrain.lr must be positive");
  if (num_codes < 2) throw ConfigError("pretrain.num_codes must be at least 2");
  if (code_dim <= 0) throw ConfigError("pretrain.code_dim must be positive");
  if (!(mask_prob > 0 && mask_prob < 1)) {
    throw ConfigError(fmt::format(
        "pretrain.mask_prob must be in (0, 1), got {}; with nothing masked there is nothing to predict",
        mask_prob));
  }
  if (mask_span <= 0) throw ConfigError("pretrain.mask_span must be positive");
  if (log_every <= 0) throw ConfigError("pretrain.log_every must be positive");
}

RandomProjectionQuantizer::RandomProjectionQuantizer(int input_dim, int window, int code_dim, int num_codes,
                                                     std::uint64_t seed, const Dataset& data)
    : input_dim_(input_dim), window_(window), code_dim_(code_dim), num_codes_(num_codes) {
  const int n = input_dim * window;
  mean_.assign(static_cast<std::size_t>(n), 0.0);
  inv_std_.assign(static_cast<std::size_t>(n), 1.0);
  std::vector<double> sq(static_cast<std::size_t>(n), 0.0);
  std::int64_t count = 0;
  for (const auto& ex : data) {
    const auto v = ex.frames.to_vector();
    const std::int64_t windows = ex.frames.dim(0) / window;
    for (std::int64_t w = 0; w < windows; ++w) {
      for (int j = 0; j < n; ++j) {
        const double x = v[static_cast<std::size_t>(w * n + j)];
        mean_[static_cast<std::size_t>(j)] += x;
        sq[static_cast<std::size_t>(j)] += x * x;
      }
      ++count;
    }
  }
  // Centre each input, then scale by one shared std so low-variance inputs
  // stay quiet in the projection.
  if (count > 0) {
    double total_var = 0;
    for (int j = 0; j < n; ++j) {
      const auto k = static_cast<std::size_t>(j);
      mean_[k] /= static_cast<double>(count);
      total_var += sq[k] / static_cast<double>(count) - mean_[k] * mean_[k];
    }
    const double var = total_var / n;
    std::fill(inv_std_.begin(), inv_std_.end(), var > 1e-12 ? 1.0 / std::sqrt(var) : 1.0);
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  projection_.resize(static_cast<std::size_t>(n * code_dim));
  for (auto& x : projection_) x = normal(rng) / std::sqrt(static_cast<double>(n));
  codebook_.resize(static_cast<std::size_t>(num_codes * code_dim));
  for (int c = 0; c < num_codes; ++c) {
    double norm = 0;
    for (int j = 0; j < code_dim; ++j) {
      const double x = normal(rng);
      codebook_[static_cast<std::size_t>(c * code_dim + j)] = x;
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (int j = 0; j < code_dim; ++j) codebook_[static_cast<std::size_t>(c * code_dim + j)] /= norm;
  }
}

std::vector<std::int32_t> RandomProjectionQuantizer::codes(const Tensor& frames) const {
  if (frames.rank() != 2 || frames.dim(1) != input_dim_) {
    throw ShapeError(fmt::format("quantizer expects (time, {}) frames", input_dim_));
  }
  const auto v = frames.to_vector();
  const int n = input_dim_ * window_;
  const std::int64_t windows = frames.dim(0) / window_;
  std::vector<std::int32_t> out;
  std::vector<double> x(static_cast<std::size_t>(n)), z(static_cast<std::size_t>(code_dim_));
  for (std::int64_t w = 0; w < windows; ++w) {
    for (int j = 0; j < n; ++j) {
      const auto k = static_cast<std::size_t>(j);
      x[k] = (v[static_cast<std::size_t>(w * n + j)] - mean_[k]) * inv_std_[k];
    }
    std::fill(z.begin(), z.end(), 0.0);
    for (int j = 0; j < n; ++j)
      for (int c = 0; c < code_dim_; ++c)
        z[static_cast<std::size_t>(c)] += x[static_cast<std::size_t>(j)] * projection_[static_cast<std::size_t>(j * code_dim_ + c)];
    // Unit codebook rows: nearest neighbour of the normalized projection is
    // the row with the largest dot product.
    int best = 0;
    double best_dot = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < num_codes_; ++c) {
      double dot = 0;
      for (int j = 0; j < code_dim_; ++j)
        dot += z[static_cast<std::size_t>(j)] * codebook_[static_cast<std::size_t>(c * code_dim_ + j)];
      if (dot > best_dot) {
        best_dot = dot;
        best = c;
      }
    }
    out.push_back(best);
  }
  return out;
}

PretrainResult pretrain_masked_prediction(Encoder& encoder, const Dataset& data, const PretrainConfig& cfg,
                                          const std::function<void(int, double)>& on_log) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("pretrain: empty dataset");
  const EncoderConfig& ec = encoder.config();
  const DType dtype = encoder.dtype();
  const int window = ec.frontend_subsampling;
  const RandomProjectionQuantizer quantizer(ec.input_dim, window, cfg.code_dim, cfg.num_codes, cfg.seed + 7,
                                            data);
  std::vector<std::vector<std::int32_t>> targets;
  targets.reserve(data.size());
  for (const auto& ex : data) targets.push_back(quantizer.codes(ex.frames));

  set_trainable(encoder.params(), "**", true);
  ParameterStore extra;
  Rng init(cfg.seed + 11);
  Parameter& mask_embedding =
      extra.add("pretrain/mask_embedding", random_normal({1, ec.input_dim}, 1.0, init, dtype));
  const Linear head = make_linear(extra, "pretrain/head", ec.model_dim, cfg.num_codes, init, dtype);

  std::vector<Parameter*> params = encoder.params().all();
  for (Parameter* p : extra.all()) params.push_back(p);
  Adam adam(params, std::vector<double>(params.size(), cfg.lr));

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::bernoulli_distribution start_span(cfg.mask_prob);
  const TapSet top({ec.num_layers - 1});

  auto masked_loss = [&](std::size_t idx) {
    const Example& ex = data[idx];
    const std::int64_t time = ex.frames.dim(0);
    std::vector<double> keep(static_cast<std::size_t>(time * ec.input_dim), 1.0);
    std::vector<double> masked(static_cast<std::size_t>(time), 0.0);
    for (std::int64_t t = 0; t < time; ++t) {
      if (!start_span(rng)) continue;
      for (std::int64_t s = t; s < std::min(time, t + cfg.mask_span); ++s) masked[static_cast<std::size_t>(s)] = 1.0;
    }
    for (std::int64_t t = 0; t < time; ++t)
      if (masked[static_cast<std::size_t>(t)] > 0)
        for (int j = 0; j < ec.input_dim; ++j) keep[static_cast<std::size_t>(t * ec.input_dim + j)] = 0.0;
    std::vector<std::int32_t> labels = targets[idx];
    for (std::size_t w = 0; w < labels.size(); ++w) {
      bool any = false;
      for (int j = 0; j < window; ++j) any = any || masked[w * static_cast<std::size_t>(window) + static_cast<std::size_t>(j)] > 0;
      if (!any) labels[w] = -1;
    }
    Tensor x;
    {
      ScopeGuard scope("pretrain/mask");
      x = add(mul(ex.frames, Tensor::from_values({time, ec.input_dim}, keep, dtype)),
              matmul(Tensor::from_values({time, 1}, masked, dtype), mask_embedding.var()));
    }
    const FeatureTaps taps = encoder.encode_with_taps(x, top);
    ScopeGuard scope("pretrain/head");
    return cross_entropy(head(taps.at(ec.num_layers - 1)), labels);
  };

  PretrainResult result;
  std::vector<double> losses;
  double window_sum = 0;
  int window_count = 0;
  for (int t = 0; t < cfg.steps; ++t) {
    Tensor loss = masked_loss(pick(rng));
    for (int b = 1; b < cfg.batch_size; ++b) loss = add(loss, masked_loss(pick(rng)));
    loss = scale(loss, 1.0 / cfg.batch_size);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw std::runtime_error(fmt::format("pretraining diverged: non-finite loss at step {}", t + 1));
    }
    adam.step(backward(loss), warmup_scale(t, cfg.warmup_steps));
    losses.push_back(value);
    window_sum += value;
    ++window_count;
    if ((t + 1) % cfg.log_every == 0 || t + 1 == cfg.steps) {
      result.loss_history.emplace_back(t + 1, window_sum / window_count);
      if (on_log) on_log(t + 1, window_sum / window_count);
      window_sum = 0;
      window_count = 0;
    }
  }
  const std::size_t w = std::min<std::size_t>(50, losses.size());
  if (w > 0) {
    for (std::size_t i = 0; i < w; ++i) {
      result.initial_loss += losses[i] / static_cast<double>(w);
      result.final_loss += losses[losses.size() - w + i] / static_cast<double>(w);
    }
  }
  result.gate_passed = w > 0 && result.final_loss <= 0.7 * result.initial_loss;
  return result;
}

void save_encoder(const std::filesystem::path& path, const Encoder& encoder) {
  save_parameters(path, encoder.params(), "encoder/**");
}

}  // namespace hfl
