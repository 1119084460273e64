#include "hfl/optim.hpp"

#include <cmath>
#include <fmt/format.h>
#include <set>

namespace hfl {

Adam::Adam(std::vector<Parameter*> params, std::vector<double> base_lr, AdamConfig cfg)
    : params_(std::move(params)), base_lr_(std::move(base_lr)), cfg_(cfg) {
  if (params_.size() != base_lr_.size()) throw std::invalid_argument("Adam: one learning rate per parameter");
  for (const Parameter* p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p->numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p->numel()), 0.0);
    count_.push_back(0);
  }
}

void Adam::step(const GradientMap& grads, double lr_scale) {
  ++t_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (!p.trainable()) throw std::logic_error(fmt::format("Adam: parameter '{}' is frozen", p.name()));
    auto it = grads.find(p.name());
    if (it == grads.end()) continue;
    const long t = ++count_[i];
    const double lr = base_lr_[i] * lr_scale;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t));
    auto& m = m_[i];
    auto& v = v_[i];
    visit_dtype(p.value().dtype(), [&]<class T>() {
      auto w = p.value().mutable_data<T>();
      const auto g = it->second.data<T>();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = static_cast<double>(g[j]);
        m[j] = cfg_.beta1 * m[j] + (1 - cfg_.beta1) * gj;
        v[j] = cfg_.beta2 * v[j] + (1 - cfg_.beta2) * gj * gj;
        const double update = lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
        w[j] = static_cast<T>(static_cast<double>(w[j]) - update);
      }
    });
  }
}

double warmup_scale(long step, long warmup) {
  if (warmup <= 0) return 1.0;
  return std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warmup));
}

ShadowWeights ema_snapshot(const std::vector<Parameter*>& params) {
  ShadowWeights s;
  for (const Parameter* p : params)
    if (p->trainable()) s.emplace(p->name(), p->value().clone());
  return s;
}

void ema_update(ShadowWeights& shadow, const std::vector<Parameter*>& current, double decay) {
  if (!(decay >= 0 && decay <= 1)) throw std::invalid_argument("ema decay must be in [0, 1]");
  std::set<std::string> names;
  for (const Parameter* p : current) {
    if (!p->trainable()) continue;
    names.insert(p->name());
    auto it = shadow.find(p->name());
    if (it == shadow.end()) {
      throw std::invalid_argument(fmt::format("ema_update: no shadow for parameter '{}'", p->name()));
    }
    Tensor& s = it->second;
    if (s.shape() != p->value().shape() || s.dtype() != p->value().dtype()) {
      throw std::invalid_argument(fmt::format("ema_update: shadow of '{}' has the wrong shape", p->name()));
    }
    visit_dtype(s.dtype(), [&]<class T>() {
      auto sd = s.mutable_data<T>();
      const auto cd = p->value().data<T>();
      const T a = static_cast<T>(decay), b = static_cast<T>(1.0 - decay);
      for (std::size_t j = 0; j < sd.size(); ++j) sd[j] = a * sd[j] + b * cd[j];
    });
  }
  for (const auto& [name, t] : shadow) {
    if (!names.contains(name)) {
      throw std::invalid_argument(fmt::format("ema_update: shadow entry '{}' has no trainable parameter", name));
    }
  }
}

void swap_in(ShadowWeights& shadow, const std::vector<Parameter*>& params) {
  for (Parameter* p : params) {
    auto it = shadow.find(p->name());
    if (it == shadow.end()) continue;
    std::swap(*p->value().storage(), *it->second.storage());
  }
}

}  // namespace hfl
