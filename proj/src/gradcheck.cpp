#include "hfl/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <numeric>

#include "hfl/autodiff.hpp"

namespace hfl {

namespace {

// Central differences at eps 1e-6 carry ~1e-11 rounding noise; entries far
// below this floor are judged on absolute error.
constexpr double kDenominatorFloor = 1e-4;

double eval_loss(const std::function<Tensor()>& loss_fn) {
  NoGradGuard no_grad;
  const double v = loss_fn().item();
  if (!std::isfinite(v)) throw std::runtime_error("finite_difference_check: loss is not finite");
  return v;
}

}  // namespace

GradCheckReport finite_difference_check(const std::function<Tensor()>& loss_fn,
                                        std::span<Parameter* const> params, double eps,
                                        std::size_t max_coords, std::uint64_t seed) {
  if (eps <= 0) throw std::invalid_argument("finite_difference_check: eps must be positive");
  for (const Parameter* p : params) {
    if (p->value().dtype() != DType::f64) {
      throw std::invalid_argument(
          fmt::format("finite_difference_check: '{}' is not float64", p->name()));
    }
    if (!p->trainable()) {
      throw std::invalid_argument(
          fmt::format("finite_difference_check: '{}' is frozen", p->name()));
    }
  }

  Tensor loss = loss_fn();
  if (!std::isfinite(loss.item())) {
    throw std::runtime_error("finite_difference_check: loss is not finite");
  }
  GradientMap grads = backward(loss);

  GradCheckReport report;
  Rng rng(seed);
  for (Parameter* p : params) {
    const auto n = static_cast<std::size_t>(p->numel());
    std::vector<std::int64_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    if (n > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
      std::sort(coords.begin(), coords.end());
    }
    auto git = grads.find(p->name());
    auto& value = p->value();
    for (auto c : coords) {
      const double analytic = git == grads.end() ? 0.0 : git->second.at(c);
      const double w = value.at(c);
      const double h = eps * (1.0 + std::abs(w));
      value.set(c, w + h);
      const double fp = eval_loss(loss_fn);
      value.set(c, w - h);
      const double fm = eval_loss(loss_fn);
      value.set(c, w);
      const double numeric = (fp - fm) / (2.0 * h);
      const double rel =
          std::abs(analytic - numeric) / std::max(kDenominatorFloor, std::abs(analytic) + std::abs(numeric));
      ++report.coordinates_checked;
      if (rel > report.max_rel_error || report.worst_index < 0) {
        report.max_rel_error = std::max(rel, report.max_rel_error);
        report.worst_parameter = p->name();
        report.worst_index = c;
      }
    }
  }
  return report;
}

}  // namespace hfl
