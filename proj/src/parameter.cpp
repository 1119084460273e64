#include "hfl/parameter.hpp"

#include <cmath>
#include <fmt/format.h>
#include <fnmatch.h>

#include "hfl/ops.hpp"

namespace hfl {

Parameter::Parameter(std::string name, Tensor value, bool trainable)
    : name_(std::move(name)), value_(std::move(value)), trainable_(trainable) {}

Tensor Parameter::var() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = value_.shape();
  impl->dtype = value_.dtype();
  impl->data = value_.storage();
  impl->requires_grad = trainable_;
  if (trainable_) impl->leaf_name = name_;
  return Tensor(std::move(impl));
}

Parameter& ParameterStore::add(std::string name, Tensor value, bool trainable) {
  if (index_.contains(name)) throw ConfigError(fmt::format("duplicate parameter name '{}'", name));
  index_.emplace(name, params_.size());
  params_.push_back(std::make_unique<Parameter>(std::move(name), std::move(value), trainable));
  return *params_.back();
}

Parameter* ParameterStore::find(std::string_view name) {
  auto it = index_.find(std::string(name));
  return it == index_.end() ? nullptr : params_[it->second].get();
}

const Parameter* ParameterStore::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  return it == index_.end() ? nullptr : params_[it->second].get();
}

Parameter& ParameterStore::at(std::string_view name) {
  if (auto* p = find(name)) return *p;
  throw std::out_of_range(fmt::format("no parameter named '{}'", name));
}

const Parameter& ParameterStore::at(std::string_view name) const {
  if (const auto* p = find(name)) return *p;
  throw std::out_of_range(fmt::format("no parameter named '{}'", name));
}

std::vector<Parameter*> ParameterStore::all() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
  std::vector<const Parameter*> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<Parameter*> ParameterStore::trainable() {
  std::vector<Parameter*> out;
  for (auto& p : params_)
    if (p->trainable()) out.push_back(p.get());
  return out;
}

std::vector<Parameter*> ParameterStore::match(std::string_view pattern) {
  std::vector<Parameter*> out;
  for (auto& p : params_)
    if (glob_match(pattern, p->name())) out.push_back(p.get());
  return out;
}

std::int64_t ParameterStore::count_elements(bool trainable_only) const {
  std::int64_t n = 0;
  for (const auto& p : params_)
    if (!trainable_only || p->trainable()) n += p->numel();
  return n;
}

namespace {

std::vector<std::string_view> split_segments(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find('/', start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

bool match_segments(const std::vector<std::string>& pat, std::size_t pi,
                    const std::vector<std::string>& name, std::size_t ni) {
  if (pi == pat.size()) return ni == name.size();
  if (pat[pi] == "**") {
    for (std::size_t k = ni; k <= name.size(); ++k)
      if (match_segments(pat, pi + 1, name, k)) return true;
    return false;
  }
  if (ni == name.size()) return false;
  if (fnmatch(pat[pi].c_str(), name[ni].c_str(), 0) != 0) return false;
  return match_segments(pat, pi + 1, name, ni + 1);
}

}  // namespace

bool glob_match(std::string_view pattern, std::string_view name) {
  if (pattern.empty()) throw ConfigError("empty parameter name pattern");
  std::vector<std::string> pat;
  for (auto seg : split_segments(pattern)) {
    if (seg.empty()) throw ConfigError(fmt::format("pattern '{}' has an empty segment", pattern));
    if (seg != "**" && seg.find("**") != std::string_view::npos) {
      throw ConfigError(fmt::format("pattern '{}': '**' must be a whole segment", pattern));
    }
    pat.emplace_back(seg);
  }
  std::vector<std::string> parts;
  for (auto seg : split_segments(name)) parts.emplace_back(seg);
  return match_segments(pat, 0, parts, 0);
}

std::size_t set_trainable(ParameterStore& store, std::string_view pattern, bool flag) {
  auto hits = store.match(pattern);
  for (auto* p : hits) p->set_trainable(flag);
  return hits.size();
}

Tensor Linear::operator()(const Tensor& x) const {
  return bias_add(matmul(x, weight->var()), bias->var());
}

Tensor Norm::operator()(const Tensor& x) const {
  return layer_norm(x, scale->var(), bias->var());
}

Tensor random_normal(Shape shape, double stddev, Rng& rng, DType dtype) {
  Tensor t = Tensor::zeros(std::move(shape), dtype);
  std::normal_distribution<double> dist(0.0, stddev);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, dist(rng));
  return t;
}

Linear make_linear(ParameterStore& store, const std::string& prefix, std::int64_t in,
                   std::int64_t out, Rng& rng, DType dtype, double init_gain) {
  Linear l;
  l.weight = &store.add(prefix + "/weight",
                        random_normal({in, out}, init_gain / std::sqrt(static_cast<double>(in)), rng, dtype));
  l.bias = &store.add(prefix + "/bias", Tensor::zeros({out}, dtype));
  return l;
}

Norm make_norm(ParameterStore& store, const std::string& prefix, std::int64_t dim, DType dtype) {
  Norm n;
  n.scale = &store.add(prefix + "/scale", Tensor::full({dim}, 1.0, dtype));
  n.bias = &store.add(prefix + "/bias", Tensor::zeros({dim}, dtype));
  return n;
}

}  // namespace hfl
