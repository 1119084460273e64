#include "hfl/tensor.hpp"

#include <algorithm>
#include <cstring>
#include <sstream>

namespace hfl {

std::string_view dtype_name(DType dtype) {
  return dtype == DType::f32 ? "float32" : "float64";
}

std::size_t dtype_size(DType dtype) { return dtype == DType::f32 ? 4 : 8; }

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Buffer make_buffer(DType dtype, std::size_t n) {
  if (dtype == DType::f32) return std::vector<float>(n, 0.0f);
  return std::vector<double>(n, 0.0);
}

std::size_t buffer_size(const Buffer& buffer) {
  return std::visit([](const auto& v) { return v.size(); }, buffer);
}

DType buffer_dtype(const Buffer& buffer) {
  return buffer.index() == 0 ? DType::f32 : DType::f64;
}

namespace {

void check_shape(const Shape& shape) {
  for (auto d : shape) {
    if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
  }
}

Tensor make(Shape shape, Buffer buffer) {
  auto impl = std::make_shared<TensorImpl>();
  impl->dtype = buffer_dtype(buffer);
  impl->shape = std::move(shape);
  impl->data = std::make_shared<Buffer>(std::move(buffer));
  return Tensor(std::move(impl));
}

}  // namespace

Tensor Tensor::zeros(Shape shape, DType dtype) {
  check_shape(shape);
  auto n = static_cast<std::size_t>(shape_numel(shape));
  return make(std::move(shape), make_buffer(dtype, n));
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t = zeros(std::move(shape), dtype);
  std::visit([value](auto& v) {
    std::fill(v.begin(), v.end(), static_cast<typename std::decay_t<decltype(v)>::value_type>(value));
  }, *t.impl_->data);
  return t;
}

Tensor Tensor::from_values(Shape shape, std::span<const double> values, DType dtype) {
  check_shape(shape);
  if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
    throw ShapeError("from_values: " + std::to_string(values.size()) +
                     " values do not fill shape " + shape_str(shape));
  }
  Tensor t = zeros(std::move(shape), dtype);
  std::visit([&](auto& v) { std::copy(values.begin(), values.end(), v.begin()); },
             *t.impl_->data);
  return t;
}

Tensor Tensor::from_buffer(Shape shape, Buffer buffer) {
  check_shape(shape);
  if (static_cast<std::int64_t>(buffer_size(buffer)) != shape_numel(shape)) {
    throw ShapeError("from_buffer: buffer length " + std::to_string(buffer_size(buffer)) +
                     " does not match shape " + shape_str(shape));
  }
  return make(std::move(shape), std::move(buffer));
}

Tensor Tensor::scalar(double value, DType dtype) {
  auto t = make(Shape{}, make_buffer(dtype, 1));
  t.set(0, value);
  return t;
}

std::int64_t Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(shape()));
  }
  return impl_->shape[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
  return at(0);
}

double Tensor::at(std::int64_t i) const {
  return std::visit([i](const auto& v) { return static_cast<double>(v.at(static_cast<std::size_t>(i))); },
                    *impl_->data);
}

void Tensor::set(std::int64_t i, double value) {
  std::visit([&](auto& v) {
    v.at(static_cast<std::size_t>(i)) = static_cast<typename std::decay_t<decltype(v)>::value_type>(value);
  }, *impl_->data);
}

std::vector<double> Tensor::to_vector() const {
  return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); },
                    *impl_->data);
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->dtype = impl_->dtype;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const { return make(impl_->shape, *impl_->data); }

Tensor Tensor::to(DType dtype) const {
  if (dtype == impl_->dtype) return clone();
  Buffer out = make_buffer(dtype, static_cast<std::size_t>(numel()));
  std::visit([&](const auto& src) {
    std::visit([&](auto& dst) {
      using D = typename std::decay_t<decltype(dst)>::value_type;
      std::transform(src.begin(), src.end(), dst.begin(), [](auto x) { return static_cast<D>(x); });
    }, out);
  }, *impl_->data);
  return make(impl_->shape, std::move(out));
}

bool Tensor::bitwise_equal(const Tensor& other) const {
  if (shape() != other.shape() || dtype() != other.dtype()) return false;
  return std::visit([&](const auto& a) {
    using V = std::decay_t<decltype(a)>;
    const auto& b = std::get<V>(*other.impl_->data);
    return std::memcmp(a.data(), b.data(), a.size() * sizeof(typename V::value_type)) == 0;
  }, *impl_->data);
}

}  // namespace hfl
