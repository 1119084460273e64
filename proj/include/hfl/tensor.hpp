#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace hfl {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

std::string_view dtype_name(DType dtype);
std::size_t dtype_size(DType dtype);

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when operand shapes do not conform to an op signature.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised by any configuration or spec validation.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Buffer = std::variant<std::vector<float>, std::vector<double>>;

struct Node;

struct TensorImpl {
  Shape shape;
  DType dtype = DType::f32;
  std::shared_ptr<Buffer> data;
  std::shared_ptr<Node> node;
  bool requires_grad = false;
  // Set on trainable parameter leaves; gradients are keyed by it.
  std::string leaf_name;
};

/// Dense row-major tensor handle. Copies share storage and graph position.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, DType dtype = DType::f32);
  static Tensor full(Shape shape, double value, DType dtype = DType::f32);
  static Tensor from_values(Shape shape, std::span<const double> values,
                            DType dtype = DType::f32);
  static Tensor from_buffer(Shape shape, Buffer buffer);
  static Tensor scalar(double value, DType dtype = DType::f32);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t dim(int axis) const;
  std::int64_t numel() const { return shape_numel(impl_->shape); }
  DType dtype() const { return impl_->dtype; }
  bool requires_grad() const { return impl_->requires_grad; }
  bool is_leaf() const { return impl_->node == nullptr; }
  const std::shared_ptr<Node>& node() const { return impl_->node; }
  const std::string& leaf_name() const { return impl_->leaf_name; }
  const std::shared_ptr<Buffer>& storage() const { return impl_->data; }
  TensorImpl* impl() const { return impl_.get(); }

  template <class T>
  std::span<const T> data() const {
    return std::get<std::vector<T>>(*impl_->data);
  }
  template <class T>
  std::span<T> mutable_data() {
    return std::get<std::vector<T>>(*impl_->data);
  }

  double item() const;
  double at(std::int64_t flat_index) const;
  void set(std::int64_t flat_index, double value);
  std::vector<double> to_vector() const;

  /// Shares storage but drops the graph node.
  Tensor detach() const;
  /// Deep copy without graph history.
  Tensor clone() const;
  Tensor to(DType dtype) const;

  bool bitwise_equal(const Tensor& other) const;

 private:
  std::shared_ptr<TensorImpl> impl_;
};

Buffer make_buffer(DType dtype, std::size_t n);
std::size_t buffer_size(const Buffer& buffer);
DType buffer_dtype(const Buffer& buffer);

template <class F>
decltype(auto) visit_dtype(DType dtype, F&& f) {
  if (dtype == DType::f32) return f.template operator()<float>();
  return f.template operator()<double>();
}

}  // namespace hfl
