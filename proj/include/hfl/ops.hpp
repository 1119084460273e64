#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "hfl/tensor.hpp"

namespace hfl {

enum class OpKind : std::uint8_t {
  MatMul,
  BiasAdd,
  Add,
  Mul,
  Scale,
  Relu,
  Sigmoid,
  Swish,
  Glu,
  Softmax,
  LayerNorm,
  Conv1d,
  DepthwiseConv1d,
  Concat,
  Slice,
  Transpose,
  Mean,
  CrossEntropy,
};

inline constexpr std::size_t kNumOpKinds = 18;

std::string_view op_name(OpKind kind);
std::optional<OpKind> op_from_name(std::string_view name);

struct OpAttrs {
  // Scale factor for Scale, epsilon for LayerNorm.
  double scalar = 0.0;
  // Slice: axis, begin and length along it.
  int axis = 1;
  std::int64_t begin = 0;
  std::int64_t length = 0;
  // Conv1d / DepthwiseConv1d.
  int stride = 1;
  int pad_left = 0;
  int pad_right = 0;
  // CrossEntropy targets, one per row; negative entries are ignored.
  std::vector<std::int32_t> labels;
};

/// Applies one primitive. Records a graph node when any input requires a
/// gradient and grad mode is enabled. Forward work is charged to the active
/// OpCounter under the current scope.
///
/// Signatures (rank-2 tensors are (rows, features)):
///   MatMul          (m,k) x (k,n) -> (m,n)
///   BiasAdd         (m,n) + (n) -> (m,n)
///   Add, Mul        same shape -> same shape
///   Scale           x * attrs.scalar
///   Relu, Sigmoid, Swish
///   Glu             (m,2c) -> (m,c), first half gated by sigmoid(second)
///   Softmax         row-wise over the last axis of a rank-2 tensor
///   LayerNorm       (m,n), gamma (n), beta (n); eps = attrs.scalar
///   Conv1d          (t,cin), weight (k,cin,cout) -> (t',cout)
///   DepthwiseConv1d (t,c), weight (k,c) -> (t',c)
///   Concat          list of (m,n_i) -> (m, sum n_i)
///   Slice           rank-2, along attrs.axis
///   Transpose       (m,n) -> (n,m)
///   Mean            any -> scalar
///   CrossEntropy    logits (m,k) with attrs.labels -> scalar mean over
///                   rows whose label is non-negative
Tensor apply_primitive(OpKind kind, std::span<const Tensor> inputs,
                       const OpAttrs& attrs = {});
Tensor apply_primitive(std::string_view kind, std::span<const Tensor> inputs,
                       const OpAttrs& attrs = {});

/// Output shape for an op, or ShapeError naming the op and offending dims.
Shape infer_shape(OpKind kind, std::span<const Tensor> inputs,
                  const OpAttrs& attrs);

// FLOP convention: one multiply-add counts as 2 FLOPs. Data movement
// (concat, slice, transpose) counts 0.
std::uint64_t forward_flops(OpKind kind, std::span<const Shape> in_shapes,
                            const Shape& out_shape);
std::uint64_t backward_flops(OpKind kind, std::size_t input_index,
                             std::span<const Shape> in_shapes,
                             const Shape& out_shape);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor bias_add(const Tensor& x, const Tensor& bias);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor swish(const Tensor& x);
Tensor glu(const Tensor& x);
Tensor softmax(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
Tensor conv1d(const Tensor& x, const Tensor& weight, int stride, int pad_left,
              int pad_right);
Tensor depthwise_conv1d(const Tensor& x, const Tensor& weight, int pad_left,
                        int pad_right);
Tensor concat(std::span<const Tensor> parts);
Tensor slice(const Tensor& x, int axis, std::int64_t begin,
             std::int64_t length);
Tensor transpose(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor cross_entropy(const Tensor& logits, std::vector<std::int32_t> labels);

}  // namespace hfl
