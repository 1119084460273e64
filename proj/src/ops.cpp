#include "hfl/ops.hpp"

#include <Eigen/Core>
#include <array>
#include <cmath>
#include <fmt/format.h>

#include "hfl/autodiff.hpp"
#include "hfl/op_counter.hpp"
#include "ops_internal.hpp"

namespace hfl {

namespace {

constexpr std::array<std::string_view, kNumOpKinds> kOpNames = {
    "matmul",  "bias_add",   "add",    "mul",        "scale",
    "relu",    "sigmoid",    "swish",  "glu",        "softmax",
    "layer_norm", "conv1d",  "depthwise_conv1d", "concat", "slice",
    "transpose", "mean",     "cross_entropy",
};

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;

[[noreturn]] void shape_fail(OpKind kind, const std::string& what) {
  throw ShapeError(fmt::format("{}: {}", op_name(kind), what));
}

void expect_arity(OpKind kind, std::span<const Tensor> in, std::size_t n) {
  if (in.size() != n) {
    shape_fail(kind, fmt::format("expected {} inputs, got {}", n, in.size()));
  }
}

void expect_rank(OpKind kind, const Tensor& t, int rank, const char* what) {
  if (t.rank() != rank) {
    shape_fail(kind, fmt::format("{} must be rank {}, got shape {}", what, rank,
                                 shape_str(t.shape())));
  }
}

inline std::uint64_t u(std::int64_t v) { return static_cast<std::uint64_t>(v); }

template <class T>
std::span<const T> in_data(const Tensor& t) {
  return t.data<T>();
}

template <class T>
std::vector<T>& as_vec(Buffer& b) {
  return std::get<std::vector<T>>(b);
}

template <class T>
const std::vector<T>& as_vec(const Buffer& b) {
  return std::get<std::vector<T>>(b);
}

template <class T>
T sigmoid_scalar(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

// ---------------------------------------------------------------- forward

template <class T>
Buffer forward_kernel(OpKind kind, std::span<const Tensor> in, const OpAttrs& a,
                      const Shape& out_shape) {
  const auto n_out = static_cast<std::size_t>(shape_numel(out_shape));
  Buffer out_buf = std::vector<T>(n_out);
  auto& out = as_vec<T>(out_buf);

  switch (kind) {
    case OpKind::MatMul: {
      const auto m = in[0].dim(0), k = in[0].dim(1), n = in[1].dim(1);
      CMapR<T> A(in_data<T>(in[0]).data(), m, k);
      CMapR<T> B(in_data<T>(in[1]).data(), k, n);
      MapR<T> C(out.data(), m, n);
      C.noalias() = A * B;
      break;
    }
    case OpKind::BiasAdd: {
      const auto m = in[0].dim(0), n = in[0].dim(1);
      auto x = in_data<T>(in[0]);
      auto b = in_data<T>(in[1]);
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + b[j];
      break;
    }
    case OpKind::Add: {
      auto x = in_data<T>(in[0]);
      auto y = in_data<T>(in[1]);
      for (std::size_t i = 0; i < n_out; ++i) out[i] = x[i] + y[i];
      break;
    }
    case OpKind::Mul: {
      auto x = in_data<T>(in[0]);
      auto y = in_data<T>(in[1]);
      for (std::size_t i = 0; i < n_out; ++i) out[i] = x[i] * y[i];
      break;
    }
    case OpKind::Scale: {
      auto x = in_data<T>(in[0]);
      const T c = static_cast<T>(a.scalar);
      for (std::size_t i = 0; i < n_out; ++i) out[i] = x[i] * c;
      break;
    }
    case OpKind::Relu: {
      auto x = in_data<T>(in[0]);
      for (std::size_t i = 0; i < n_out; ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
      break;
    }
    case OpKind::Sigmoid: {
      auto x = in_data<T>(in[0]);
      for (std::size_t i = 0; i < n_out; ++i) out[i] = sigmoid_scalar(x[i]);
      break;
    }
    case OpKind::Swish: {
      auto x = in_data<T>(in[0]);
      for (std::size_t i = 0; i < n_out; ++i) out[i] = x[i] * sigmoid_scalar(x[i]);
      break;
    }
    case OpKind::Glu: {
      const auto m = in[0].dim(0), c = in[0].dim(1) / 2;
      auto x = in_data<T>(in[0]);
      for (std::int64_t i = 0; i < m; ++i) {
        const T* row = x.data() + i * 2 * c;
        for (std::int64_t j = 0; j < c; ++j) out[i * c + j] = row[j] * sigmoid_scalar(row[c + j]);
      }
      break;
    }
    case OpKind::Softmax: {
      const auto m = in[0].dim(0), n = in[0].dim(1);
      auto x = in_data<T>(in[0]);
      for (std::int64_t i = 0; i < m; ++i) {
        const T* row = x.data() + i * n;
        T* o = out.data() + i * n;
        T mx = row[0];
        for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0;
        for (std::int64_t j = 0; j < n; ++j) {
          o[j] = std::exp(row[j] - mx);
          sum += o[j];
        }
        const T inv = static_cast<T>(1.0 / sum);
        for (std::int64_t j = 0; j < n; ++j) o[j] *= inv;
      }
      break;
    }
    case OpKind::LayerNorm: {
      const auto m = in[0].dim(0), n = in[0].dim(1);
      auto x = in_data<T>(in[0]);
      auto g = in_data<T>(in[1]);
      auto b = in_data<T>(in[2]);
      for (std::int64_t i = 0; i < m; ++i) {
        const T* row = x.data() + i * n;
        double mu = 0;
        for (std::int64_t j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<double>(n);
        double var = 0;
        for (std::int64_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(n);
        const double rstd = 1.0 / std::sqrt(var + a.scalar);
        for (std::int64_t j = 0; j < n; ++j) {
          out[i * n + j] = static_cast<T>((row[j] - mu) * rstd) * g[j] + b[j];
        }
      }
      break;
    }
    case OpKind::Conv1d: {
      const auto t = in[0].dim(0), cin = in[0].dim(1);
      const auto k = in[1].dim(0), cout = in[1].dim(2);
      const auto tout = out_shape[0];
      MatR<T> cols = MatR<T>::Zero(tout, k * cin);
      auto x = in_data<T>(in[0]);
      for (std::int64_t o = 0; o < tout; ++o) {
        for (std::int64_t j = 0; j < k; ++j) {
          const std::int64_t src = o * a.stride - a.pad_left + j;
          if (src < 0 || src >= t) continue;
          for (std::int64_t c = 0; c < cin; ++c) cols(o, j * cin + c) = x[src * cin + c];
        }
      }
      CMapR<T> W(in_data<T>(in[1]).data(), k * cin, cout);
      MapR<T> Y(out.data(), tout, cout);
      Y.noalias() = cols * W;
      break;
    }
    case OpKind::DepthwiseConv1d: {
      const auto t = in[0].dim(0), c = in[0].dim(1);
      const auto k = in[1].dim(0);
      const auto tout = out_shape[0];
      auto x = in_data<T>(in[0]);
      auto w = in_data<T>(in[1]);
      for (std::int64_t o = 0; o < tout; ++o) {
        T* orow = out.data() + o * c;
        for (std::int64_t j = 0; j < k; ++j) {
          const std::int64_t src = o - a.pad_left + j;
          if (src < 0 || src >= t) continue;
          const T* xrow = x.data() + src * c;
          const T* wrow = w.data() + j * c;
          for (std::int64_t ch = 0; ch < c; ++ch) orow[ch] += xrow[ch] * wrow[ch];
        }
      }
      break;
    }
    case OpKind::Concat: {
      const auto m = out_shape[0], total = out_shape[1];
      std::int64_t offset = 0;
      for (const auto& part : in) {
        const auto w = part.dim(1);
        auto x = in_data<T>(part);
        for (std::int64_t i = 0; i < m; ++i)
          std::copy_n(x.data() + i * w, w, out.data() + i * total + offset);
        offset += w;
      }
      break;
    }
    case OpKind::Slice: {
      const auto n = in[0].dim(1);
      auto x = in_data<T>(in[0]);
      if (a.axis == 0) {
        std::copy_n(x.data() + a.begin * n, a.length * n, out.data());
      } else {
        const auto m = in[0].dim(0);
        for (std::int64_t i = 0; i < m; ++i)
          std::copy_n(x.data() + i * n + a.begin, a.length, out.data() + i * a.length);
      }
      break;
    }
    case OpKind::Transpose: {
      const auto m = in[0].dim(0), n = in[0].dim(1);
      CMapR<T> X(in_data<T>(in[0]).data(), m, n);
      MapR<T> Y(out.data(), n, m);
      Y = X.transpose();
      break;
    }
    case OpKind::Mean: {
      auto x = in_data<T>(in[0]);
      double sum = 0;
      for (auto v : x) sum += v;
      out[0] = static_cast<T>(sum / static_cast<double>(x.size()));
      break;
    }
    case OpKind::CrossEntropy: {
      const auto m = in[0].dim(0), k = in[0].dim(1);
      auto x = in_data<T>(in[0]);
      double total = 0;
      std::int64_t count = 0;
      for (std::int64_t i = 0; i < m; ++i) {
        const auto label = a.labels[static_cast<std::size_t>(i)];
        if (label < 0) continue;
        const T* row = x.data() + i * k;
        T mx = row[0];
        for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double sum = 0;
        for (std::int64_t j = 0; j < k; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
        total += std::log(sum) + static_cast<double>(mx) - static_cast<double>(row[label]);
        ++count;
      }
      out[0] = count ? static_cast<T>(total / static_cast<double>(count)) : T(0);
      break;
    }
  }
  return out_buf;
}

// --------------------------------------------------------------- backward

template <class T>
std::vector<std::optional<Buffer>> backward_kernel(const Node& node,
                                                   const std::vector<T>& g) {
  const auto& in = node.inputs;
  const auto& a = node.attrs;
  std::vector<std::optional<Buffer>> grads(in.size());
  auto want = [&](std::size_t i) { return static_cast<bool>(node.needs_grad[i]); };
  auto alloc = [&](std::size_t i) -> std::vector<T>& {
    grads[i] = std::vector<T>(static_cast<std::size_t>(in[i].numel()), T(0));
    return as_vec<T>(*grads[i]);
  };
  const auto& y = as_vec<T>(*node.output);

  switch (node.kind) {
    case OpKind::MatMul: {
      const auto m = in[0].dim(0), k = in[0].dim(1), n = in[1].dim(1);
      CMapR<T> G(g.data(), m, n);
      if (want(0)) {
        CMapR<T> B(in_data<T>(in[1]).data(), k, n);
        MapR<T> dA(alloc(0).data(), m, k);
        dA.noalias() = G * B.transpose();
      }
      if (want(1)) {
        CMapR<T> A(in_data<T>(in[0]).data(), m, k);
        MapR<T> dB(alloc(1).data(), k, n);
        dB.noalias() = A.transpose() * G;
      }
      break;
    }
    case OpKind::BiasAdd: {
      const auto m = in[0].dim(0), n = in[0].dim(1);
      if (want(0)) alloc(0) = g;
      if (want(1)) {
        auto& db = alloc(1);
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t j = 0; j < n; ++j) db[j] += g[i * n + j];
      }
      break;
    }
    case OpKind::Add:
      if (want(0)) alloc(0) = g;
      if (want(1)) alloc(1) = g;
      break;
    case OpKind::Mul: {
      auto x0 = in_data<T>(in[0]);
      auto x1 = in_data<T>(in[1]);
      if (want(0)) {
        auto& d = alloc(0);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * x1[i];
      }
      if (want(1)) {
        auto& d = alloc(1);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * x0[i];
      }
      break;
    }
    case OpKind::Scale: {
      auto& d = alloc(0);
      const T c = static_cast<T>(a.scalar);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * c;
      break;
    }
    case OpKind::Relu: {
      auto& d = alloc(0);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] = y[i] > T(0) ? g[i] : T(0);
      break;
    }
    case OpKind::Sigmoid: {
      auto& d = alloc(0);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * y[i] * (T(1) - y[i]);
      break;
    }
    case OpKind::Swish: {
      auto x = in_data<T>(in[0]);
      auto& d = alloc(0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T s = sigmoid_scalar(x[i]);
        d[i] = g[i] * (s + x[i] * s * (T(1) - s));
      }
      break;
    }
    case OpKind::Glu: {
      const auto m = in[0].dim(0), c = in[0].dim(1) / 2;
      auto x = in_data<T>(in[0]);
      auto& d = alloc(0);
      for (std::int64_t i = 0; i < m; ++i) {
        const T* row = x.data() + i * 2 * c;
        T* drow = d.data() + i * 2 * c;
        for (std::int64_t j = 0; j < c; ++j) {
          const T s = sigmoid_scalar(row[c + j]);
          const T gi = g[i * c + j];
          drow[j] = gi * s;
          drow[c + j] = gi * row[j] * s * (T(1) - s);
        }
      }
      break;
    }
    case OpKind::Softmax: {
      const auto m = in[0].dim(0), n = in[0].dim(1);
      auto& d = alloc(0);
      for (std::int64_t i = 0; i < m; ++i) {
        double dot = 0;
        for (std::int64_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
        for (std::int64_t j = 0; j < n; ++j)
          d[i * n + j] = y[i * n + j] * (g[i * n + j] - static_cast<T>(dot));
      }
      break;
    }
    case OpKind::LayerNorm: {
      const auto m = in[0].dim(0), n = in[0].dim(1);
      auto x = in_data<T>(in[0]);
      auto gamma = in_data<T>(in[1]);
      std::vector<T>* dx = want(0) ? &alloc(0) : nullptr;
      std::vector<T>* dg = want(1) ? &alloc(1) : nullptr;
      std::vector<T>* dbeta = want(2) ? &alloc(2) : nullptr;
      std::vector<double> xhat(static_cast<std::size_t>(n));
      std::vector<double> dxhat(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < m; ++i) {
        const T* row = x.data() + i * n;
        const T* grow = g.data() + i * n;
        double mu = 0;
        for (std::int64_t j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<double>(n);
        double var = 0;
        for (std::int64_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(n);
        const double rstd = 1.0 / std::sqrt(var + a.scalar);
        double mean_d = 0, mean_dx = 0;
        for (std::int64_t j = 0; j < n; ++j) {
          xhat[j] = (row[j] - mu) * rstd;
          dxhat[j] = static_cast<double>(grow[j]) * gamma[j];
          mean_d += dxhat[j];
          mean_dx += dxhat[j] * xhat[j];
          if (dg) (*dg)[j] += static_cast<T>(grow[j] * xhat[j]);
          if (dbeta) (*dbeta)[j] += grow[j];
        }
        if (dx) {
          mean_d /= static_cast<double>(n);
          mean_dx /= static_cast<double>(n);
          for (std::int64_t j = 0; j < n; ++j)
            (*dx)[i * n + j] = static_cast<T>(rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx));
        }
      }
      break;
    }
    case OpKind::Conv1d: {
      const auto t = in[0].dim(0), cin = in[0].dim(1);
      const auto k = in[1].dim(0), cout = in[1].dim(2);
      const auto tout = node.output_shape[0];
      CMapR<T> G(g.data(), tout, cout);
      auto x = in_data<T>(in[0]);
      if (want(1)) {
        MatR<T> cols = MatR<T>::Zero(tout, k * cin);
        for (std::int64_t o = 0; o < tout; ++o)
          for (std::int64_t j = 0; j < k; ++j) {
            const std::int64_t src = o * a.stride - a.pad_left + j;
            if (src < 0 || src >= t) continue;
            for (std::int64_t c = 0; c < cin; ++c) cols(o, j * cin + c) = x[src * cin + c];
          }
        MapR<T> dW(alloc(1).data(), k * cin, cout);
        dW.noalias() = cols.transpose() * G;
      }
      if (want(0)) {
        CMapR<T> W(in_data<T>(in[1]).data(), k * cin, cout);
        MatR<T> dcols = G * W.transpose();
        auto& dx = alloc(0);
        for (std::int64_t o = 0; o < tout; ++o)
          for (std::int64_t j = 0; j < k; ++j) {
            const std::int64_t src = o * a.stride - a.pad_left + j;
            if (src < 0 || src >= t) continue;
            for (std::int64_t c = 0; c < cin; ++c) dx[src * cin + c] += dcols(o, j * cin + c);
          }
      }
      break;
    }
    case OpKind::DepthwiseConv1d: {
      const auto t = in[0].dim(0), c = in[0].dim(1);
      const auto k = in[1].dim(0);
      const auto tout = node.output_shape[0];
      auto x = in_data<T>(in[0]);
      auto w = in_data<T>(in[1]);
      std::vector<T>* dx = want(0) ? &alloc(0) : nullptr;
      std::vector<T>* dw = want(1) ? &alloc(1) : nullptr;
      for (std::int64_t o = 0; o < tout; ++o) {
        const T* grow = g.data() + o * c;
        for (std::int64_t j = 0; j < k; ++j) {
          const std::int64_t src = o - a.pad_left + j;
          if (src < 0 || src >= t) continue;
          for (std::int64_t ch = 0; ch < c; ++ch) {
            if (dx) (*dx)[src * c + ch] += grow[ch] * w[j * c + ch];
            if (dw) (*dw)[j * c + ch] += grow[ch] * x[src * c + ch];
          }
        }
      }
      break;
    }
    case OpKind::Concat: {
      const auto m = node.output_shape[0], total = node.output_shape[1];
      std::int64_t offset = 0;
      for (std::size_t p = 0; p < in.size(); ++p) {
        const auto w = in[p].dim(1);
        if (want(p)) {
          auto& d = alloc(p);
          for (std::int64_t i = 0; i < m; ++i)
            std::copy_n(g.data() + i * total + offset, w, d.data() + i * w);
        }
        offset += w;
      }
      break;
    }
    case OpKind::Slice: {
      const auto n = in[0].dim(1);
      auto& d = alloc(0);
      if (a.axis == 0) {
        std::copy_n(g.data(), a.length * n, d.data() + a.begin * n);
      } else {
        const auto m = in[0].dim(0);
        for (std::int64_t i = 0; i < m; ++i)
          std::copy_n(g.data() + i * a.length, a.length, d.data() + i * n + a.begin);
      }
      break;
    }
    case OpKind::Transpose: {
      const auto m = in[0].dim(0), n = in[0].dim(1);
      CMapR<T> G(g.data(), n, m);
      MapR<T> dX(alloc(0).data(), m, n);
      dX = G.transpose();
      break;
    }
    case OpKind::Mean: {
      auto& d = alloc(0);
      const T v = static_cast<T>(static_cast<double>(g[0]) / static_cast<double>(d.size()));
      std::fill(d.begin(), d.end(), v);
      break;
    }
    case OpKind::CrossEntropy: {
      const auto m = in[0].dim(0), k = in[0].dim(1);
      auto x = in_data<T>(in[0]);
      auto& d = alloc(0);
      std::int64_t count = 0;
      for (auto l : a.labels) count += l >= 0;
      if (count == 0) break;
      const double coef = static_cast<double>(g[0]) / static_cast<double>(count);
      for (std::int64_t i = 0; i < m; ++i) {
        const auto label = a.labels[static_cast<std::size_t>(i)];
        if (label < 0) continue;
        const T* row = x.data() + i * k;
        T mx = row[0];
        for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double sum = 0;
        for (std::int64_t j = 0; j < k; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
        for (std::int64_t j = 0; j < k; ++j) {
          double p = std::exp(static_cast<double>(row[j] - mx)) / sum;
          if (j == label) p -= 1.0;
          d[i * k + j] = static_cast<T>(coef * p);
        }
      }
      break;
    }
  }
  return grads;
}

}  // namespace

std::string_view op_name(OpKind kind) { return kOpNames[static_cast<std::size_t>(kind)]; }

std::optional<OpKind> op_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kNumOpKinds; ++i)
    if (kOpNames[i] == name) return static_cast<OpKind>(i);
  return std::nullopt;
}

Shape infer_shape(OpKind kind, std::span<const Tensor> in, const OpAttrs& a) {
  for (const auto& t : in) {
    if (!t.defined()) shape_fail(kind, "undefined input tensor");
  }
  switch (kind) {
    case OpKind::MatMul: {
      expect_arity(kind, in, 2);
      expect_rank(kind, in[0], 2, "lhs");
      expect_rank(kind, in[1], 2, "rhs");
      if (in[0].dim(1) != in[1].dim(0)) {
        shape_fail(kind, fmt::format("inner dims differ: {} x {}", shape_str(in[0].shape()),
                                     shape_str(in[1].shape())));
      }
      return {in[0].dim(0), in[1].dim(1)};
    }
    case OpKind::BiasAdd:
      expect_arity(kind, in, 2);
      expect_rank(kind, in[0], 2, "input");
      expect_rank(kind, in[1], 1, "bias");
      if (in[1].dim(0) != in[0].dim(1)) {
        shape_fail(kind, fmt::format("bias {} does not match features of {}",
                                     shape_str(in[1].shape()), shape_str(in[0].shape())));
      }
      return in[0].shape();
    case OpKind::Add:
    case OpKind::Mul:
      expect_arity(kind, in, 2);
      if (in[0].shape() != in[1].shape()) {
        shape_fail(kind, fmt::format("operand shapes differ: {} vs {}", shape_str(in[0].shape()),
                                     shape_str(in[1].shape())));
      }
      return in[0].shape();
    case OpKind::Scale:
    case OpKind::Relu:
    case OpKind::Sigmoid:
    case OpKind::Swish:
      expect_arity(kind, in, 1);
      return in[0].shape();
    case OpKind::Glu:
      expect_arity(kind, in, 1);
      expect_rank(kind, in[0], 2, "input");
      if (in[0].dim(1) % 2 != 0) {
        shape_fail(kind, fmt::format("feature dim must be even, got {}", shape_str(in[0].shape())));
      }
      return {in[0].dim(0), in[0].dim(1) / 2};
    case OpKind::Softmax:
      expect_arity(kind, in, 1);
      expect_rank(kind, in[0], 2, "input");
      return in[0].shape();
    case OpKind::LayerNorm:
      expect_arity(kind, in, 3);
      expect_rank(kind, in[0], 2, "input");
      expect_rank(kind, in[1], 1, "gamma");
      expect_rank(kind, in[2], 1, "beta");
      if (in[1].dim(0) != in[0].dim(1) || in[2].dim(0) != in[0].dim(1)) {
        shape_fail(kind, fmt::format("gamma {} / beta {} do not match input {}",
                                     shape_str(in[1].shape()), shape_str(in[2].shape()),
                                     shape_str(in[0].shape())));
      }
      return in[0].shape();
    case OpKind::Conv1d: {
      expect_arity(kind, in, 2);
      expect_rank(kind, in[0], 2, "input");
      expect_rank(kind, in[1], 3, "weight");
      if (in[1].dim(1) != in[0].dim(1)) {
        shape_fail(kind, fmt::format("weight {} expects {} input channels, input is {}",
                                     shape_str(in[1].shape()), in[1].dim(1),
                                     shape_str(in[0].shape())));
      }
      if (a.stride < 1 || a.pad_left < 0 || a.pad_right < 0) {
        shape_fail(kind, "stride must be >= 1 and padding non-negative");
      }
      const auto span = in[0].dim(0) + a.pad_left + a.pad_right - in[1].dim(0);
      if (span < 0) {
        shape_fail(kind, fmt::format("sequence of length {} shorter than kernel {}",
                                     in[0].dim(0), in[1].dim(0)));
      }
      return {span / a.stride + 1, in[1].dim(2)};
    }
    case OpKind::DepthwiseConv1d: {
      expect_arity(kind, in, 2);
      expect_rank(kind, in[0], 2, "input");
      expect_rank(kind, in[1], 2, "weight");
      if (in[1].dim(1) != in[0].dim(1)) {
        shape_fail(kind, fmt::format("weight {} channels differ from input {}",
                                     shape_str(in[1].shape()), shape_str(in[0].shape())));
      }
      const auto span = in[0].dim(0) + a.pad_left + a.pad_right - in[1].dim(0);
      if (span < 0) {
        shape_fail(kind, fmt::format("sequence of length {} shorter than kernel {}",
                                     in[0].dim(0), in[1].dim(0)));
      }
      return {span + 1, in[0].dim(1)};
    }
    case OpKind::Concat: {
      if (in.empty()) shape_fail(kind, "needs at least one input");
      std::int64_t total = 0;
      for (const auto& t : in) {
        expect_rank(kind, t, 2, "part");
        if (t.dim(0) != in[0].dim(0)) {
          shape_fail(kind, fmt::format("row counts differ: {} vs {}", shape_str(in[0].shape()),
                                       shape_str(t.shape())));
        }
        total += t.dim(1);
      }
      return {in[0].dim(0), total};
    }
    case OpKind::Slice: {
      expect_arity(kind, in, 1);
      expect_rank(kind, in[0], 2, "input");
      if (a.axis != 0 && a.axis != 1) shape_fail(kind, fmt::format("axis {} invalid", a.axis));
      const auto extent = in[0].dim(a.axis);
      if (a.begin < 0 || a.length <= 0 || a.begin + a.length > extent) {
        shape_fail(kind, fmt::format("range [{}, {}) outside axis {} of {}", a.begin,
                                     a.begin + a.length, a.axis, shape_str(in[0].shape())));
      }
      Shape s = in[0].shape();
      s[static_cast<std::size_t>(a.axis)] = a.length;
      return s;
    }
    case OpKind::Transpose:
      expect_arity(kind, in, 1);
      expect_rank(kind, in[0], 2, "input");
      return {in[0].dim(1), in[0].dim(0)};
    case OpKind::Mean:
      expect_arity(kind, in, 1);
      return {};
    case OpKind::CrossEntropy: {
      expect_arity(kind, in, 1);
      expect_rank(kind, in[0], 2, "logits");
      if (static_cast<std::int64_t>(a.labels.size()) != in[0].dim(0)) {
        shape_fail(kind, fmt::format("{} labels for logits {}", a.labels.size(),
                                     shape_str(in[0].shape())));
      }
      for (auto l : a.labels) {
        if (l >= in[0].dim(1)) {
          shape_fail(kind, fmt::format("label {} out of range for {} classes", l, in[0].dim(1)));
        }
      }
      return {};
    }
  }
  shape_fail(kind, "unhandled op kind");
}

std::uint64_t forward_flops(OpKind kind, std::span<const Shape> in, const Shape& out) {
  const auto n = u(shape_numel(out));
  switch (kind) {
    case OpKind::MatMul: return 2 * u(in[0][0]) * u(in[0][1]) * u(in[1][1]);
    case OpKind::BiasAdd:
    case OpKind::Add:
    case OpKind::Mul:
    case OpKind::Scale:
    case OpKind::Relu: return n;
    case OpKind::Sigmoid: return 4 * n;
    case OpKind::Swish: return 5 * n;
    case OpKind::Glu: return 5 * n;
    case OpKind::Softmax: return 5 * n;
    case OpKind::LayerNorm: return 8 * n;
    case OpKind::Conv1d: return 2 * u(out[0]) * u(in[1][0]) * u(in[1][1]) * u(in[1][2]);
    case OpKind::DepthwiseConv1d: return 2 * u(out[0]) * u(in[1][0]) * u(in[1][1]);
    case OpKind::Concat:
    case OpKind::Slice:
    case OpKind::Transpose: return 0;
    case OpKind::Mean: return u(shape_numel(in[0]));
    case OpKind::CrossEntropy: return 5 * u(shape_numel(in[0]));
  }
  return 0;
}

std::uint64_t backward_flops(OpKind kind, std::size_t i, std::span<const Shape> in,
                             const Shape& out) {
  const auto n = u(shape_numel(out));
  switch (kind) {
    case OpKind::MatMul: return 2 * u(in[0][0]) * u(in[0][1]) * u(in[1][1]);
    case OpKind::BiasAdd: return n;
    case OpKind::Add:
    case OpKind::Mul:
    case OpKind::Scale:
    case OpKind::Relu: return n;
    case OpKind::Sigmoid: return 3 * n;
    case OpKind::Swish: return 6 * n;
    case OpKind::Glu: return 6 * n;
    case OpKind::Softmax: return 4 * n;
    case OpKind::LayerNorm: return (i == 0 ? 10 : i == 1 ? 2 : 1) * n;
    case OpKind::Conv1d: return 2 * u(out[0]) * u(in[1][0]) * u(in[1][1]) * u(in[1][2]);
    case OpKind::DepthwiseConv1d: return 2 * u(out[0]) * u(in[1][0]) * u(in[1][1]);
    case OpKind::Concat:
    case OpKind::Slice:
    case OpKind::Transpose: return 0;
    case OpKind::Mean: return u(shape_numel(in[0]));
    case OpKind::CrossEntropy: return 3 * u(shape_numel(in[0]));
  }
  return 0;
}

Tensor apply_primitive(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs) {
  Shape out_shape = infer_shape(kind, inputs, attrs);
  const DType dtype = inputs.front().dtype();
  bool any_grad = false;
  for (const auto& t : inputs) {
    if (t.dtype() != dtype) {
      shape_fail(kind, fmt::format("mixed dtypes {} and {}", dtype_name(dtype),
                                   dtype_name(t.dtype())));
    }
    any_grad = any_grad || t.requires_grad();
  }
  any_grad = any_grad && grad_enabled();

  Buffer data = visit_dtype(dtype, [&]<class T>() {
    return forward_kernel<T>(kind, inputs, attrs, out_shape);
  });

  auto impl = std::make_shared<TensorImpl>();
  impl->dtype = dtype;
  impl->shape = out_shape;
  impl->data = std::make_shared<Buffer>(std::move(data));

  OpCounter* counter = active_counter();
  if (any_grad || counter) {
    std::vector<Shape> in_shapes;
    if (counter) {
      in_shapes.reserve(inputs.size());
      for (const auto& t : inputs) in_shapes.push_back(t.shape());
      counter->record_forward(kind, current_scope(), forward_flops(kind, in_shapes, out_shape),
                              any_grad, u(shape_numel(out_shape)));
    }
  }
  if (any_grad) {
    auto node = std::make_shared<Node>();
    node->index = next_node_index();
    node->kind = kind;
    node->scope = current_scope();
    node->inputs.assign(inputs.begin(), inputs.end());
    node->needs_grad.reserve(inputs.size());
    for (const auto& t : inputs) node->needs_grad.push_back(t.requires_grad());
    node->output = impl->data;
    node->output_shape = out_shape;
    node->attrs = attrs;
    impl->node = std::move(node);
    impl->requires_grad = true;
  }
  return Tensor(std::move(impl));
}

Tensor apply_primitive(std::string_view kind, std::span<const Tensor> inputs,
                       const OpAttrs& attrs) {
  auto k = op_from_name(kind);
  if (!k) throw std::invalid_argument(fmt::format("unknown op kind '{}'", kind));
  return apply_primitive(*k, inputs, attrs);
}

namespace detail {

std::vector<std::optional<Buffer>> backward_primitive(const Node& node, const Buffer& grad_out) {
  return std::visit([&](const auto& g) { return backward_kernel(node, g); }, grad_out);
}

}  // namespace detail

// ------------------------------------------------------------ convenience

namespace {
Tensor op1(OpKind kind, const Tensor& x, const OpAttrs& attrs = {}) {
  const Tensor in[] = {x};
  return apply_primitive(kind, in, attrs);
}
Tensor op2(OpKind kind, const Tensor& x, const Tensor& y, const OpAttrs& attrs = {}) {
  const Tensor in[] = {x, y};
  return apply_primitive(kind, in, attrs);
}
}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) { return op2(OpKind::MatMul, a, b); }
Tensor bias_add(const Tensor& x, const Tensor& b) { return op2(OpKind::BiasAdd, x, b); }
Tensor add(const Tensor& a, const Tensor& b) { return op2(OpKind::Add, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return op2(OpKind::Mul, a, b); }
Tensor scale(const Tensor& x, double factor) {
  OpAttrs attrs;
  attrs.scalar = factor;
  return op1(OpKind::Scale, x, attrs);
}
Tensor relu(const Tensor& x) { return op1(OpKind::Relu, x); }
Tensor sigmoid(const Tensor& x) { return op1(OpKind::Sigmoid, x); }
Tensor swish(const Tensor& x) { return op1(OpKind::Swish, x); }
Tensor glu(const Tensor& x) { return op1(OpKind::Glu, x); }
Tensor softmax(const Tensor& x) { return op1(OpKind::Softmax, x); }

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  OpAttrs attrs;
  attrs.scalar = eps;
  const Tensor in[] = {x, gamma, beta};
  return apply_primitive(OpKind::LayerNorm, in, attrs);
}

Tensor conv1d(const Tensor& x, const Tensor& w, int stride, int pad_left, int pad_right) {
  OpAttrs attrs;
  attrs.stride = stride;
  attrs.pad_left = pad_left;
  attrs.pad_right = pad_right;
  return op2(OpKind::Conv1d, x, w, attrs);
}

Tensor depthwise_conv1d(const Tensor& x, const Tensor& w, int pad_left, int pad_right) {
  OpAttrs attrs;
  attrs.pad_left = pad_left;
  attrs.pad_right = pad_right;
  return op2(OpKind::DepthwiseConv1d, x, w, attrs);
}

Tensor concat(std::span<const Tensor> parts) { return apply_primitive(OpKind::Concat, parts); }

Tensor slice(const Tensor& x, int axis, std::int64_t begin, std::int64_t length) {
  OpAttrs attrs;
  attrs.axis = axis;
  attrs.begin = begin;
  attrs.length = length;
  return op1(OpKind::Slice, x, attrs);
}

Tensor transpose(const Tensor& x) { return op1(OpKind::Transpose, x); }
Tensor mean(const Tensor& x) { return op1(OpKind::Mean, x); }

Tensor cross_entropy(const Tensor& logits, std::vector<std::int32_t> labels) {
  OpAttrs attrs;
  attrs.labels = std::move(labels);
  return op1(OpKind::CrossEntropy, logits, attrs);
}

}  // namespace hfl
