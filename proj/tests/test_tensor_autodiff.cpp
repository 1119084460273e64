#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fmt/format.h>
#include <functional>
#include <random>

#include "hfl/autodiff.hpp"
#include "hfl/gradcheck.hpp"
#include "hfl/op_counter.hpp"
#include "hfl/ops.hpp"
#include "hfl/parameter.hpp"

using namespace hfl;

namespace {

Tensor randn(Shape shape, Rng& rng, DType dtype = DType::f64, double away_from_zero = 0.0) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) {
    x = n(rng);
    if (away_from_zero > 0) x += x < 0 ? -away_from_zero : away_from_zero;
  }
  return Tensor::from_values(std::move(shape), v, dtype);
}

std::int64_t rand_dim(Rng& rng, std::int64_t lo = 1, std::int64_t hi = 16) {
  return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng);
}

// Scalar probe of an op output: mean(out * R) with a fixed random R.
Tensor probe(const Tensor& out, const Tensor& r) { return mean(mul(out, r)); }

struct PrimitiveCase {
  const char* name;
  std::function<Tensor(const std::vector<Tensor>&)> op;
  std::vector<Shape> shapes;
  double away_from_zero = 0.0;
};

double check_primitive(const PrimitiveCase& c, Rng& rng) {
  ParameterStore store;
  std::vector<Parameter*> params;
  for (std::size_t i = 0; i < c.shapes.size(); ++i)
    params.push_back(&store.add(fmt::format("in{}", i), randn(c.shapes[i], rng, DType::f64, c.away_from_zero)));
  std::vector<Tensor> vars;
  for (auto* p : params) vars.push_back(p->var());
  const Tensor r = randn(c.op(vars).shape(), rng);
  auto loss = [&] {
    std::vector<Tensor> v;
    for (auto* p : params) v.push_back(p->var());
    return probe(c.op(v), r);
  };
  return finite_difference_check(loss, params, 1e-6, 64, 7).max_rel_error;
}

}  // namespace

TEST_CASE("concat joins along the feature axis") {
  const Tensor a = Tensor::zeros({7, 512});
  const Tensor b = Tensor::zeros({7, 512});
  const Tensor parts[] = {a, b};
  CHECK(concat(parts).shape() == Shape{7, 1024});
}

TEST_CASE("relu clamps negatives") {
  const double v[] = {-1, 0, 2};
  CHECK(relu(Tensor::from_values({3}, v)).to_vector() == std::vector<double>{0, 0, 2});
}

TEST_CASE("matmul flop bookkeeping") {
  // Oracle: one multiply-add per (i, j, p) triple, 2 flops each.
  auto triple_loop = [](int m, int k, int n) {
    std::uint64_t f = 0;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        for (int p = 0; p < k; ++p) f += 2;
    return f;
  };
  Rng rng(1);
  OpCounter counter;
  CounterGuard guard(counter);
  Parameter a("a", randn({3, 4}, rng)), b("b", randn({4, 5}, rng));

  SUBCASE("forward") {
    NoGradGuard ng;
    const Tensor out = matmul(a.var(), b.var());
    CHECK(out.shape() == Shape{3, 5});
    CHECK(counter.forward_flops() == triple_loop(3, 4, 5));
    CHECK(counter.forward_flops() == 120);
    CHECK(counter.forward_ops(OpKind::MatMul) == 1);
  }
  SUBCASE("backward with both inputs differentiable") {
    const Tensor out = matmul(a.var(), b.var());
    counter.reset();
    backward(mean(out));
    // mean's backward touches each of the 3x5 outputs once.
    CHECK(counter.backward_flops() - 3 * 5 == 4u * 3 * 4 * 5);
    CHECK(counter.backward_ops(OpKind::MatMul) == 1);
  }
  SUBCASE("backward with one input differentiable") {
    b.set_trainable(false);
    const Tensor out = matmul(a.var(), b.var());
    counter.reset();
    backward(mean(out));
    CHECK(counter.backward_flops() - 3 * 5 == 2u * 3 * 4 * 5);
  }
}

TEST_CASE("shape errors name the op and the dims") {
  const Tensor a = Tensor::zeros({3, 4}), b = Tensor::zeros({5, 2});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find('4') != std::string::npos);
    CHECK(msg.find('5') != std::string::npos);
  }
  CHECK_THROWS_AS(add(Tensor::zeros({2, 2}), Tensor::zeros({2, 3})), ShapeError);
  CHECK_THROWS_AS(bias_add(Tensor::zeros({2, 2}), Tensor::zeros({3})), ShapeError);
  CHECK_THROWS_AS(add(Tensor::zeros({2}), Tensor::zeros({2}, DType::f64)), std::invalid_argument);
}

TEST_CASE("unknown op kind is rejected") {
  const Tensor a = Tensor::zeros({2, 2});
  const Tensor in[] = {a};
  CHECK_THROWS_AS(apply_primitive("frobnicate", in), std::invalid_argument);
  CHECK(apply_primitive("relu", in).shape() == Shape{2, 2});
}

TEST_CASE("grad of sum(w*x) is x") {
  Rng rng(3);
  Parameter w("w", randn({6}, rng));
  const Tensor x = randn({6}, rng);
  const auto grads = backward(scale(mean(mul(w.var(), x)), 6.0));
  REQUIRE(grads.size() == 1);
  const auto g = grads.at("w").to_vector();
  const auto xv = x.to_vector();
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == doctest::Approx(xv[i]).epsilon(1e-12));
}

TEST_CASE("backward rejects non-scalar losses and freed graphs") {
  Rng rng(4);
  Parameter w("w", randn({2, 2}, rng));
  CHECK_THROWS_AS(backward(relu(w.var())), ShapeError);
  const Tensor loss = mean(relu(w.var()));
  backward(loss);
  CHECK_THROWS_AS(backward(loss), std::logic_error);

  const Tensor kept = mean(mul(w.var(), w.var()));
  const auto g1 = backward(kept, true);
  const auto g2 = backward(kept);
  CHECK(g1.at("w").bitwise_equal(g2.at("w")));
}

TEST_CASE("frozen-only subgraphs are pruned from backward") {
  Rng rng(5);
  OpCounter counter;
  CounterGuard guard(counter);
  Parameter frozen("f", randn({4, 4}, rng), false);
  Parameter head("h", randn({4, 3}, rng));
  const Tensor x = randn({5, 4}, rng);
  Tensor features;
  {
    ScopeGuard s("body");
    features = swish(matmul(x, frozen.var()));
  }
  Tensor out;
  {
    ScopeGuard s("top");
    out = mean(matmul(features, head.var()));
  }
  const auto grads = backward(out);
  CHECK(grads.size() == 1);
  CHECK(grads.contains("h"));
  CHECK(counter.under("body").backward_ops == 0);
  CHECK(counter.under("body").retained_elements == 0);
  CHECK(counter.under("top").backward_ops > 0);
}

TEST_CASE("every primitive passes a float64 gradient check") {
  Rng rng(11);
  for (int trial = 0; trial < 3; ++trial) {
    const auto m = rand_dim(rng), k = rand_dim(rng), n = rand_dim(rng);
    const auto c = rand_dim(rng);
    const auto t = rand_dim(rng, 4, 16), kern = rand_dim(rng, 1, 4);
    const auto cin = rand_dim(rng, 1, 6), cout = rand_dim(rng, 1, 6);
    const auto begin = rand_dim(rng, 0, n - 1);
    const auto len = rand_dim(rng, 1, n - begin);
    std::vector<std::int32_t> labels(static_cast<std::size_t>(m));
    for (auto& l : labels) l = static_cast<std::int32_t>(rand_dim(rng, -1, n - 1));
    labels[0] = 0;
    const std::vector<PrimitiveCase> cases = {
        {"matmul", [](auto& v) { return matmul(v[0], v[1]); }, {{m, k}, {k, n}}},
        {"bias_add", [](auto& v) { return bias_add(v[0], v[1]); }, {{m, n}, {n}}},
        {"add", [](auto& v) { return add(v[0], v[1]); }, {{m, n}, {m, n}}},
        {"mul", [](auto& v) { return mul(v[0], v[1]); }, {{m, n}, {m, n}}},
        {"scale", [](auto& v) { return scale(v[0], -1.7); }, {{m, n}}},
        {"relu", [](auto& v) { return relu(v[0]); }, {{m, n}}, 0.05},
        {"sigmoid", [](auto& v) { return sigmoid(v[0]); }, {{m, n}}},
        {"swish", [](auto& v) { return swish(v[0]); }, {{m, n}}},
        {"glu", [](auto& v) { return glu(v[0]); }, {{m, 2 * c}}},
        {"softmax", [](auto& v) { return softmax(v[0]); }, {{m, n}}},
        {"layer_norm", [](auto& v) { return layer_norm(v[0], v[1], v[2]); }, {{m, n + 1}, {n + 1}, {n + 1}}},
        {"conv1d", [&](auto& v) { return conv1d(v[0], v[1], 2, 1, 0); }, {{t, cin}, {kern, cin, cout}}},
        {"depthwise_conv1d", [&](auto& v) { return depthwise_conv1d(v[0], v[1], kern - 1, 0); },
         {{t, c}, {kern, c}}},
        {"concat", [](auto& v) { return concat(std::span<const Tensor>(v)); }, {{m, n}, {m, k}, {m, c}}},
        {"slice", [&](auto& v) { return slice(v[0], 1, begin, len); }, {{m, n}}},
        {"transpose", [](auto& v) { return transpose(v[0]); }, {{m, n}}},
        {"mean", [](auto& v) { return mean(v[0]); }, {{m, n}}},
        {"cross_entropy", [&](auto& v) { return cross_entropy(v[0], labels); }, {{m, n}}},
    };
    for (const auto& pc : cases) {
      CAPTURE(pc.name);
      CAPTURE(trial);
      CHECK(check_primitive(pc, rng) < 1e-6);
    }
  }
}

TEST_CASE("finite_difference_check on a quadratic") {
  const double w0[] = {1, 2};
  Parameter w("w", Tensor::from_values({2}, w0, DType::f64));
  auto loss = [&] { return scale(mean(mul(w.var(), w.var())), 2.0); };
  Parameter* ps[] = {&w};
  CHECK(finite_difference_check(loss, ps).max_rel_error < 1e-8);
  const auto g = backward(loss()).at("w").to_vector();
  CHECK(g[0] == doctest::Approx(2.0));
  CHECK(g[1] == doctest::Approx(4.0));
}

TEST_CASE("finite_difference_check catches a wrong backward") {
  const double w0[] = {1, 2};
  Parameter w("w", Tensor::from_values({2}, w0, DType::f64));
  Parameter* ps[] = {&w};
  // d/dw of w*detach(w) misses half the true gradient.
  auto half = [&] { return mean(mul(w.var(), w.var().detach())); };
  CHECK(finite_difference_check(half, ps).max_rel_error == doctest::Approx(1.0 / 3).epsilon(1e-6));
  auto tiny = [&] { return scale(mean(mul(w.var(), w.var().detach())), 1e-6); };
  CHECK(finite_difference_check(tiny, ps).max_rel_error > 1e-3);
}

TEST_CASE("finite_difference_check errors") {
  const double w0[] = {1, 2};
  Parameter w("w", Tensor::from_values({2}, w0, DType::f64));
  Parameter* ps[] = {&w};
  auto nan_loss = [&] { return scale(mean(w.var()), std::nan("")); };
  CHECK_THROWS_AS(finite_difference_check(nan_loss, ps), std::runtime_error);
  Parameter w32("w32", Tensor::from_values({2}, w0, DType::f32));
  Parameter* ps32[] = {&w32};
  CHECK_THROWS_AS(finite_difference_check([&] { return mean(w32.var()); }, ps32), std::invalid_argument);
}

TEST_CASE("glob patterns and set_trainable") {
  CHECK(glob_match("encoder/**", "encoder/layer_3/ffn1/fc1/weight"));
  CHECK(glob_match("**/bias", "encoder/layer_3/ffn1/fc1/bias"));
  CHECK_FALSE(glob_match("**/bias", "encoder/layer_3/ffn1/fc1/weight"));
  CHECK(glob_match("encoder/layer_?/**", "encoder/layer_3/x"));
  CHECK_FALSE(glob_match("encoder/layer_?/**", "encoder/layer_23/x"));
  CHECK(glob_match("encoder/layer_23/**", "encoder/layer_23/x"));
  CHECK_THROWS_AS(glob_match("encoder//x", "encoder/x"), ConfigError);
  CHECK_THROWS_AS(glob_match("encoder/a**", "encoder/ab"), ConfigError);

  ParameterStore s;
  for (int l = 0; l < 24; ++l) {
    s.add(fmt::format("encoder/layer_{}/w", l), Tensor::zeros({2}));
    s.add(fmt::format("encoder/layer_{}/bias", l), Tensor::zeros({2}));
  }
  s.add("head/w", Tensor::zeros({2}));
  CHECK(set_trainable(s, "encoder/**", false) == 48);
  CHECK(s.trainable().size() == 1);
  CHECK(set_trainable(s, "encoder/layer_23/**", true) == 2);
  for (auto* p : s.trainable()) CHECK((p->name().starts_with("encoder/layer_23/") || p->name() == "head/w"));
  set_trainable(s, "encoder/**", false);
  CHECK(set_trainable(s, "**/bias", true) == 24);
  CHECK(set_trainable(s, "nothing/**", true) == 0);
}

TEST_CASE("identical seeds give bitwise identical float64 losses") {
  auto run = [] {
    Rng rng(42);
    Parameter w("w", randn({8, 8}, rng)), v("v", randn({8, 3}, rng));
    const Tensor x = randn({10, 8}, rng);
    std::vector<double> losses;
    for (int step = 0; step < 5; ++step) {
      const Tensor loss = cross_entropy(matmul(swish(matmul(x, w.var())), v.var()), {0, 1, 2, 0, 1, 2, 0, 1, 2, 0});
      losses.push_back(loss.item());
      const auto g = backward(loss);
      for (auto* p : {&w, &v}) {
        auto gv = g.at(p->name());
        for (std::int64_t i = 0; i < p->numel(); ++i) p->value().set(i, p->value().at(i) - 0.1 * gv.at(i));
      }
    }
    return losses;
  };
  const auto a = run(), b = run();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::memcmp(&a[i], &b[i], sizeof(double)) == 0);
  CHECK(a.back() < a.front());
}
