// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lmoe/common/error.hpp"
#include "lmoe/numerics/gemm.hpp"
#include "lmoe/numerics/grad_check.hpp"
#include "lmoe/numerics/ops.hpp"

namespace lmoe {
namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(u(rng));
  return Tensor<T>(std::move(shape), std::move(v));
}

template <typename T>
Parameter<T> random_param(const std::string& name, Shape shape, std::mt19937_64& rng) {
  return Parameter<T>(name, random_tensor<T>(std::move(shape), rng));
}

TEST(Tensor, RejectsMismatchedShape) {
  EXPECT_THROW(Tensor<float>(Shape{2, 3}, std::vector<float>(5)), ShapeError);
  Tensor<double> ok(Shape{2, 3}, std::vector<double>(6, 1.0));
  EXPECT_EQ(ok.rows(), 2u);
  EXPECT_EQ(ok.cols(), 3u);
}

TEST(Softmax, UniformInput) {
  auto y = ops::softmax(Var<double>::constant(Tensor<double>(Shape{1, 4}, {0, 0, 0, 0})));
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, HandValues) {
  auto y = ops::softmax(Var<double>::constant(Tensor<double>(Shape{1, 4}, {2.0, 1.0, 0.5, -1.0})));
  // e^2, e^1, e^0.5, e^-1 over their sum 12.1236
  const double expect[] = {0.6095, 0.2242, 0.1360, 0.0303};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(y.values()[i], expect[i], 1e-4);
  // successive ratios are e^1, e^0.5, e^1.5
  EXPECT_NEAR(y.values()[0] / y.values()[1], std::exp(1.0), 1e-12);
  EXPECT_NEAR(y.values()[1] / y.values()[2], std::exp(0.5), 1e-12);
  EXPECT_NEAR(y.values()[2] / y.values()[3], std::exp(1.5), 1e-12);
}

TEST(Softmax, StableForLargeMagnitudes) {
  std::mt19937_64 rng(5);
  auto x = random_tensor<float>(Shape{16, 33}, rng, -1e4, 1e4);
  auto y = ops::softmax(Var<float>::constant(x));
  for (std::size_t r = 0; r < 16; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 33; ++c) {
      const double v = y.values()[r * 33 + c];
      ASSERT_TRUE(std::isfinite(v));
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Matmul, IdentityLeavesOperand) {
  std::mt19937_64 rng(1);
  auto a = random_tensor<double>(Shape{3, 3}, rng);
  Tensor<double> eye(Shape{3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto c = ops::matmul(Var<double>::constant(eye), Var<double>::constant(a));
  EXPECT_EQ(c.values(), a.values);
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  auto a = Var<float>::constant(Tensor<float>::zeros({2, 3}));
  auto b = Var<float>::constant(Tensor<float>::zeros({4, 5}));
  try {
    ops::matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos) << msg;
    EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("4x5"), std::string::npos) << msg;
  }
}

// Naive triple loop in long double.
template <typename T>
std::vector<T> reference_gemm(bool ta, bool tb, std::size_t n, std::size_t m, std::size_t k, const std::vector<T>& a,
                              const std::vector<T>& b, const std::vector<T>& c0, bool acc) {
  std::vector<T> c(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      long double s = acc ? c0[i * m + j] : 0.0L;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = ta ? a[p * n + i] : a[i * k + p];
        const T bv = tb ? b[j * k + p] : b[p * m + j];
        s += static_cast<long double>(av) * bv;
      }
      c[i * m + j] = static_cast<T>(s);
    }
  }
  return c;
}

template <typename T>
void check_gemm_against_reference(double tol) {
  std::mt19937_64 rng(42);
  const std::size_t dims[][3] = {{1, 1, 1}, {7, 5, 3}, {13, 70, 9}, {64, 64, 64}, {6, 129, 33}, {37, 17, 130}};
  for (const auto& d : dims) {
    for (int ta = 0; ta < 2; ++ta) {
      for (int tb = 0; tb < 2; ++tb) {
        for (int acc = 0; acc < 2; ++acc) {
          const std::size_t n = d[0], m = d[1], k = d[2];
          auto a = random_tensor<T>({n * k}, rng).values;
          auto b = random_tensor<T>({k * m}, rng).values;
          auto c = random_tensor<T>({n * m}, rng).values;
          auto want = reference_gemm(ta, tb, n, m, k, a, b, c, acc);
          kernels::gemm<T>(ta, tb, n, m, k, a.data(), ta ? n : k, b.data(), tb ? k : m, c.data(), m, acc);
          for (std::size_t i = 0; i < n * m; ++i)
            ASSERT_NEAR(c[i], want[i], tol) << "n=" << n << " m=" << m << " k=" << k << " ta=" << ta << " tb=" << tb;
        }
      }
    }
  }
}

TEST(Gemm, MatchesReferenceDouble) { check_gemm_against_reference<double>(1e-12); }
TEST(Gemm, MatchesReferenceFloat) { check_gemm_against_reference<float>(1e-4); }

TEST(Gemm, RepeatedCallsAreBitwiseIdentical) {
  std::mt19937_64 rng(3);
  auto a = random_tensor<float>({50 * 40}, rng).values;
  auto b = random_tensor<float>({40 * 30}, rng).values;
  std::vector<float> c1(50 * 30), c2(50 * 30);
  kernels::gemm<float>(false, true, 50, 30, 40, a.data(), 40, b.data(), 40, c1.data(), 30, false);
  kernels::gemm<float>(false, true, 50, 30, 40, a.data(), 40, b.data(), 40, c2.data(), 30, false);
  EXPECT_EQ(c1, c2);
}

TEST(Backward, SumGivesOnes) {
  auto p = Var<double>::leaf(Tensor<double>(Shape{2, 3}, {1, 2, 3, 4, 5, 6}));
  backward(ops::sum(p));
  for (double g : p.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, ConstantLossGivesZeros) {
  auto p = Var<double>::leaf(Tensor<double>(Shape{3}, {1, 2, 3}));
  p.tensor().zero_grad();
  auto c = Var<double>::constant(Tensor<double>::scalar(4.0));
  backward(ops::sum(c));
  for (double g : p.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, TwoConsumersAccumulate) {
  auto p = Var<double>::leaf(Tensor<double>(Shape{2}, {1.5, -2.0}));
  // loss = sum(p) + sum(p * p) → grad = 1 + 2p
  auto loss = ops::add(ops::sum(p), ops::sum(ops::mul(p, p)));
  backward(loss);
  EXPECT_DOUBLE_EQ(p.grad()[0], 1.0 + 3.0);
  EXPECT_DOUBLE_EQ(p.grad()[1], 1.0 - 4.0);
}

TEST(Backward, NonScalarLossThrows) {
  auto p = Var<double>::leaf(Tensor<double>(Shape{2}, {1, 2}));
  EXPECT_THROW(backward(ops::scale(p, 2.0)), ShapeError);
}

TEST(Backward, VisitsEachNodeOnce) {
  auto p = Var<double>::leaf(Tensor<double>(Shape{2}, {1, 2}));
  auto q = ops::mul(p, p);
  auto loss = ops::sum(ops::add(q, q));
  EXPECT_EQ(topological_order(loss).size(), 4u);  // p, q, add, sum
  EXPECT_EQ(backward(loss), 4u);
}

// Each primitive against central differences.
template <typename T>
void expect_grad_ok(const std::function<Var<T>()>& fn, const std::vector<Parameter<T>*>& ps, double tol) {
  // float needs a wider step to stay above rounding noise
  const double step = std::is_same_v<T, float> ? 1e-2 : 1e-4;
  auto rep = grad_check<T>(fn, ps, tol, step);
  EXPECT_TRUE(rep.passed) << "worst " << rep.worst << " rel " << rep.max_rel_error;
}

template <typename T>
void check_primitives(double tol) {
  std::mt19937_64 rng(11);
  auto a = random_param<T>("a", {4, 5}, rng);
  auto b = random_param<T>("b", {5, 3}, rng);
  auto c = random_param<T>("c", {4, 5}, rng);
  auto bt = random_param<T>("bt", {3, 5}, rng);
  auto g = random_param<T>("g", {5}, rng);
  auto be = random_param<T>("be", {5}, rng);
  const std::vector<int> tgt = {0, 4, 2, 1};
  auto w = random_tensor<T>({4, 3}, rng);
  auto weighted = [&](const Var<T>& x) { return ops::sum(ops::mul(x, Var<T>::constant(w))); };
  const auto w45 = random_tensor<T>({4, 5}, rng);
  auto dot45 = [&](const Var<T>& x) { return ops::sum(ops::mul(x, Var<T>::constant(w45))); };

  expect_grad_ok<T>([&] { return weighted(ops::matmul(a.var, b.var)); }, {&a, &b}, tol);
  expect_grad_ok<T>([&] { return weighted(ops::matmul_nt(a.var, bt.var)); }, {&a, &bt}, tol);
  expect_grad_ok<T>([&] { return dot45(ops::add(a.var, c.var)); }, {&a, &c}, tol);
  expect_grad_ok<T>([&] { return dot45(ops::add(a.var, g.var)); }, {&a, &g}, tol);
  expect_grad_ok<T>([&] { return dot45(ops::mul(a.var, c.var)); }, {&a, &c}, tol);
  expect_grad_ok<T>([&] { return dot45(ops::gelu(a.var)); }, {&a}, tol);
  expect_grad_ok<T>([&] { return dot45(ops::softmax(a.var)); }, {&a}, tol);
  expect_grad_ok<T>([&] { return dot45(ops::log_softmax(a.var)); }, {&a}, tol);
  expect_grad_ok<T>([&] { return dot45(ops::layer_norm(a.var, g.var, be.var)); }, {&a, &g, &be}, tol);
  expect_grad_ok<T>([&] { return ops::cross_entropy(a.var, tgt); }, {&a}, tol);
  expect_grad_ok<T>([&] { return ops::mean(ops::mul(a.var, a.var)); }, {&a}, tol);
  expect_grad_ok<T>([&] { return ops::sum(ops::mean_rows(ops::mul(a.var, c.var))); }, {&a, &c}, tol);
  expect_grad_ok<T>([&] { return ops::squared_distance(a.var, c.tensor()); }, {&a}, tol);
  expect_grad_ok<T>(
      [&] { return dot45(ops::concat_rows<T>({ops::slice_rows(a.var, 2, 4), ops::slice_rows(c.var, 0, 2)})); },
      {&a, &c}, tol);
  const std::vector<int> ids = {3, 0, 3, 1};
  expect_grad_ok<T>([&] { return dot45(ops::embedding(c.var, ids)); }, {&c}, tol);
  auto probs = ops::softmax(Var<T>::constant(random_tensor<T>({4, 5}, rng)));
  expect_grad_ok<T>([&] { return ops::soft_cross_entropy(a.var, probs.tensor()); }, {&a}, tol);
}

TEST(GradCheck, PrimitivesDouble) { check_primitives<double>(1e-5); }
TEST(GradCheck, PrimitivesFloat) { check_primitives<float>(1e-3); }

TEST(GradCheck, CausalAttention) {
  std::mt19937_64 rng(2);
  const std::size_t batch = 2, seq = 5, heads = 2, dh = 3;
  auto q = random_param<double>("q", {batch * seq, heads * dh}, rng);
  auto k = random_param<double>("k", {batch * seq, heads * dh}, rng);
  auto v = random_param<double>("v", {batch * seq, heads * dh}, rng);
  auto w = random_tensor<double>({batch * seq, heads * dh}, rng);
  auto rep = grad_check<double>(
      [&] { return ops::sum(ops::mul(ops::causal_attention(q.var, k.var, v.var, batch, seq, heads), Var<double>::constant(w))); },
      {&q, &k, &v}, 1e-5);
  EXPECT_TRUE(rep.passed) << rep.worst << " " << rep.max_rel_error;
}

TEST(GradCheck, TwoLayerMlpCrossEntropy) {
  std::mt19937_64 rng(9);
  auto w1 = random_param<double>("w1", {6, 10}, rng);
  auto b1 = random_param<double>("b1", {10}, rng);
  auto w2 = random_param<double>("w2", {10, 8}, rng);
  auto x = Var<double>::constant(random_tensor<double>({5, 6}, rng));
  const std::vector<int> tgt = {1, 7, 0, 3, 3};
  auto rep = grad_check<double>(
      [&] { return ops::cross_entropy(ops::matmul(ops::gelu(ops::add(ops::matmul(x, w1.var), b1.var)), w2.var), tgt); },
      {&w1, &b1, &w2}, 1e-5);
  EXPECT_TRUE(rep.passed) << rep.worst << " " << rep.max_rel_error;
}

TEST(GradCheck, LinearRegressionIsExact) {
  std::mt19937_64 rng(4);
  auto w = random_param<double>("w", {3, 1}, rng);
  auto x = Var<double>::constant(random_tensor<double>({8, 3}, rng));
  auto y = random_tensor<double>({8, 1}, rng);
  auto rep = grad_check<double>([&] { return ops::squared_distance(ops::matmul(x, w.var), y); }, {&w}, 1e-6);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

TEST(GradCheck, CorruptedBackwardFails) {
  std::mt19937_64 rng(4);
  auto p = random_param<double>("p", {4}, rng);
  auto bad_square = [](const Var<double>& x) {
    Tensor<double> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out.values[i] = x.values()[i] * x.values()[i];
    return make_op<double>("bad_square", std::move(out), {x}, [](Node<double>& n) {
      auto& in = n.inputs[0]->tensor;
      auto& g = in.grad_slot();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += 3.0 * in.values[i] * n.tensor.grad[i];  // should be 2x
    });
  };
  auto rep = grad_check<double>([&] { return ops::sum(bad_square(p.var)); }, {&p}, 1e-5);
  EXPECT_FALSE(rep.passed);
  EXPECT_EQ(rep.worst, "p");
}

TEST(GradCheck, NonFiniteGradientNamesParameter) {
  auto p = Parameter<double>("weird", Tensor<double>(Shape{2}, {1.0, 2.0}));
  auto nan_grad = [](const Var<double>& x) {
    return make_op<double>("nan_grad", Tensor<double>(x.shape(), x.values()), {x}, [](Node<double>& n) {
      for (auto& g : n.inputs[0]->tensor.grad_slot()) g = std::nan("");
    });
  };
  try {
    grad_check<double>([&] { return ops::sum(nan_grad(p.var)); }, {&p}, 1e-5);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("weird"), std::string::npos) << e.what();
  }
}

TEST(Determinism, OpsAreBitwiseRepeatable) {
  std::mt19937_64 rng(8);
  auto a = random_tensor<float>({32, 48}, rng);
  auto b = random_tensor<float>({48, 40}, rng);
  auto run = [&] {
    auto x = ops::gelu(ops::matmul(Var<float>::constant(a), Var<float>::constant(b)));
    return ops::layer_norm(x, Var<float>::constant(Tensor<float>(Shape{40}, std::vector<float>(40, 1.0f))),
                           Var<float>::constant(Tensor<float>::zeros({40})))
        .values();
  };
  EXPECT_EQ(run(), run());
}

TEST(NoGrad, RecordsNoInputs) {
  auto p = Var<double>::leaf(Tensor<double>(Shape{2}, {1, 2}));
  NoGradGuard guard;
  auto y = ops::mul(p, p);
  EXPECT_TRUE(y.node()->inputs.empty());
}

}  // namespace
}  // namespace lmoe
