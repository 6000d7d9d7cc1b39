#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "trojanlens/autodiff.hpp"

namespace trojanlens {
namespace {

using testing::max_gradient_error;
using testing::random_projection;
using testing::random_tensor;

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor c = Tensor::matrix(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tape tape;
  const Tensor m = Tensor::from_rows({{1.5, -2.0}, {0.25, 7.0}});
  const Var out = matmul(tape.constant(Tensor::from_rows({{1, 0}, {0, 1}})), tape.constant(m));
  EXPECT_EQ(out.value(), m);
}

TEST(Matmul, HandCheckedProduct) {
  Tape tape;
  const Var out = matmul(tape.constant(Tensor::from_rows({{1, 2}, {3, 4}})), tape.constant(Tensor::from_rows({{1}, {1}})));
  EXPECT_EQ(out.value(), Tensor::from_rows({{3}, {7}}));
}

TEST(Matmul, MatchesTripleLoopOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor a = random_tensor(rng, 4, 5);
    const Tensor b = random_tensor(rng, 5, 3);
    Tape tape;
    const Tensor got = matmul(tape.constant(a), tape.constant(b)).value();
    const Tensor want = naive_matmul(a, b);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(Matmul, ShapeMismatchIsDimensionError) {
  Tape tape;
  EXPECT_THROW(matmul(tape.constant(Tensor::matrix(2, 3)), tape.constant(Tensor::matrix(2, 3))), DimensionError);
}

TEST(SoftmaxRows, ZeroRowIsUniform) {
  const Tensor y = softmax_rows_value(Tensor::matrix(1, 4));
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(SoftmaxRows, LargeLogitSaturatesWithoutOverflow) {
  const Tensor y = softmax_rows_value(Tensor::from_rows({{1000, 0, 0}}));
  EXPECT_TRUE(y.all_finite());
  EXPECT_NEAR(y[0], 1.0, 1e-12);
  EXPECT_NEAR(y[1], 0.0, 1e-12);
}

TEST(SoftmaxRows, MatchesDirectEvaluation) {
  Rng rng(5);
  const Tensor x = random_tensor(rng, 3, 3, 0.5);
  const Tensor y = softmax_rows_value(x);
  for (std::size_t r = 0; r < 3; ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < 3; ++c) z += std::exp(x(r, c));
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(y(r, c), std::exp(x(r, c)) / z, 1e-12);
  }
}

TEST(SoftmaxRows, RowsSumToOneProperty) {
  Rng rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = random_tensor(rng, 1 + rng.below(6), 1 + rng.below(30), 1.0 + 20.0 * rng.uniform());
    const Tensor y = softmax_rows_value(x);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) {
        EXPECT_GE(y(r, c), 0.0);
        s += y(r, c);
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Grad, SumGivesOnes) {
  Tape tape;
  const Var x = tape.variable(Tensor::from_rows({{1, -2, 3}}));
  const Tensor g = grad(sum(x), x);
  for (double v : g.data()) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(Grad, QuadraticGivesTwiceInput) {
  Tape tape;
  const Var x = tape.variable(Tensor::from_rows({{1, 2, 3}}));
  const Tensor g = grad(sum(mul(x, x)), x);
  EXPECT_EQ(g, Tensor::from_rows({{2, 4, 6}}));
}

TEST(Grad, SeedAdjointIsOne) {
  Tape tape;
  const Var x = tape.variable(Tensor::from_rows({{0.3, 0.7}}));
  const Var loss = sum(x);
  EXPECT_DOUBLE_EQ(grad(loss, loss).item(), 1.0);
}

TEST(Grad, ForeignVariableIsGraphError) {
  Tape a, b;
  const Var x = a.variable(Tensor::from_rows({{1, 2}}));
  const Var y = b.variable(Tensor::from_rows({{1, 2}}));
  EXPECT_THROW(grad(sum(x), y), GraphError);
}

TEST(Grad, UnreachedLeafHasZeroGradient) {
  Tape tape;
  const Var x = tape.variable(Tensor::from_rows({{1, 2}}));
  const Var unused = tape.variable(Tensor::from_rows({{5}}));
  const Tensor g = grad(sum(x), unused);
  EXPECT_DOUBLE_EQ(g[0], 0.0);
}

TEST(Grad, TwoLayerMlpMatchesFiniteDifferences) {
  Rng rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Tensor> in = {random_tensor(rng, 3, 4), random_tensor(rng, 4, 5, 0.5), random_tensor(rng, 1, 5, 0.1),
                              random_tensor(rng, 5, 2, 0.5)};
    const std::vector<int> labels = {0, 1, 1};
    const double err = max_gradient_error(
        [&labels](Tape&, const std::vector<Var>& v) {
          const Var h = gelu(add_row(matmul(v[0], v[1]), v[2]));
          return cross_entropy(matmul(h, v[3]), labels);
        },
        in);
    EXPECT_LE(err, 1e-4) << "trial " << trial;
  }
}

// One gradient check per differentiable primitive, 20 random instances each.
struct OpCase {
  const char* name;
  std::function<std::vector<Tensor>(Rng&)> inputs;
  testing::ScalarFn fn;
};

class PrimitiveGradient : public ::testing::TestWithParam<int> {};

std::vector<OpCase> op_cases() {
  using V = std::vector<Var>;
  std::vector<OpCase> cases;
  cases.push_back({"matmul", [](Rng& r) { return std::vector{random_tensor(r, 3, 4), random_tensor(r, 4, 2)}; },
                   [](Tape& t, const V& v) { return random_projection(t, matmul(v[0], v[1]), 1); }});
  cases.push_back({"matmul_nt", [](Rng& r) { return std::vector{random_tensor(r, 3, 4), random_tensor(r, 5, 4)}; },
                   [](Tape& t, const V& v) { return random_projection(t, matmul_nt(v[0], v[1]), 2); }});
  cases.push_back({"add", [](Rng& r) { return std::vector{random_tensor(r, 2, 3), random_tensor(r, 2, 3)}; },
                   [](Tape& t, const V& v) { return random_projection(t, add(v[0], v[1]), 3); }});
  cases.push_back({"add_row", [](Rng& r) { return std::vector{random_tensor(r, 4, 3), random_tensor(r, 1, 3)}; },
                   [](Tape& t, const V& v) { return random_projection(t, add_row(v[0], v[1]), 4); }});
  cases.push_back({"mul", [](Rng& r) { return std::vector{random_tensor(r, 2, 3), random_tensor(r, 2, 3)}; },
                   [](Tape& t, const V& v) { return random_projection(t, mul(v[0], v[1]), 5); }});
  cases.push_back({"scale", [](Rng& r) { return std::vector{random_tensor(r, 3, 3)}; },
                   [](Tape& t, const V& v) { return random_projection(t, scale(v[0], 0.37), 6); }});
  cases.push_back({"layer_norm",
                   [](Rng& r) { return std::vector{random_tensor(r, 3, 6), random_tensor(r, 1, 6), random_tensor(r, 1, 6)}; },
                   [](Tape& t, const V& v) { return random_projection(t, layer_norm(v[0], v[1], v[2]), 7); }});
  cases.push_back({"gelu", [](Rng& r) { return std::vector{random_tensor(r, 3, 4, 2.0)}; },
                   [](Tape& t, const V& v) { return random_projection(t, gelu(v[0]), 8); }});
  cases.push_back({"relu",
                   [](Rng& r) {
                     Tensor x = random_tensor(r, 3, 4);
                     for (double& e : x.values()) e += e >= 0 ? 0.1 : -0.1;  // keep clear of the kink
                     return std::vector{x};
                   },
                   [](Tape& t, const V& v) { return random_projection(t, relu(v[0]), 9); }});
  cases.push_back({"softmax_rows", [](Rng& r) { return std::vector{random_tensor(r, 3, 5)}; },
                   [](Tape& t, const V& v) { return random_projection(t, softmax_rows(v[0]), 10); }});
  cases.push_back({"cross_entropy", [](Rng& r) { return std::vector{random_tensor(r, 4, 2, 2.0)}; },
                   [](Tape&, const V& v) {
                     static const std::vector<int> y = {0, 1, 1, 0};
                     return cross_entropy(v[0], y);
                   }});
  cases.push_back({"gather_rows", [](Rng& r) { return std::vector{random_tensor(r, 6, 3)}; },
                   [](Tape& t, const V& v) {
                     static const std::vector<std::size_t> ids = {4, 0, 4, 2};
                     return random_projection(t, gather_rows(v[0], ids), 11);
                   }});
  cases.push_back({"slice", [](Rng& r) { return std::vector{random_tensor(r, 5, 6)}; },
                   [](Tape& t, const V& v) { return random_projection(t, slice(v[0], 1, 4, 2, 5), 12); }});
  cases.push_back({"concat_rows", [](Rng& r) { return std::vector{random_tensor(r, 2, 3), random_tensor(r, 1, 3)}; },
                   [](Tape& t, const V& v) { return random_projection(t, concat_rows(v), 13); }});
  cases.push_back({"concat_cols", [](Rng& r) { return std::vector{random_tensor(r, 2, 3), random_tensor(r, 2, 1)}; },
                   [](Tape& t, const V& v) { return random_projection(t, concat_cols(v), 14); }});
  cases.push_back({"element", [](Rng& r) { return std::vector{random_tensor(r, 3, 3)}; },
                   [](Tape&, const V& v) { return element(softmax_rows(v[0]), 1, 2); }});
  return cases;
}

TEST_P(PrimitiveGradient, MatchesCentralDifferences) {
  const OpCase c = op_cases()[static_cast<std::size_t>(GetParam())];
  Rng rng(derive_seed(77, static_cast<std::uint64_t>(GetParam())));
  for (int trial = 0; trial < 20; ++trial) {
    EXPECT_LE(max_gradient_error(c.fn, c.inputs(rng)), 1e-4) << c.name << " trial " << trial;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, PrimitiveGradient, ::testing::Range(0, 16),
                         [](const ::testing::TestParamInfo<int>& info) {
                           return std::string(op_cases()[static_cast<std::size_t>(info.param)].name);
                         });

TEST(Tape, BackwardVisitsEachNodeOnce) {
  // x feeds the loss through two paths; the adjoint must be accumulated, not overwritten.
  Tape tape;
  const Var x = tape.variable(Tensor::from_rows({{2.0}}));
  const Var y = add(scale(x, 3.0), mul(x, x));
  EXPECT_DOUBLE_EQ(grad(sum(y), x).item(), 3.0 + 4.0);
}

TEST(Tape, RepeatedGradCallsDoNotDoubleCount) {
  Tape tape;
  const Var x = tape.variable(Tensor::from_rows({{1.0, 2.0}}));
  const Var loss = sum(mul(x, x));
  const Tensor g1 = grad(loss, x);
  tape.backward(loss);
  const Tensor g2 = grad(loss, x);
  EXPECT_EQ(g1, g2);
}

}  // namespace
}  // namespace trojanlens
