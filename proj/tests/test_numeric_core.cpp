#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "diffks/core/grad_check.hpp"
#include "diffks/core/ops.hpp"
#include "diffks/core/rng.hpp"
#include "diffks/core/tensor.hpp"
#include "diffks/train/gradcheck_suite.hpp"

using namespace diffks;
using D = double;

namespace {

std::vector<D> values_of(const Tensor<D>& t) { return t.to_vector(); }

std::vector<D> random_vec(std::uint64_t seed, std::size_t n, double lo = -1, double hi = 1) {
  auto rng = make_rng(seed, Stream::synth);
  return gradcheck::random_values(rng, n, lo, hi);
}

}  // namespace

TEST(Matmul, IdentityAndHandArithmetic) {
  Tape<D> t;
  auto I = t.constant(2, 2, {1, 0, 0, 1});
  auto A = t.constant(2, 2, {1, 2, 3, 4});
  EXPECT_EQ(values_of(matmul(I, A)), (std::vector<D>{1, 2, 3, 4}));
  EXPECT_EQ(matmul(t.constant(1, 2, {1, 2}), t.constant(2, 1, {3, 4})).item(), 11.0);
}

TEST(Matmul, ShapeMismatchThrows) {
  Tape<D> t;
  EXPECT_THROW(matmul(t.constant(2, 3, std::vector<D>(6, 1)), t.constant(2, 3, std::vector<D>(6, 1))),
               DimensionError);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  const auto B = random_vec(2, 8);
  auto f = [&](Tape<D>& t, const Tensor<D>& x) { return gradcheck::project(matmul(x, t.constant(4, 2, B)), 3); };
  EXPECT_LT(grad_check<D>(f, random_vec(1, 12), 3, 4, 1e-5).max_rel_error, 1e-6);
}

TEST(Matmul, BackwardIsOuterProducts) {
  // dA = dC B^T and dB = A^T dC with dC = ones.
  Tape<D> t;
  auto A = t.variable(2, 2, {1, 2, 3, 4});
  auto B = t.variable(2, 2, {5, 6, 7, 8});
  t.backward(sum(matmul(A, B)));
  EXPECT_EQ(std::vector<D>(A.grad().begin(), A.grad().end()), (std::vector<D>{11, 15, 11, 15}));
  EXPECT_EQ(std::vector<D>(B.grad().begin(), B.grad().end()), (std::vector<D>{4, 4, 6, 6}));
}

TEST(Elementwise, TanhAtZero) {
  Tape<D> t;
  auto x = t.variable(3, 1, {0, 0, 0});
  auto y = tanh(x);
  EXPECT_EQ(values_of(y), (std::vector<D>{0, 0, 0}));
  t.backward(sum(y));
  for (D g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Elementwise, SubSelfIsZero) {
  Tape<D> t;
  auto x = t.variable(2, 2, {1.5, -2, 3, 0.25});
  for (D v : sub(x, x).values()) EXPECT_EQ(v, 0.0);
}

TEST(Elementwise, SigmoidGradient) {
  auto f = [](Tape<D>&, const Tensor<D>& z) { return gradcheck::project(sigmoid(z), 5); };
  EXPECT_LT(grad_check<D>(f, random_vec(4, 6, -3, 3), 6, 1, 1e-5).max_rel_error, 1e-6);
}

TEST(Elementwise, LogOfNonPositiveIsDomainError) {
  Tape<D> t;
  EXPECT_THROW(log(t.constant(2, 1, {1.0, 0.0})), DomainError);
  EXPECT_THROW(log(t.constant(1, 1, {-1.0})), DomainError);
}

TEST(Elementwise, ShapeMismatchThrows) {
  Tape<D> t;
  EXPECT_THROW(add(t.constant(2, 1, {1, 2}), t.constant(1, 2, {1, 2})), DimensionError);
}

TEST(Concat, IdentityRowVectorsAndBackward) {
  Tape<D> t;
  auto x = t.variable(2, 1, {3, 4});
  EXPECT_EQ(values_of(concat({x}, 0)), values_of(x));
  auto a = t.variable(1, 1, {1}), b = t.variable(1, 1, {2});
  EXPECT_EQ(values_of(concat({a, b}, 1)), (std::vector<D>{1, 2}));
  auto c = t.variable(2, 1, {1, 2}), d = t.variable(3, 1, {3, 4, 5});
  t.backward(sum(concat({c, d}, 0)));
  for (D g : c.grad()) EXPECT_EQ(g, 1.0);
  for (D g : d.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Concat, MismatchedDimsThrow) {
  Tape<D> t;
  EXPECT_THROW(concat({t.constant(2, 1, {1, 2}), t.constant(1, 2, {1, 2})}, 0), DimensionError);
}

TEST(MaskedSoftmax, Examples) {
  Tape<D> t;
  for (D p : masked_softmax(t.constant(3, 1, {0, 0, 0})).values()) EXPECT_NEAR(p, 1.0 / 3, 1e-15);
  auto two = masked_softmax(t.constant(2, 1, {0, std::log(2.0)}));
  EXPECT_NEAR(two.at(0), 1.0 / 3, 1e-15);
  EXPECT_NEAR(two.at(1), 2.0 / 3, 1e-15);
  auto m = masked_softmax(t.constant(3, 1, {5, 1, 9}), Mask{1, 1, 0});
  const double e = std::exp(4.0);  // softmax([5, 1]) = [e^4, 1] / (e^4 + 1)
  EXPECT_NEAR(m.at(0), e / (e + 1), 1e-12);
  EXPECT_NEAR(m.at(1), 1 / (e + 1), 1e-12);
  EXPECT_NEAR(m.at(0), 0.9820, 5e-5);
  EXPECT_NEAR(m.at(1), 0.0180, 5e-5);
  EXPECT_EQ(m.at(2), 0.0);
}

TEST(MaskedSoftmax, AllMaskedThrows) {
  Tape<D> t;
  EXPECT_THROW(masked_softmax(t.constant(2, 1, {1, 2}), Mask{0, 0}), InvalidMaskError);
}

TEST(MaskedSoftmax, ProbabilityVectorProperty) {
  auto rng = make_rng(11, Stream::synth);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + uniform_index(rng, 12);
    Mask mask(n);
    for (auto& b : mask) b = uniform_real(rng) < 0.7;
    mask[uniform_index(rng, n)] = 1;
    Tape<D> t;
    auto p = masked_softmax(t.constant(n, 1, gradcheck::random_values(rng, n, -30, 30)), mask);
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!mask[i]) {
        EXPECT_EQ(p.at(i), 0.0);
      }
      EXPECT_GE(p.at(i), 0.0);
      s += p.at(i);
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Dropout, RateZeroAndInferenceAreIdentity) {
  Tape<D> t;
  auto rng = make_rng(1, Stream::dropout);
  auto x = t.constant(3, 1, {1, 2, 3});
  EXPECT_EQ(values_of(dropout(x, 0.0, true, rng)), values_of(x));
  EXPECT_EQ(values_of(dropout(x, 0.5, false, rng)), values_of(x));
}

TEST(Dropout, RateOneIsConfigError) {
  Tape<D> t;
  auto rng = make_rng(1, Stream::dropout);
  EXPECT_THROW(dropout(t.constant(1, 1, {1}), 1.0, true, rng), ConfigError);
}

TEST(Dropout, MonteCarloMeanWithinThreeStandardErrors) {
  const std::size_t n = 10000;
  const double c = 2.0, rate = 0.5;
  Tape<D> t;
  auto rng = make_rng(5, Stream::dropout);
  auto y = dropout(t.constant(n, 1, std::vector<D>(n, c)), rate, true, rng);
  double mean = 0;
  std::size_t zeros = 0;
  for (D v : y.values()) {
    mean += v;
    zeros += v == 0.0;
    if (v != 0.0) {
      EXPECT_DOUBLE_EQ(v, c / (1 - rate));
    }
  }
  mean /= n;
  // Each output is c/(1-rate) w.p. 1-rate, else 0: sd = c * sqrt(rate / (1 - rate)).
  const double se = c * std::sqrt(rate / (1 - rate)) / std::sqrt(static_cast<double>(n));
  EXPECT_LT(std::abs(mean - c), 3 * se);
  EXPECT_GT(zeros, 0u);
}

TEST(GradCheck, QuadraticIsExact) {
  auto f = [](Tape<D>&, const Tensor<D>& x) { return sum(mul(x, x)); };
  Tape<D> t;
  auto x = t.variable(2, 1, {1, 2});
  t.backward(f(t, x));
  EXPECT_EQ(std::vector<D>(x.grad().begin(), x.grad().end()), (std::vector<D>{2, 4}));
  EXPECT_LT(grad_check<D>(f, {1, 2}, 2, 1, 1e-5).max_rel_error, 1e-8);
}

TEST(GradCheck, SumTanhAtZeroHasUnitGradient) {
  auto f = [](Tape<D>&, const Tensor<D>& x) { return sum(tanh(x)); };
  const auto r = grad_check<D>(f, {0, 0, 0}, 3, 1, 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-8);
  EXPECT_NEAR(r.analytic, 1.0, 1e-15);
}

TEST(GradCheck, RelativeErrorFormula) {
  EXPECT_DOUBLE_EQ(detail::rel_error(1.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(detail::rel_error(2.0, 1.0), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(detail::rel_error(0.0, 1e-9), 1e-9 / 1e-8);
}

TEST(GradCheck, NonFiniteValuesThrow) {
  auto f = [](Tape<D>&, const Tensor<D>& x) { return sum(exp(x)); };
  EXPECT_THROW(grad_check<D>(f, {1000.0}, 1, 1, 1e-5), NumericalError);
}

TEST(GradCheck, EveryOpPassesOnRandomInputs) {
  for (const auto& row : gradcheck::op_checks()) {
    EXPECT_LT(row.result.max_rel_error, 1e-4) << row.name;
    EXPECT_GT(row.result.coordinates, 0u) << row.name;
  }
}

TEST(GradCheck, CorruptedBackwardIsCaught) {
  EXPECT_GT(gradcheck::corrupted_check().result.max_rel_error, 1e-2);
}

TEST(Tape, GradientsAccumulateAcrossUses) {
  // y = sum(x * w1) + sum(x * w2): dy/dx must be exactly w1 + w2.
  Tape<D> t;
  auto x = t.variable(3, 1, {0.5, -1, 2});
  auto w1 = t.constant(3, 1, {1, 2, 3}), w2 = t.constant(3, 1, {0.25, 0.5, -4});
  t.backward(add(sum(mul(x, w1)), sum(mul(x, w2))));
  EXPECT_EQ(std::vector<D>(x.grad().begin(), x.grad().end()), (std::vector<D>{1.25, 2.5, -1}));

  Tape<D> u;
  auto a = u.variable(2, 1, {1, 2});
  auto b = tanh(a);
  u.backward(sum(add(b, b)));
  for (std::size_t i = 0; i < 2; ++i) {
    const double th = std::tanh(a.at(i));
    EXPECT_DOUBLE_EQ(a.grad()[i], 2 * (1 - th * th));
  }
}

TEST(Tape, BackwardNeedsScalarRoot) {
  Tape<D> t;
  auto x = t.variable(2, 1, {1, 2});
  EXPECT_THROW(t.backward(tanh(x)), DimensionError);
}

TEST(Tape, ParamGradientsLandInParamStore) {
  ParamStore<D> store;
  auto& w = store.add("g", "w", 2, 1, Init::zeros);
  w.value = {3, -1};
  for (int rep = 0; rep < 2; ++rep) {
    Tape<D> t;
    t.backward(sum(mul(t.param(w), t.constant(2, 1, {2, 5}))));
  }
  EXPECT_EQ(w.grad, (std::vector<D>{4, 10}));
  store.zero_grad();
  EXPECT_EQ(w.grad, (std::vector<D>{0, 0}));
}

TEST(Tape, FiniteInputsGiveFiniteValuesAndGrads) {
  Tape<D> t;
  auto x = t.variable(4, 1, {-80, -1, 1, 80});
  auto y = add(add(sum(sigmoid(x)), sum(tanh(x))), log_softmax_at(x, {}, 0));
  t.backward(y);
  EXPECT_TRUE(std::isfinite(y.item()));
  for (D g : x.grad()) EXPECT_TRUE(std::isfinite(g));
}

TEST(Tape, ForwardIsDeterministic) {
  auto run = [] {
    auto x = random_vec(9, 12);
    Tape<D> t;
    auto v = tanh(matmul(t.constant(3, 4, x), t.constant(4, 3, x)));
    return v.to_vector();
  };
  EXPECT_EQ(run(), run());
}

TEST(ParamStore, GroupsPartitionParameters) {
  ParamStore<D> store;
  store.add("a", "a.w", 2, 3, Init::glorot_uniform);
  store.add("b", "b.w", 1, 1, Init::zeros);
  store.add("a", "a.b", 2, 1, Init::zeros);
  EXPECT_THROW(store.add("b", "a.w", 1, 1, Init::zeros), ConfigError);
  std::size_t members = 0;
  for (const auto& g : store.groups()) members += g.params.size();
  EXPECT_EQ(members, store.params().size());
  for (const auto& p : store.params()) {
    EXPECT_EQ(p.m.size(), p.value.size());
    EXPECT_EQ(p.v.size(), p.value.size());
    EXPECT_EQ(p.grad.size(), p.value.size());
  }
  auto rng = make_rng(1, Stream::init);
  store.initialize(rng);
  const double limit = std::sqrt(6.0 / 5.0);
  for (D v : store.at("a.w").value) EXPECT_LE(std::abs(v), limit);
  for (D v : store.at("a.b").value) EXPECT_EQ(v, 0.0);
}

TEST(Rng, StreamsAreReproducibleAndDistinct) {
  auto a = make_rng(42, Stream::shuffle, 3), b = make_rng(42, Stream::shuffle, 3);
  auto c = make_rng(42, Stream::dropout, 3);
  EXPECT_EQ(a(), b());
  EXPECT_NE(make_rng(42, Stream::shuffle, 3)(), c());
  for (int i = 0; i < 1000; ++i) {
    const double u = uniform_real(a);
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(uniform_index(b, 7), 7u);
  }
}
