#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "mdl/gradcheck.hpp"
#include "mdl/tape.hpp"

using namespace mdl;
using namespace mdl::ad;
using mdl::testing::random_tensor;

namespace {

ParamStore store_of(std::initializer_list<std::pair<std::string, Tensor>> items) {
  ParamStore s;
  for (const auto& [name, t] : items) s.add(name, t, OptimizerRule::RmsProp);
  return s;
}

double check(const ScalarFn& fn, const ParamStore& p) { return finite_diff_check(fn, p, 1e-5); }

}  // namespace

TEST(Primitives, SoftmaxOfEqualLogitsIsUniform) {
  Tape t;
  NodeId x = t.constant(Tensor({3}, {0, 0, 0}));
  const Tensor& y = t.value(softmax(t, x));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(y[i], 1.0 / 3.0);
}

TEST(Primitives, ReluClampsNegatives) {
  Tape t;
  const Tensor& y = t.value(relu(t, t.constant(Tensor({2}, {-1.0, 2.0}))));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 2.0);
}

TEST(Primitives, MatmulMatchesTripleLoop) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = random_tensor(rng, {2, 3});
    const Tensor b = random_tensor(rng, {3, 4});
    Tape t;
    const Tensor& c = t.value(matmul(t, t.constant(a), t.constant(b)));
    ASSERT_EQ(c.shape(), (Shape{2, 4}));
    for (std::size_t i = 0; i < 2; ++i) {
      for (std::size_t j = 0; j < 4; ++j) {
        double ref = 0.0;
        for (std::size_t k = 0; k < 3; ++k) ref += a.at(i, k) * b.at(k, j);
        EXPECT_NEAR(c.at(i, j), ref, 1e-12);
      }
    }
  }
}

TEST(Primitives, ShapeMismatchNamesPrimitiveAndShapes) {
  Tape t;
  NodeId a = t.constant(Tensor::zeros({2, 3}));
  NodeId b = t.constant(Tensor::zeros({4, 5}));
  try {
    matmul(t, a, b);
    FAIL() << "expected a shape error";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4, 5]"), std::string::npos) << msg;
  }
}

TEST(Primitives, UnknownPrimitiveRejected) {
  EXPECT_THROW(primitive_from_name("conv2d"), std::invalid_argument);
  EXPECT_EQ(primitive_from_name("softmax"), Primitive::Softmax);
  Tape t;
  NodeId x = t.constant(Tensor::zeros({2}));
  EXPECT_THROW(t.apply(static_cast<Primitive>(200), {x}), std::invalid_argument);
}

TEST(Primitives, SoftmaxRowsPositiveAndNormalized) {
  std::mt19937_64 rng(5);
  Tape t;
  const Tensor& y = t.value(softmax(t, t.constant(random_tensor(rng, {7, 5}, 10.0))));
  for (std::size_t r = 0; r < 7; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 5; ++c) {
      EXPECT_GT(y.at(r, c), 0.0);
      s += y.at(r, c);
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Primitives, LayerNormStandardizesRows) {
  std::mt19937_64 rng(6);
  Tape t;
  NodeId x = t.constant(random_tensor(rng, {6, 8}, 3.0));
  const Tensor& y = t.value(layer_norm(t, x, t.constant(Tensor::full({8}, 1.0)), t.constant(Tensor::zeros({8}))));
  for (std::size_t r = 0; r < 6; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < 8; ++c) mean += y.at(r, c) / 8.0;
    for (std::size_t c = 0; c < 8; ++c) var += (y.at(r, c) - mean) * (y.at(r, c) - mean) / 8.0;
    EXPECT_NEAR(mean, 0.0, 1e-9);
    // eps 1e-6 inside the root shrinks the variance by var/(var+eps)
    EXPECT_NEAR(var, 1.0, 1e-6);
  }
}

TEST(Primitives, TokenMixExampleAndInvolution) {
  Tape t;
  // t1 = [a1,a2,b1,b2], t2 = [c1,c2,d1,d2]
  NodeId x = t.constant(Tensor({1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8}));
  const Tensor& y = t.value(token_mix(t, x));
  EXPECT_EQ(y, Tensor({1, 2, 4}, {1, 2, 5, 6, 3, 4, 7, 8}));

  std::mt19937_64 rng(9);
  for (std::size_t n : {1u, 2u, 4u, 8u}) {
    const Tensor in = random_tensor(rng, {3, n, 8});
    Tape t2;
    NodeId twice = token_mix(t2, token_mix(t2, t2.constant(in)));
    EXPECT_TRUE(bitwise_equal(t2.value(twice), in)) << "N=" << n;
  }
  Tape t3;
  EXPECT_THROW(token_mix(t3, t3.constant(Tensor::zeros({1, 3, 4}))), std::invalid_argument);
}

TEST(Primitives, TokenMixIdenticalTokensIndexOracle) {
  const std::size_t n = 4, d = 8, seg = d / n;
  std::vector<double> tok(d);
  for (std::size_t i = 0; i < d; ++i) tok[i] = static_cast<double>(i) + 0.5;
  std::vector<double> vals;
  for (std::size_t i = 0; i < n; ++i) vals.insert(vals.end(), tok.begin(), tok.end());
  Tape t;
  const Tensor& y = t.value(token_mix(t, t.constant(Tensor({n, d}, vals))));
  for (std::size_t h = 0; h < n; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < seg; ++c) EXPECT_EQ(y.at(h, i * seg + c), tok[h * seg + c]);
    }
  }
}

TEST(Backward, SumGivesOnes) {
  ParamStore p = store_of({{"x", Tensor({2, 3}, {1, -2, 3, 4, 5, -6})}});
  Tape t;
  GradientMap g = t.backward(sum(t, p.on(t, "x")));
  EXPECT_EQ(g.at("x"), Tensor::full({2, 3}, 1.0));
}

TEST(Backward, ReluSubgradient) {
  ParamStore p = store_of({{"x", Tensor({3}, {-1.0, 2.0, 0.0})}});
  Tape t;
  GradientMap g = t.backward(sum(t, relu(t, p.on(t, "x"))));
  EXPECT_EQ(g.at("x"), Tensor({3}, {0.0, 1.0, 0.0}));
}

TEST(Backward, MatmulGradMatchesOnesTimesBTranspose) {
  std::mt19937_64 rng(2);
  ParamStore p = store_of({{"A", random_tensor(rng, {2, 3})}, {"B", random_tensor(rng, {3, 4})}});
  Tape t;
  GradientMap g = t.backward(sum(t, matmul(t, p.on(t, "A"), p.on(t, "B"))));
  const Tensor& b = p.value("B");
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t k = 0; k < 3; ++k) {
      double ref = 0.0;
      for (std::size_t j = 0; j < 4; ++j) ref += b.at(k, j);
      EXPECT_NEAR(g.at("A").at(i, k), ref, 1e-12);
    }
  }
  EXPECT_LT(check([](Tape& t, const ParamStore& s) { return sum(t, matmul(t, s.on(t, "A"), s.on(t, "B"))); }, p),
            1e-6);
}

TEST(Backward, NonScalarLossRejected) {
  Tape t;
  NodeId x = t.constant(Tensor::zeros({2}));
  EXPECT_THROW(t.backward(x), std::invalid_argument);
}

TEST(Backward, VisitsEachNodeOnceAndZeroesUnreachable) {
  std::mt19937_64 rng(4);
  ParamStore p = store_of({{"a", random_tensor(rng, {3})}, {"unused", random_tensor(rng, {2, 2})}});
  Tape t;
  NodeId a = p.on(t, "a");
  p.on(t, "unused");
  NodeId y = mul(t, a, a);
  NodeId z = add(t, y, a);
  NodeId loss = sum(t, add(t, z, y));
  GradientMap g = t.backward(loss);
  for (std::uint32_t v : t.visit_counts()) EXPECT_EQ(v, 1u);
  EXPECT_EQ(t.visit_counts().size(), t.size());
  const Tensor& u = g.at("unused");
  for (std::size_t i = 0; i < u.size(); ++i) EXPECT_TRUE(u[i] == 0.0 && !std::signbit(u[i]));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(g.at("a")[i], 4.0 * p.value("a")[i] + 1.0, 1e-12);
}

TEST(GradCheck, SquareAtThree) {
  ParamStore p = store_of({{"x", Tensor::scalar(3.0)}});
  auto fn = [](Tape& t, const ParamStore& s) {
    NodeId x = s.on(t, "x");
    return mul(t, x, x);
  };
  Tape t;
  EXPECT_NEAR(t.backward(fn(t, p)).at("x").item(), 6.0, 1e-12);
  EXPECT_LT(check(fn, p), 1e-6);
}

TEST(GradCheck, ConstantFunctionHasZeroError) {
  ParamStore p = store_of({{"x", Tensor({2}, {1.0, 2.0})}});
  auto fn = [](Tape& t, const ParamStore& s) {
    s.on(t, "x");
    return t.constant(Tensor::scalar(4.0));
  };
  EXPECT_EQ(check(fn, p), 0.0);
}

TEST(GradCheck, NonFiniteOutputThrows) {
  ParamStore p = store_of({{"x", Tensor::scalar(1.0)}});
  auto fn = [](Tape& t, const ParamStore& s) {
    s.on(t, "x");
    return t.constant(Tensor::scalar(std::nan("")));
  };
  EXPECT_THROW(check(fn, p), std::runtime_error);
}

// Every primitive with a random downstream projection so gradients are not
// trivially uniform.
class PrimitiveGradients : public ::testing::Test {
 protected:
  std::mt19937_64 rng{17};

  NodeId project(Tape& t, NodeId y) {
    const Tensor& v = t.value(y);
    std::mt19937_64 local(v.size() * 31 + v.rank());
    return sum(t, mul(t, y, t.constant(random_tensor(local, v.shape()))));
  }
};

TEST_F(PrimitiveGradients, Elementwise) {
  ParamStore p = store_of({{"a", random_tensor(rng, {2, 3})}, {"b", random_tensor(rng, {2, 3})},
                           {"c", random_tensor(rng, {3})}});
  EXPECT_LT(check([&](Tape& t, const ParamStore& s) { return project(t, mul(t, s.on(t, "a"), s.on(t, "b"))); }, p), 1e-4);
  EXPECT_LT(check([&](Tape& t, const ParamStore& s) { return project(t, add(t, s.on(t, "a"), s.on(t, "b"))); }, p), 1e-4);
  EXPECT_LT(check([&](Tape& t, const ParamStore& s) { return project(t, broadcast_add(t, s.on(t, "a"), s.on(t, "c"))); }, p), 1e-4);
  EXPECT_LT(check([&](Tape& t, const ParamStore& s) { return project(t, sigmoid(t, s.on(t, "a"))); }, p), 1e-4);
  EXPECT_LT(check([&](Tape& t, const ParamStore& s) { return project(t, scale(t, s.on(t, "a"), -2.5)); }, p), 1e-4);
  EXPECT_LT(check([&](Tape& t, const ParamStore& s) { return project(t, relu(t, s.on(t, "a"))); }, p), 1e-4);
}

TEST_F(PrimitiveGradients, Reductions) {
  ParamStore p = store_of({{"x", random_tensor(rng, {2, 3, 4})}, {"tab", random_tensor(rng, {5, 3})}});
  EXPECT_LT(check([&](Tape& t, const ParamStore& s) { return project(t, softmax(t, s.on(t, "x"))); }, p), 1e-4);
  EXPECT_LT(check([&](Tape& t, const ParamStore& s) {
              return project(t, select_mean(t, s.on(t, "x"), {1, 0, 1, 0, 1, 1}));
            }, p), 1e-4);
  EXPECT_LT(check([&](Tape& t, const ParamStore& s) { return project(t, gather(t, s.on(t, "tab"), {4, 0, 4, 2})); }, p), 1e-4);
  EXPECT_LT(check([&](Tape& t, const ParamStore& s) {
              return project(t, reshape(t, s.on(t, "x"), {4, 6}));
            }, p), 1e-4);
  EXPECT_LT(check([&](Tape& t, const ParamStore& s) {
              const std::array<NodeId, 2> parts{s.on(t, "x"), s.on(t, "x")};
              return project(t, concat(t, parts));
            }, p), 1e-4);
}

TEST_F(PrimitiveGradients, LinearMaps) {
  ParamStore p = store_of({{"x", random_tensor(rng, {2, 3, 4})}, {"w", random_tensor(rng, {4, 5})},
                           {"b", random_tensor(rng, {5})}, {"tw", random_tensor(rng, {3, 4, 2})},
                           {"tb", random_tensor(rng, {3, 2})}, {"g", random_tensor(rng, {3, 4})},
                           {"gb", random_tensor(rng, {3, 4})}});
  EXPECT_LT(check([&](Tape& t, const ParamStore& s) {
              return project(t, affine(t, s.on(t, "x"), s.on(t, "w"), s.on(t, "b")));
            }, p), 1e-4);
  EXPECT_LT(check([&](Tape& t, const ParamStore& s) {
              return project(t, token_linear(t, s.on(t, "x"), s.on(t, "tw"), s.on(t, "tb")));
            }, p), 1e-4);
  EXPECT_LT(check([&](Tape& t, const ParamStore& s) {
              return project(t, layer_norm(t, s.on(t, "x"), s.on(t, "g"), s.on(t, "gb")));
            }, p), 1e-4);
  EXPECT_LT(check([&](Tape& t, const ParamStore& s) {
              return project(t, token_mix(t, reshape(t, s.on(t, "x"), {3, 2, 4})));
            }, p), 1e-4);
}

TEST_F(PrimitiveGradients, Attention) {
  ParamStore p = store_of({{"q", random_tensor(rng, {2, 3, 4})}, {"k", random_tensor(rng, {2, 5, 4})},
                           {"v", random_tensor(rng, {2, 5, 4})}});
  EXPECT_LT(check([&](Tape& t, const ParamStore& s) {
              NodeId w = softmax(t, attn_scores(t, s.on(t, "q"), s.on(t, "k"), 2));
              return project(t, attn_mix(t, w, s.on(t, "v"), 2));
            }, p), 1e-4);
}

TEST_F(PrimitiveGradients, BinaryCrossEntropy) {
  ParamStore p = store_of({{"z", random_tensor(rng, {4, 3})}});
  const Tensor labels({4, 3}, {1, 0, 0, 0, 1, 0, 1, 1, 0, 0, 0, 1});
  EXPECT_LT(check([&](Tape& t, const ParamStore& s) {
              return bce(t, sigmoid(t, s.on(t, "z")), t.constant(labels), {1.0, 0.5, 2.0});
            }, p), 1e-4);
}
