// Copyright 2026 The DeSA Simulator Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "desa/rng.hpp"
#include "desa/tensor.hpp"

namespace desa {
namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = standard_normal(rng);
  return t;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

TEST(TensorTest, ConstructionChecksShape) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5, 0.0)), DimensionError);
  EXPECT_THROW(Tensor({0, 3}), DimensionError);
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.dim(1), 3u);
  EXPECT_TRUE(t.all_finite());
  t(1, 2) = std::nan("");
  EXPECT_FALSE(t.all_finite());
}

TEST(TensorTest, MatrixRejectsRaggedRows) {
  EXPECT_THROW(Tensor::matrix({{1, 2}, {3}}), DimensionError);
}

TEST(AffineTest, IdentityWeights) {
  const Tensor y = affine_forward(Tensor::matrix({{1, 2}}), Tensor::matrix({{1, 0}, {0, 1}}),
                                  Tensor::vector({0, 0}));
  EXPECT_EQ(y, Tensor::matrix({{1, 2}}));
}

TEST(AffineTest, ZeroInputPassesBias) {
  const Tensor y = affine_forward(Tensor::matrix({{0, 0}}), Tensor::matrix({{7, -2}, {0.5, 9}}),
                                  Tensor::vector({3, 4}));
  EXPECT_EQ(y, Tensor::matrix({{3, 4}}));
}

TEST(AffineTest, HandMultiply) {
  const Tensor y = affine_forward(Tensor::matrix({{1, 1}}), Tensor::matrix({{2, 3}, {4, 5}}),
                                  Tensor::vector({1, 1}));
  EXPECT_EQ(y, Tensor::matrix({{7, 9}}));
}

TEST(AffineTest, ShapeMismatchNamesAxes) {
  try {
    affine_forward(Tensor({2, 3}), Tensor({2, 2}), Tensor({2}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("x.shape[1]=3"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("W.shape[0]=2"), std::string::npos);
  }
}

TEST(AffineTest, BackwardZeroUpstream) {
  Rng rng = make_rng(1, "t");
  const Tensor x = random_tensor({3, 4}, rng), w = random_tensor({4, 2}, rng);
  const AffineGrads g = affine_backward(x, w, Tensor({3, 2}));
  for (const Tensor* t : {&g.grad_x, &g.grad_w, &g.grad_b}) {
    for (double v : t->values()) EXPECT_EQ(v, 0.0);
  }
}

TEST(AffineTest, BackwardScalarChainRule) {
  const AffineGrads g =
      affine_backward(Tensor::matrix({{2}}), Tensor::matrix({{3}}), Tensor::matrix({{1}}));
  EXPECT_EQ(g.grad_x, Tensor::matrix({{3}}));
  EXPECT_EQ(g.grad_w, Tensor::matrix({{2}}));
  EXPECT_EQ(g.grad_b, Tensor::vector({1}));
}

TEST(AffineTest, BackwardMatchesFiniteDifferences) {
  Rng rng = make_rng(2, "t");
  const Tensor x = random_tensor({3, 4}, rng), w = random_tensor({4, 2}, rng),
               b = random_tensor({2}, rng), go = random_tensor({3, 2}, rng);
  const AffineGrads g = affine_backward(x, w, go);
  EXPECT_LT(grad_check([&](const Tensor& p) { return dot(affine_forward(p, w, b), go); }, x,
                       g.grad_x),
            1e-6);
  EXPECT_LT(grad_check([&](const Tensor& p) { return dot(affine_forward(x, p, b), go); }, w,
                       g.grad_w),
            1e-6);
  EXPECT_LT(grad_check([&](const Tensor& p) { return dot(affine_forward(x, w, p), go); }, b,
                       g.grad_b),
            1e-6);
}

TEST(ReluTest, ForwardAndTieAtZero) {
  EXPECT_EQ(relu_forward(Tensor::vector({-1, 0, 2})), Tensor::vector({0, 0, 2}));
  EXPECT_EQ(relu_backward(Tensor::vector({-1, 0, 2}), Tensor::vector({5, 5, 5})),
            Tensor::vector({0, 0, 5}));
}

TEST(ReluTest, FiniteDifferencesAwayFromZero) {
  Rng rng = make_rng(3, "t");
  Tensor x = random_tensor({4, 5}, rng);
  for (double& v : x.values()) v += v >= 0 ? 0.1 : -0.1;
  const Tensor go = random_tensor({4, 5}, rng);
  EXPECT_LT(grad_check([&](const Tensor& p) { return dot(relu_forward(p), go); }, x,
                       relu_backward(x, go)),
            1e-6);
}

TEST(LogSoftmaxTest, Symmetric) {
  const Tensor l = log_softmax(Tensor::matrix({{0, 0}}));
  EXPECT_NEAR(l[0], std::log(0.5), 1e-15);
  EXPECT_NEAR(l[1], std::log(0.5), 1e-15);
}

TEST(LogSoftmaxTest, StableForLargeLogits) {
  const Tensor l = log_softmax(Tensor::matrix({{1000, 0}}));
  EXPECT_TRUE(l.all_finite());
  EXPECT_NEAR(l[0], 0.0, 1e-12);
  EXPECT_NEAR(l[1], -1000.0, 1e-9);
}

TEST(LogSoftmaxTest, ExpSumsToOne) {
  const Tensor l = log_softmax(Tensor::matrix({{1, 2, 3}}));
  double s = 0.0;
  for (double v : l.values()) s += std::exp(v);
  EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST(LogSoftmaxTest, NeedsTwoClasses) {
  EXPECT_THROW(log_softmax(Tensor::matrix({{1}})), DimensionError);
}

TEST(GradCheckTest, QuadraticExact) {
  const double err = grad_check(
      [](const Tensor& x) { return x[0] * x[0] + x[1] * x[1]; }, Tensor::vector({1, 2}),
      Tensor::vector({2, 4}));
  EXPECT_LT(err, 1e-8);
}

TEST(GradCheckTest, DetectsDoubledGradient) {
  const double err = grad_check(
      [](const Tensor& x) { return x[0] * x[0] + x[1] * x[1]; }, Tensor::vector({1, 2}),
      Tensor::vector({4, 8}));
  EXPECT_NEAR(err, 0.5, 1e-6);  // |2g - g| / |2g|
  const double err2 = grad_check(
      [](const Tensor& x) { return x[0] * x[0] + x[1] * x[1]; }, Tensor::vector({1, 2}),
      Tensor::vector({-2, -4}));
  EXPECT_NEAR(err2, 2.0, 1e-6);
}

TEST(GradCheckTest, RejectsNonFiniteObjective) {
  EXPECT_THROW(grad_check([](const Tensor&) { return std::nan(""); }, Tensor::vector({1}),
                          Tensor::vector({0})),
               NumericError);
}

TEST(TensorTest, ConcatAndGather) {
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  const Tensor b = Tensor::matrix({{5, 6}});
  const Tensor c = concat_rows(a, b);
  EXPECT_EQ(c, Tensor::matrix({{1, 2}, {3, 4}, {5, 6}}));
  const std::vector<std::size_t> idx{2, 0};
  EXPECT_EQ(gather_rows(c, idx), Tensor::matrix({{5, 6}, {1, 2}}));
  EXPECT_THROW(concat_rows(a, Tensor({1, 3})), DimensionError);
}

TEST(RngTest, StreamsAreIndependentAndReproducible) {
  Rng a = make_rng(5, "x", {1, 2});
  Rng b = make_rng(5, "x", {1, 2});
  Rng c = make_rng(5, "x", {2, 1});
  const auto va = a(), vb = b(), vc = c();
  EXPECT_EQ(va, vb);
  EXPECT_NE(va, vc);
  EXPECT_NE(derive_seed(5, "x"), derive_seed(5, "y"));
}

TEST(RngTest, StandardNormalMoments) {
  Rng rng = make_rng(11, "normal");
  const int n = 200000;
  double m = 0.0, v = 0.0;
  std::vector<double> xs(n);
  for (double& x : xs) {
    x = standard_normal(rng);
    m += x / n;
  }
  for (double x : xs) v += (x - m) * (x - m) / (n - 1);
  EXPECT_NEAR(m, 0.0, 3.0 / std::sqrt(n) * 1.5);
  EXPECT_NEAR(std::sqrt(v), 1.0, 3.0 / std::sqrt(2.0 * n) * 1.5);
}

}  // namespace
}  // namespace desa
