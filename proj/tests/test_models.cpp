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

#include <filesystem>

#include <gtest/gtest.h>

#include "desa/checkpoint.hpp"
#include "desa/models.hpp"

namespace desa {
namespace {

TEST(ModelsTest, InitIsDeterministic) {
  const ArchSpec s = arch_large(3, 4);
  EXPECT_EQ(init_model(s, 9), init_model(s, 9));
  EXPECT_NE(init_model(s, 9).params, init_model(s, 10).params);
}

TEST(ModelsTest, ParameterCountByFormula) {
  const Model m = init_model(make_arch("tiny", 2, {8}, 3), 0);
  EXPECT_EQ(m.parameter_count(), 2u * 8 + 8 + 8 * 3 + 3);
  const Model l = init_model(arch_large(3, 4, 64, 32), 0);
  EXPECT_EQ(l.parameter_count(), 3u * 64 + 64 + 64 * 32 + 32 + 32 * 4 + 4);
}

TEST(ModelsTest, InvalidSpecsRejected) {
  EXPECT_THROW(make_arch("x", 0, {4}, 2), ValidationError);
  EXPECT_THROW(make_arch("x", 2, {}, 2), ValidationError);
  EXPECT_THROW(make_arch("x", 2, {4}, 1), ValidationError);
}

TEST(ModelsTest, ZeroModelGivesZeroOutputs) {
  Model m = init_model(arch_small(2, 3, 5), 0);
  m.params = zeros_like(m.params);
  const Activations a = forward(m, Tensor::matrix({{1, -2}, {3, 4}}));
  for (double v : a.logits.values()) EXPECT_EQ(v, 0.0);
  for (double v : a.embedding.values()) EXPECT_EQ(v, 0.0);
}

TEST(ModelsTest, IdentityEncoderOnPositiveInputs) {
  Model m = init_model(arch_small(2, 2, 2), 0);
  m.params.encoder[0].weight = Tensor::matrix({{1, 0}, {0, 1}});
  m.params.encoder[0].bias = Tensor::vector({0, 0});
  const Tensor x = Tensor::matrix({{0.5, 2}, {3, 0.25}});
  EXPECT_EQ(forward(m, x).embedding, x);
}

TEST(ModelsTest, ForwardShapes) {
  const Model m = init_model(arch_large(3, 5, 16, 8), 1);
  const Activations a = forward(m, Tensor({4, 3}, 0.3));
  EXPECT_EQ(a.logits.shape(), (Shape{4, 5}));
  EXPECT_EQ(a.embedding.shape(), (Shape{4, 8}));
  EXPECT_THROW(forward(m, Tensor({4, 2})), DimensionError);
}

TEST(ModelsTest, BackwardMatchesFiniteDifferences) {
  const Model m = init_model(arch_large(3, 3, 5, 4), 2);
  Tensor x({6, 3});
  Rng rng = make_rng(2, "x");
  for (double& v : x.values()) v = standard_normal(rng);
  Tensor probe({6, 3});
  for (double& v : probe.values()) v = standard_normal(rng);
  const Activations a = forward(m, x);
  const Params g = backward(m, a, probe);
  const Tensor theta({m.parameter_count()}, flatten(m.params));
  auto f = [&](const Tensor& flat) {
    Model c = m;
    assign_flat(c.params, flat.values());
    const Tensor z = forward(c, x).logits;
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) s += z[i] * probe[i];
    return s;
  };
  EXPECT_LT(grad_check(f, theta, Tensor({m.parameter_count()}, flatten(g))), 1e-5);
}

TEST(SgdTest, ZeroGradLeavesParams) {
  const Model m = init_model(arch_small(2, 2, 3), 4);
  EXPECT_EQ(sgd_step(m, zeros_like(m.params), 0.1), m);
}

TEST(SgdTest, ScalarArithmetic) {
  Model m = init_model(make_arch("s", 1, {1}, 2), 0);
  m.params.encoder[0].weight[0] = 1.0;
  Params g = zeros_like(m.params);
  g.encoder[0].weight[0] = 0.5;
  EXPECT_DOUBLE_EQ(sgd_step(m, g, 0.01).params.encoder[0].weight[0], 0.995);
}

TEST(SgdTest, TwoStepsEqualOneDoubledStep) {
  const Model m = init_model(arch_small(2, 2, 3), 4);
  Params g = m.params;  // any fixed gradient
  const Model two = sgd_step(sgd_step(m, g, 0.05), g, 0.05);
  const Model one = sgd_step(m, g, 0.1);
  const auto a = flatten(two.params), b = flatten(one.params);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-15);
  EXPECT_THROW(sgd_step(m, g, 0.0), ValidationError);
}

TEST(CheckpointTest, RoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "desa-test-ckpt";
  std::filesystem::create_directories(dir);
  const Model m = init_model(arch_large(3, 4, 6, 5), 8);
  save_checkpoint(dir / "m", m, {{"config_hash", "abc"}});
  const LoadedCheckpoint back = load_checkpoint(dir / "m");
  EXPECT_EQ(back.model, m);
  EXPECT_EQ(back.meta.at("config_hash"), "abc");
  EXPECT_EQ(back.meta.at("parameter_count"), m.parameter_count());
  std::filesystem::remove_all(dir);
}

TEST(CheckpointTest, CorruptContainerRejected) {
  const auto dir = std::filesystem::temp_directory_path() / "desa-test-ckpt-bad";
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "m", init_model(arch_small(2, 2, 3), 1));
  {
    std::ofstream os(dir / "m.bin", std::ios::binary | std::ios::trunc);
    os << "NOTACKPT";
  }
  EXPECT_THROW(load_checkpoint(dir / "m"), ParseError);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace desa
