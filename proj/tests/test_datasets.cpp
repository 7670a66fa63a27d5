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
#include <filesystem>
#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "desa/datasets.hpp"

namespace desa {
namespace {

std::vector<double> class_mean(const Dataset& d, int cls) {
  std::vector<double> m(d.dim(), 0.0);
  std::size_t n = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.labels[i] != cls) continue;
    for (std::size_t k = 0; k < d.dim(); ++k) m[k] += d.features(i, k);
    ++n;
  }
  for (double& v : m) v /= static_cast<double>(n);
  return m;
}

std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

TEST(SuiteTest, Deterministic) {
  SuiteConfig cfg;
  cfg.seed = 4;
  const auto a = generate_suite(cfg);
  const auto b = generate_suite(cfg);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].train, b[i].train);
    EXPECT_EQ(a[i].test, b[i].test);
  }
}

TEST(SuiteTest, ShapesSplitsAndLabels) {
  SuiteConfig cfg;
  const auto suite = generate_suite(cfg);
  ASSERT_EQ(suite.size(), cfg.n_clients);
  for (std::size_t i = 0; i < suite.size(); ++i) {
    EXPECT_EQ(suite[i].train.size() + suite[i].test.size(), cfg.samples_per_client);
    EXPECT_EQ(suite[i].train.size(), 300u);
    EXPECT_EQ(suite[i].train.split, Split::train);
    EXPECT_EQ(suite[i].test.split, Split::test);
    EXPECT_EQ(suite[i].train.client_id, static_cast<int>(i));
    EXPECT_NO_THROW(suite[i].train.validate());
    EXPECT_NEAR(suite[i].train.domain.rotation_deg, 60.0 * static_cast<double>(i), 1e-12);
  }
}

TEST(SuiteTest, NoShiftMeansSameDomain) {
  SuiteConfig cfg;
  cfg.rotation_step_deg = 0.0;
  cfg.samples_per_client = 4000;
  const auto suite = generate_suite(cfg);
  for (int c = 0; c < 2; ++c) {
    const auto m0 = class_mean(suite[0].train, c);
    const auto m1 = class_mean(suite[1].train, c);
    for (std::size_t k = 0; k < m0.size(); ++k) EXPECT_NEAR(m0[k], m1[k], 0.1);
  }
}

TEST(SuiteTest, RotationNinetyRotatesClassMeans) {
  SuiteConfig cfg;
  cfg.n_clients = 2;
  cfg.rotation_step_deg = 90.0;
  cfg.samples_per_client = 5000;
  const auto suite = generate_suite(cfg);
  // Per-class mean error of 4000 records with sd 0.5 is about 0.011 per axis.
  for (int c = 0; c < 2; ++c) {
    const auto m0 = class_mean(suite[0].train, c);
    const auto m1 = class_mean(suite[1].train, c);
    EXPECT_NEAR(m1[0], -m0[1], 0.06);
    EXPECT_NEAR(m1[1], m0[0], 0.06);
    EXPECT_GT(std::hypot(m0[0], m0[1]), 3.5);
  }
}

TEST(SuiteTest, InvalidConfigRejected) {
  SuiteConfig cfg;
  cfg.n_clients = 1;
  EXPECT_THROW(generate_suite(cfg), ValidationError);
  cfg = {};
  cfg.dirichlet_beta = 0.0;
  EXPECT_THROW(generate_suite(cfg), ValidationError);
}

Dataset balanced_pool(std::size_t n, std::size_t k) {
  Dataset d;
  d.num_classes = k;
  d.features = Tensor({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    d.labels.push_back(static_cast<int>(i % k));
    d.features(i, 0) = static_cast<double>(i);
  }
  return d;
}

TEST(DirichletTest, LargeBetaIsNearUniform) {
  const Dataset pool = balanced_pool(10000, 4);
  const auto parts = dirichlet_partition(pool, 5, 1e6, 3);
  for (const auto& p : parts) {
    const auto counts = p.class_counts();
    for (std::size_t c : counts) {
      const double share = static_cast<double>(c) / static_cast<double>(p.size());
      EXPECT_LT(std::abs(share - 0.25), 0.05);
    }
  }
}

TEST(DirichletTest, SinglePartIsPool) {
  const Dataset pool = balanced_pool(50, 3);
  const auto parts = dirichlet_partition(pool, 1, 0.5, 1);
  ASSERT_EQ(parts.size(), 1u);
  EXPECT_EQ(parts[0], pool);
}

TEST(DirichletTest, DisjointAndUnionPreserving) {
  const Dataset pool = balanced_pool(600, 3);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (double beta : {0.1, 1.0, 10.0}) {
      const auto parts = dirichlet_partition(pool, 4, beta, seed);
      std::multiset<double> seen;
      for (const auto& p : parts) {
        EXPECT_GT(p.size(), 0u);
        for (std::size_t i = 0; i < p.size(); ++i) seen.insert(p.features(i, 0));
      }
      EXPECT_EQ(seen.size(), pool.size());
      EXPECT_EQ(std::set<double>(seen.begin(), seen.end()).size(), pool.size());
    }
  }
}

TEST(DirichletTest, SmallBetaSkewsLabels) {
  const Dataset pool = balanced_pool(3000, 3);
  const auto parts = dirichlet_partition(pool, 3, 0.05, 2);
  double max_share = 0.0;
  for (const auto& p : parts) {
    for (std::size_t c : p.class_counts()) {
      max_share = std::max(max_share, static_cast<double>(c) / static_cast<double>(p.size()));
    }
  }
  EXPECT_GT(max_share, 0.6);
}

TEST(DirichletTest, SuiteWithBetaPartitionsPool) {
  SuiteConfig cfg;
  cfg.dirichlet_beta = 0.5;
  const auto suite = generate_suite(cfg);
  std::size_t total = 0;
  for (const auto& c : suite) total += c.train.size() + c.test.size();
  EXPECT_EQ(total, cfg.n_clients * cfg.samples_per_client);
}

TEST(CsvTest, RoundTrip) {
  const auto dir = temp_dir("desa-test-csv");
  SuiteConfig cfg;
  const Dataset d = generate_suite(cfg)[1].train;
  save_dataset(dir / "d.csv", d);
  const Dataset back = load_dataset(dir / "d.csv", d.num_classes);
  EXPECT_EQ(back.features, d.features);
  EXPECT_EQ(back.labels, d.labels);
  std::filesystem::remove_all(dir);
}

TEST(CsvTest, LabelOutOfRangeIsValidationError) {
  const auto dir = temp_dir("desa-test-csv-label");
  {
    std::ofstream os(dir / "d.csv");
    os << "f0,f1,label\n0.5,1,0\n0.25,2,2\n";
  }
  EXPECT_THROW(load_dataset(dir / "d.csv", 2), ValidationError);
  std::filesystem::remove_all(dir);
}

TEST(CsvTest, EmptyFileIsParseError) {
  const auto dir = temp_dir("desa-test-csv-empty");
  { std::ofstream os(dir / "d.csv"); }
  EXPECT_THROW(load_dataset(dir / "d.csv", 2), ParseError);
  {
    std::ofstream os(dir / "bad.csv");
    os << "f0,f1,label\n0.5,abc,0\n";
  }
  EXPECT_THROW(load_dataset(dir / "bad.csv", 2), ParseError);
  std::filesystem::remove_all(dir);
}

TEST(SuiteIoTest, SaveLoadRoundTrip) {
  const auto dir = temp_dir("desa-test-suite");
  SuiteConfig cfg;
  cfg.translation = {1.5, -2.0};
  const auto suite = generate_suite(cfg);
  save_suite(dir, suite, {{"config_hash", "x"}});
  const LoadedSuite back = load_suite(dir / "manifest.json");
  ASSERT_EQ(back.clients.size(), suite.size());
  for (std::size_t i = 0; i < suite.size(); ++i) {
    EXPECT_EQ(back.clients[i].train.features, suite[i].train.features);
    EXPECT_EQ(back.clients[i].test.labels, suite[i].test.labels);
    EXPECT_EQ(back.clients[i].train.domain.translation, suite[i].train.domain.translation);
  }
  EXPECT_EQ(back.manifest.at("config_hash"), "x");
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace desa
