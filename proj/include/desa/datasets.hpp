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

#pragma once

// Desk-scale multi-client data. Each client sees the same base distribution
// pushed through its own rotation and translation (covariate shift); an
// optional Dirichlet split over a shared pool adds label shift.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "desa/errors.hpp"
#include "desa/rng.hpp"
#include "desa/tensor.hpp"

namespace desa {

enum class Split { train, test };

inline const char* to_string(Split s) { return s == Split::train ? "train" : "test"; }

struct DomainTransform {
  double rotation_deg = 0.0;
  std::vector<double> translation;  // padded with zeros up to the feature dim
  double noise_scale = 0.0;

  friend bool operator==(const DomainTransform&, const DomainTransform&) = default;
};

struct Dataset {
  Tensor features;  // [N, D]
  std::vector<int> labels;
  std::size_t num_classes = 0;
  Split split = Split::train;
  int client_id = -1;
  DomainTransform domain;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.dim(1); }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> c(num_classes, 0);
    for (int y : labels) ++c[static_cast<std::size_t>(y)];
    return c;
  }

  void validate() const {
    if (num_classes < 2) throw ValidationError("Dataset: num_classes must be >= 2");
    if (features.rank() != 2 || features.dim(0) != labels.size()) {
      throw DimensionError("Dataset: features " + shape_string(features.shape()) +
                           " vs " + std::to_string(labels.size()) + " labels");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
        throw ValidationError("Dataset: label " + std::to_string(labels[i]) +
                              " at record " + std::to_string(i) +
                              " outside [0," + std::to_string(num_classes) + ")");
      }
    }
    if (!features.all_finite()) throw ValidationError("Dataset: non-finite feature");
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline Dataset subset(const Dataset& d, std::span<const std::size_t> idx) {
  Dataset out;
  out.features = gather_rows(d.features, idx);
  out.labels.reserve(idx.size());
  for (std::size_t i : idx) out.labels.push_back(d.labels[i]);
  out.num_classes = d.num_classes;
  out.split = d.split;
  out.client_id = d.client_id;
  out.domain = d.domain;
  return out;
}

// Concatenates datasets that share K and D; metadata taken from the first.
inline Dataset concat(std::span<const Dataset> parts) {
  if (parts.empty()) throw ValidationError("concat: no datasets");
  Dataset out = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) {
    if (parts[i].num_classes != out.num_classes) {
      throw DimensionError("concat: class count mismatch");
    }
    out.features = concat_rows(out.features, parts[i].features);
    out.labels.insert(out.labels.end(), parts[i].labels.begin(),
                      parts[i].labels.end());
  }
  return out;
}

struct ClientData {
  Dataset train;
  Dataset test;
};

enum class BaseDistribution { gaussian_blobs, two_arcs };

struct SuiteConfig {
  std::size_t n_clients = 3;
  std::size_t samples_per_client = 375;  // 300 train / 75 test
  std::size_t num_classes = 2;
  std::size_t dim = 2;
  BaseDistribution base = BaseDistribution::gaussian_blobs;
  double radius = 4.0;
  double noise_std = 0.5;
  double rotation_step_deg = 60.0;
  std::vector<double> translation;  // per-client step, length <= dim
  std::optional<double> dirichlet_beta;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_clients < 2) throw ValidationError("data.n_clients must be >= 2");
    if (samples_per_client == 0) {
      throw ValidationError("data.samples_per_client must be > 0");
    }
    if (num_classes < 2) throw ValidationError("data.num_classes must be >= 2");
    if (dim < 2) throw ValidationError("data.dim must be >= 2");
    if (translation.size() > dim) {
      throw ValidationError("data.translation longer than data.dim");
    }
    if (!(noise_std >= 0.0)) throw ValidationError("data.noise_std must be >= 0");
    if (dirichlet_beta && !(*dirichlet_beta > 0.0)) {
      throw ValidationError("data.dirichlet_beta must be > 0");
    }
  }
};

inline constexpr double kPi = 3.14159265358979323846;

// Rotates the first two coordinates and adds the translation.
inline void apply_transform(Tensor& x, const DomainTransform& t) {
  const double a = t.rotation_deg * kPi / 180.0;
  const double c = std::cos(a), s = std::sin(a);
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    auto r = x.row(i);
    const double u = r[0], v = r[1];
    r[0] = c * u - s * v;
    r[1] = s * u + c * v;
    for (std::size_t d = 0; d < t.translation.size() && d < r.size(); ++d) {
      r[d] += t.translation[d];
    }
  }
}

inline void invert_transform(Tensor& x, const DomainTransform& t) {
  const double a = -t.rotation_deg * kPi / 180.0;
  const double c = std::cos(a), s = std::sin(a);
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    auto r = x.row(i);
    for (std::size_t d = 0; d < t.translation.size() && d < r.size(); ++d) {
      r[d] -= t.translation[d];
    }
    const double u = r[0], v = r[1];
    r[0] = c * u - s * v;
    r[1] = s * u + c * v;
  }
}

// Noise-free class centre of the base distribution (gaussian-blobs).
inline std::vector<double> blob_mean(const SuiteConfig& cfg, std::size_t cls) {
  std::vector<double> m(cfg.dim, 0.0);
  const double th = 2.0 * kPi * static_cast<double>(cls) /
                    static_cast<double>(cfg.num_classes);
  m[0] = cfg.radius * std::cos(th);
  m[1] = cfg.radius * std::sin(th);
  return m;
}

namespace detail {

inline void sample_base_point(const SuiteConfig& cfg, int label, Rng& rng,
                              std::span<double> out) {
  const auto cls = static_cast<std::size_t>(label);
  switch (cfg.base) {
    case BaseDistribution::gaussian_blobs: {
      const auto m = blob_mean(cfg, cls);
      for (std::size_t d = 0; d < cfg.dim; ++d) {
        out[d] = m[d] + cfg.noise_std * standard_normal(rng);
      }
      break;
    }
    case BaseDistribution::two_arcs: {
      const double t = uniform(rng, 0.0, kPi);
      if (cfg.num_classes == 2) {
        // Interleaved half-moons.
        const double r = cfg.radius / 2.0;
        out[0] = cls == 0 ? r * std::cos(t) : r * (1.0 - std::cos(t));
        out[1] = cls == 0 ? r * std::sin(t) : r * (0.5 - std::sin(t));
      } else {
        // Half-circle arcs, one per class, spread around the origin.
        const double th = 2.0 * kPi * static_cast<double>(cls) /
                          static_cast<double>(cfg.num_classes);
        const double cx = cfg.radius * std::cos(th), cy = cfg.radius * std::sin(th);
        const double r = cfg.radius / 2.0;
        out[0] = cx + r * std::cos(t + th);
        out[1] = cy + r * std::sin(t + th);
      }
      for (std::size_t d = 0; d < cfg.dim; ++d) {
        out[d] += cfg.noise_std * standard_normal(rng);
      }
      break;
    }
  }
}

inline Dataset sample_base(const SuiteConfig& cfg, std::size_t n, Rng& rng) {
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<int>(i % cfg.num_classes);
  }
  shuffle_in_place(labels, rng);
  Dataset d;
  d.features = Tensor({n, cfg.dim});
  for (std::size_t i = 0; i < n; ++i) {
    sample_base_point(cfg, labels[i], rng, d.features.row(i));
  }
  d.labels = std::move(labels);
  d.num_classes = cfg.num_classes;
  return d;
}

inline ClientData split_train_test(const Dataset& d, Rng& rng) {
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), 0);
  shuffle_in_place(idx, rng);
  const auto n_train = static_cast<std::size_t>(
      std::llround(0.8 * static_cast<double>(d.size())));
  if (n_train == 0 || n_train == d.size()) {
    throw ValidationError("train/test split: client " +
                          std::to_string(d.client_id) + " has " +
                          std::to_string(d.size()) + " records");
  }
  std::span<const std::size_t> all(idx);
  ClientData cd{subset(d, all.first(n_train)), subset(d, all.subspan(n_train))};
  cd.train.split = Split::train;
  cd.test.split = Split::test;
  return cd;
}

}  // namespace detail

inline DomainTransform client_transform(const SuiteConfig& cfg, std::size_t i) {
  DomainTransform t;
  t.rotation_deg = static_cast<double>(i) * cfg.rotation_step_deg;
  t.translation.resize(cfg.translation.size());
  for (std::size_t d = 0; d < cfg.translation.size(); ++d) {
    t.translation[d] = static_cast<double>(i) * cfg.translation[d];
  }
  t.noise_scale = cfg.noise_std;
  return t;
}

// Splits `pool` into `n_parts` disjoint parts whose per-class shares follow
// Dirichlet(beta·1). Redraws (up to 100 times) until every part is non-empty.
inline std::vector<Dataset> dirichlet_partition(const Dataset& pool,
                                                std::size_t n_parts, double beta,
                                                std::uint64_t seed) {
  if (n_parts == 0) throw ValidationError("dirichlet_partition: n_parts must be >= 1");
  if (!(beta > 0.0)) throw ValidationError("dirichlet_partition: beta must be > 0");
  if (n_parts == 1) return {pool};
  if (pool.size() < n_parts) {
    throw ValidationError("dirichlet_partition: pool of " +
                          std::to_string(pool.size()) + " records cannot fill " +
                          std::to_string(n_parts) + " parts");
  }
  Rng rng = make_rng(seed, "dirichlet");
  std::vector<std::vector<std::size_t>> by_class(pool.num_classes);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    by_class[static_cast<std::size_t>(pool.labels[i])].push_back(i);
  }
  for (int attempt = 0; attempt < 100; ++attempt) {
    std::vector<std::vector<std::size_t>> parts(n_parts);
    for (auto members : by_class) {
      if (members.empty()) continue;
      shuffle_in_place(members, rng);
      std::vector<double> w(n_parts);
      double total = 0.0;
      for (double& v : w) total += (v = gamma_draw(rng, beta));
      // Cut points from cumulative proportions.
      double cum = 0.0;
      std::size_t start = 0;
      for (std::size_t p = 0; p < n_parts; ++p) {
        cum += w[p] / total;
        std::size_t end = p + 1 == n_parts
                              ? members.size()
                              : static_cast<std::size_t>(std::llround(
                                    cum * static_cast<double>(members.size())));
        end = std::clamp(end, start, members.size());
        parts[p].insert(parts[p].end(), members.begin() + static_cast<std::ptrdiff_t>(start),
                        members.begin() + static_cast<std::ptrdiff_t>(end));
        start = end;
      }
    }
    if (std::any_of(parts.begin(), parts.end(),
                    [](const auto& p) { return p.empty(); })) {
      continue;
    }
    std::vector<Dataset> out;
    out.reserve(n_parts);
    for (std::size_t p = 0; p < n_parts; ++p) {
      std::sort(parts[p].begin(), parts[p].end());
      Dataset d = subset(pool, parts[p]);
      d.client_id = static_cast<int>(p);
      out.push_back(std::move(d));
    }
    return out;
  }
  throw ValidationError("dirichlet_partition: could not give every part a sample");
}

inline std::vector<ClientData> generate_suite(const SuiteConfig& cfg) {
  cfg.validate();
  std::vector<Dataset> raw(cfg.n_clients);
  if (cfg.dirichlet_beta) {
    Rng rng = make_rng(cfg.seed, "data/pool");
    Dataset pool = detail::sample_base(cfg, cfg.n_clients * cfg.samples_per_client, rng);
    raw = dirichlet_partition(pool, cfg.n_clients, *cfg.dirichlet_beta,
                              derive_seed(cfg.seed, "data/dirichlet"));
  } else {
    for (std::size_t i = 0; i < cfg.n_clients; ++i) {
      Rng rng = make_rng(cfg.seed, "data/client", {i});
      raw[i] = detail::sample_base(cfg, cfg.samples_per_client, rng);
    }
  }
  std::vector<ClientData> suite;
  suite.reserve(cfg.n_clients);
  for (std::size_t i = 0; i < cfg.n_clients; ++i) {
    Dataset& d = raw[i];
    d.client_id = static_cast<int>(i);
    d.domain = client_transform(cfg, i);
    apply_transform(d.features, d.domain);
    Rng rng = make_rng(cfg.seed, "data/split", {i});
    suite.push_back(detail::split_train_test(d, rng));
  }
  return suite;
}

// Union of all clients' records for one split.
inline Dataset pooled(const std::vector<ClientData>& suite, Split split) {
  std::vector<Dataset> parts;
  for (const auto& c : suite) parts.push_back(split == Split::train ? c.train : c.test);
  Dataset d = concat(parts);
  d.client_id = -1;
  return d;
}

// ---------------------------------------------------------------------------
// CSV: header `f0,...,f{D-1},label`, 17 significant digits per value.

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void save_dataset(const std::filesystem::path& path, const Tensor& features,
                         std::span<const int> labels) {
  std::ofstream os(path);
  if (!os) throw ValidationError("cannot open " + path.string() + " for writing");
  const std::size_t dim = features.dim(1);
  for (std::size_t d = 0; d < dim; ++d) os << 'f' << d << ',';
  os << "label\n";
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (std::size_t d = 0; d < dim; ++d) os << format_double(features(i, d)) << ',';
    os << labels[i] << '\n';
  }
}

inline void save_dataset(const std::filesystem::path& path, const Dataset& d) {
  save_dataset(path, d.features, d.labels);
}

struct CsvTable {
  Tensor features;
  std::vector<int> labels;
};

inline CsvTable read_labeled_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& why) {
    throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + why);
  };
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!s.empty() && s.back() == ',') cells.emplace_back();
    return cells;
  };
  if (!std::getline(is, line)) {
    lineno = 1;
    fail("empty file");
  }
  ++lineno;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split(line);
  if (header.size() < 2 || header.back() != "label") fail("header must end with 'label'");
  const std::size_t dim = header.size() - 1;
  for (std::size_t d = 0; d < dim; ++d) {
    if (header[d] != "f" + std::to_string(d)) fail("unexpected header column '" + header[d] + "'");
  }
  std::vector<double> values;
  std::vector<int> labels;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != dim + 1) {
      fail("expected " + std::to_string(dim + 1) + " fields, got " +
           std::to_string(cells.size()));
    }
    for (std::size_t d = 0; d < dim; ++d) {
      const std::string& c = cells[d];
      double v = 0.0;
      auto [p, ec] = std::from_chars(c.data(), c.data() + c.size(), v);
      if (ec != std::errc() || p != c.data() + c.size()) {
        fail("bad number '" + c + "'");
      }
      values.push_back(v);
    }
    int y = 0;
    const std::string& c = cells[dim];
    auto [p, ec] = std::from_chars(c.data(), c.data() + c.size(), y);
    if (ec != std::errc() || p != c.data() + c.size()) fail("bad label '" + c + "'");
    labels.push_back(y);
  }
  if (labels.empty()) fail("no records");
  return {Tensor({labels.size(), dim}, std::move(values)), std::move(labels)};
}

inline Dataset load_dataset(const std::filesystem::path& path, std::size_t num_classes) {
  CsvTable t = read_labeled_csv(path);
  Dataset d;
  d.features = std::move(t.features);
  d.labels = std::move(t.labels);
  d.num_classes = num_classes;
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------
// Suite manifest: JSON listing per-client files and domain descriptors.

inline nlohmann::json domain_to_json(const DomainTransform& t) {
  return {{"rotation_deg", t.rotation_deg},
          {"translation", t.translation},
          {"noise_scale", t.noise_scale}};
}

inline DomainTransform domain_from_json(const nlohmann::json& j) {
  DomainTransform t;
  t.rotation_deg = j.at("rotation_deg").get<double>();
  t.translation = j.at("translation").get<std::vector<double>>();
  t.noise_scale = j.at("noise_scale").get<double>();
  return t;
}

inline void save_suite(const std::filesystem::path& dir,
                       const std::vector<ClientData>& suite,
                       const nlohmann::json& provenance) {
  std::filesystem::create_directories(dir);
  nlohmann::json m = provenance;
  m["num_classes"] = suite.front().train.num_classes;
  m["dim"] = suite.front().train.dim();
  m["clients"] = nlohmann::json::array();
  for (std::size_t i = 0; i < suite.size(); ++i) {
    const std::string tr = "client_" + std::to_string(i) + "_train.csv";
    const std::string te = "client_" + std::to_string(i) + "_test.csv";
    save_dataset(dir / tr, suite[i].train);
    save_dataset(dir / te, suite[i].test);
    m["clients"].push_back({{"id", i},
                            {"train", tr},
                            {"test", te},
                            {"domain", domain_to_json(suite[i].train.domain)}});
  }
  std::ofstream os(dir / "manifest.json");
  os << m.dump(2) << '\n';
}

struct LoadedSuite {
  std::vector<ClientData> clients;
  nlohmann::json manifest;
};

inline LoadedSuite load_suite(const std::filesystem::path& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw ValidationError("cannot open suite manifest " + manifest_path.string());
  LoadedSuite out;
  try {
    out.manifest = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(manifest_path.string() + ": " + e.what());
  }
  const auto dir = manifest_path.parent_path();
  const auto k = out.manifest.at("num_classes").get<std::size_t>();
  for (const auto& c : out.manifest.at("clients")) {
    ClientData cd{load_dataset(dir / c.at("train").get<std::string>(), k),
                  load_dataset(dir / c.at("test").get<std::string>(), k)};
    const int id = c.at("id").get<int>();
    const auto dom = domain_from_json(c.at("domain"));
    for (Dataset* d : {&cd.train, &cd.test}) {
      d->client_id = id;
      d->domain = dom;
    }
    cd.test.split = Split::test;
    out.clients.push_back(std::move(cd));
  }
  return out;
}

}  // namespace desa
