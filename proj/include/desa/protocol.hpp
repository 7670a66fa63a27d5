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

// Serverless round engine. Before training, every client's anchor set is
// flooded over the topology and merged into one global anchor set. Each
// round the sampled clients broadcast logits on the global anchors to their
// neighbours, form the mean of the freshest neighbour logits they hold, and
// run local SGD on the combined objective. All broadcasts use round-start
// snapshots, so the outcome does not depend on client ordering.

#include <algorithm>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "desa/datasets.hpp"
#include "desa/distill.hpp"
#include "desa/errors.hpp"
#include "desa/eval.hpp"
#include "desa/losses.hpp"
#include "desa/models.hpp"
#include "desa/parallel.hpp"
#include "desa/rng.hpp"

namespace desa {

enum class TopologyKind { full, ring, random_k };

inline const char* to_string(TopologyKind k) {
  switch (k) {
    case TopologyKind::full: return "full";
    case TopologyKind::ring: return "ring";
    case TopologyKind::random_k: return "random-k";
  }
  return "?";
}

struct Topology {
  std::size_t n_clients = 0;
  std::vector<std::vector<std::size_t>> neighbors;  // sorted
  TopologyKind kind = TopologyKind::full;

  // Symmetric, loop-free and connected.
  void validate() const {
    if (neighbors.size() != n_clients) throw ValidationError("Topology: adjacency size");
    for (std::size_t i = 0; i < n_clients; ++i) {
      for (std::size_t j : neighbors[i]) {
        if (j == i) throw ValidationError("Topology: self-loop at " + std::to_string(i));
        if (j >= n_clients) throw ValidationError("Topology: neighbour out of range");
        const auto& back = neighbors[j];
        if (std::find(back.begin(), back.end(), i) == back.end()) {
          throw ValidationError("Topology: edge " + std::to_string(i) + "-" +
                                std::to_string(j) + " is not symmetric");
        }
      }
    }
    if (n_clients == 0) return;
    std::vector<bool> seen(n_clients, false);
    std::vector<std::size_t> stack{0};
    seen[0] = true;
    while (!stack.empty()) {
      const std::size_t u = stack.back();
      stack.pop_back();
      for (std::size_t v : neighbors[u]) {
        if (!seen[v]) {
          seen[v] = true;
          stack.push_back(v);
        }
      }
    }
    if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
      throw ValidationError("Topology: graph is not connected");
    }
  }

  static Topology from_edges(std::size_t n, const std::set<std::pair<std::size_t, std::size_t>>& edges,
                             TopologyKind kind) {
    Topology t{n, std::vector<std::vector<std::size_t>>(n), kind};
    for (auto [a, b] : edges) {
      t.neighbors[a].push_back(b);
      t.neighbors[b].push_back(a);
    }
    for (auto& nb : t.neighbors) {
      std::sort(nb.begin(), nb.end());
      nb.erase(std::unique(nb.begin(), nb.end()), nb.end());
    }
    t.validate();
    return t;
  }

  static Topology full(std::size_t n) {
    std::set<std::pair<std::size_t, std::size_t>> e;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) e.insert({i, j});
    }
    return from_edges(n, e, TopologyKind::full);
  }

  static Topology ring(std::size_t n) {
    std::set<std::pair<std::size_t, std::size_t>> e;
    for (std::size_t i = 0; n > 1 && i < n; ++i) {
      const std::size_t j = (i + 1) % n;
      if (i != j) e.insert({std::min(i, j), std::max(i, j)});
    }
    return from_edges(n, e, TopologyKind::ring);
  }

  // Ring backbone plus random chords until every node has degree >= k
  // (where the graph allows it).
  static Topology random_k(std::size_t n, std::size_t k, std::uint64_t seed) {
    std::set<std::pair<std::size_t, std::size_t>> e;
    for (std::size_t i = 0; n > 1 && i < n; ++i) {
      const std::size_t j = (i + 1) % n;
      if (i != j) e.insert({std::min(i, j), std::max(i, j)});
    }
    Rng rng = make_rng(seed, "topology");
    std::vector<std::size_t> degree(n, 0);
    for (auto [a, b] : e) ++degree[a], ++degree[b];
    const std::size_t target = std::min(k, n ? n - 1 : 0);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t guard = 0;
      while (degree[i] < target && guard++ < 64 * n) {
        const std::size_t j = uniform_index(rng, n);
        if (j == i) continue;
        if (e.insert({std::min(i, j), std::max(i, j)}).second) ++degree[i], ++degree[j];
      }
    }
    return from_edges(n, e, TopologyKind::random_k);
  }
};

inline Topology make_topology(TopologyKind kind, std::size_t n, std::size_t degree,
                              std::uint64_t seed) {
  switch (kind) {
    case TopologyKind::full: return Topology::full(n);
    case TopologyKind::ring: return Topology::ring(n);
    case TopologyKind::random_k: return Topology::random_k(n, degree, seed);
  }
  throw ConfigError("unknown topology");
}

// Every inter-client payload is recorded here.
enum class PayloadKind { anchor_set, logits, model_params };

inline const char* to_string(PayloadKind k) {
  switch (k) {
    case PayloadKind::anchor_set: return "anchor_set";
    case PayloadKind::logits: return "logits";
    case PayloadKind::model_params: return "model_params";
  }
  return "?";
}

struct TrafficRecord {
  long round = -1;  // -1 for the pre-training phase
  PayloadKind kind = PayloadKind::logits;
  std::size_t messages = 0;   // point-to-point deliveries
  std::uint64_t scalars = 0;  // sender-side payload size
};

struct ModelZoo {
  std::size_t small_width = 32;
  std::size_t large_width = 64;
  std::size_t large_embed = 32;

  ArchSpec make(const std::string& id, std::size_t input_dim, std::size_t k) const {
    if (id == "arch-S") return arch_small(input_dim, k, small_width);
    if (id == "arch-L") return arch_large(input_dim, k, large_width, large_embed);
    throw ConfigError("unknown architecture '" + id + "' (expected arch-S or arch-L)");
  }
};

struct RunConfig {
  Algorithm algorithm = Algorithm::desa;
  std::size_t rounds = 100;
  std::size_t local_epochs = 1;
  std::size_t batch_size = 32;
  double lr = 0.01;
  double client_sample_ratio = 1.0;
  LossCoefficients coef;
  bool anchor_ce = true;
  double anchor_batch_ratio = 1.0;  // anchors per local record in a batch
  MergeMode merge_mode = MergeMode::average;
  TopologyKind topology = TopologyKind::full;
  std::size_t topology_degree = 2;
  std::vector<std::string> archs{"arch-S"};  // cycled over clients
  ModelZoo zoo;
  bool shared_init = false;
  bool fedavg_weight_by_size = false;
  std::uint64_t seed = 0;
  std::size_t workers = 1;  // execution only; never affects results

  void validate() const {
    if (rounds == 0) throw ValidationError("run.rounds must be >= 1");
    if (local_epochs == 0) throw ValidationError("run.local_epochs must be >= 1");
    if (batch_size == 0) throw ValidationError("run.batch_size must be >= 1");
    if (!(lr > 0.0)) throw ValidationError("run.lr must be > 0");
    if (!(client_sample_ratio > 0.0 && client_sample_ratio <= 1.0)) {
      throw ValidationError("run.client_sample_ratio must be in (0, 1]");
    }
    if (!(coef.lambda_reg >= 0.0)) throw ValidationError("run.lambda_reg must be >= 0");
    if (!(coef.lambda_kd >= 0.0)) throw ValidationError("run.lambda_kd must be >= 0");
    if (!(coef.tau_temp > 0.0)) throw ValidationError("run.tau_temp must be > 0");
    if (!(anchor_batch_ratio > 0.0)) {
      throw ValidationError("run.anchor_batch_ratio must be > 0");
    }
    if (archs.empty()) throw ValidationError("run.archs must list at least one architecture");
  }

  // Coefficients and anchor usage actually applied by the algorithm.
  LossCoefficients effective_coef() const {
    LossCoefficients c = coef;
    if (algorithm == Algorithm::logit_only) c.lambda_reg = 0.0;
    if (algorithm == Algorithm::standalone || algorithm == Algorithm::fedavg) {
      c.lambda_reg = c.lambda_kd = 0.0;
    }
    return c;
  }

  bool uses_anchors() const {
    return algorithm == Algorithm::desa || algorithm == Algorithm::logit_only;
  }

  bool effective_anchor_ce() const { return algorithm == Algorithm::desa && anchor_ce; }
};

struct ClientState {
  std::size_t id = 0;
  Model model;
  Dataset train;
  Dataset test;
  std::shared_ptr<const AnchorSet> anchors;
  std::optional<Tensor> broadcast_logits;  // [|D^Syn|, K]
  long broadcast_round = -1;
  LossCoefficients coef;
};

struct ClientRoundMetrics {
  std::size_t client = 0;
  bool sampled = false;
  bool used_kd = false;
  std::size_t steps = 0;
  LossComponents mean;  // averaged over local steps
  double total = 0.0;
};

struct RoundMetrics {
  std::size_t round = 0;
  std::vector<ClientRoundMetrics> clients;
};

struct Federation {
  RunConfig cfg;
  Topology topology;
  std::vector<ClientState> clients;
  std::shared_ptr<const AnchorSet> global_anchors;
  std::optional<Model> global_model;  // fedavg only
  std::vector<TrafficRecord> traffic;
};

// Floods every client's anchor set over the topology until each client holds
// all of them, then each merges (in origin order) into the global set.
inline std::shared_ptr<const AnchorSet> init_phase(std::vector<ClientState>& clients,
                                                   std::span<const AnchorSet> local_anchors,
                                                   const Topology& topology, MergeMode mode,
                                                   std::vector<TrafficRecord>* traffic = nullptr) {
  const std::size_t n = clients.size();
  if (local_anchors.size() != n) {
    throw ValidationError("init_phase: " + std::to_string(local_anchors.size()) +
                          " anchor sets for " + std::to_string(n) + " clients");
  }
  if (topology.n_clients != n) throw ValidationError("init_phase: topology size mismatch");
  for (const auto& a : local_anchors) a.validate();

  std::vector<std::set<std::size_t>> held(n);
  for (std::size_t i = 0; i < n; ++i) held[i].insert(i);
  TrafficRecord rec{-1, PayloadKind::anchor_set, 0, 0};
  for (bool changed = true; changed;) {
    changed = false;
    auto next = held;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j : topology.neighbors[i]) {
        for (std::size_t origin : held[j]) {
          if (!held[i].count(origin) && next[i].insert(origin).second) {
            ++rec.messages;
            rec.scalars += local_anchors[origin].features.size();
            changed = true;
          }
        }
      }
    }
    held = std::move(next);
  }

  std::shared_ptr<const AnchorSet> global;
  for (std::size_t i = 0; i < n; ++i) {
    if (held[i].size() != n) {
      throw ValidationError("init_phase: client " + std::to_string(i) +
                            " did not receive every anchor set");
    }
    std::vector<AnchorSet> mine;
    for (std::size_t origin : held[i]) mine.push_back(local_anchors[origin]);
    auto merged = std::make_shared<const AnchorSet>(merge_anchors(mine, mode));
    if (global && !(*merged == *global)) {
      throw NumericError("init_phase: clients disagree on the merged anchor set");
    }
    if (!global) global = merged;
    clients[i].anchors = global;
    clients[i].broadcast_logits.reset();
    clients[i].broadcast_round = -1;
  }
  if (traffic) traffic->push_back(rec);
  return global;
}

// Independent Bernoulli(ratio) per client; one uniformly chosen client is
// forced in when the draw comes up empty.
inline std::vector<bool> sample_clients(const RunConfig& cfg, std::size_t n, std::size_t round) {
  Rng rng = make_rng(cfg.seed, "protocol/sample", {round});
  std::vector<bool> s(n);
  bool any = false;
  for (std::size_t i = 0; i < n; ++i) {
    s[i] = uniform01(rng) < cfg.client_sample_ratio;
    any = any || s[i];
  }
  if (!any && n) s[uniform_index(rng, n)] = true;
  return s;
}

namespace detail {

inline ClientRoundMetrics local_train(const RunConfig& cfg, ClientState& c,
                                      const std::optional<Tensor>& teacher,
                                      std::size_t round, const LossCoefficients& coef,
                                      bool anchor_ce) {
  ClientRoundMetrics m;
  m.client = c.id;
  m.sampled = true;
  const AnchorSet* anchors = c.anchors.get();
  const bool use_kd = anchors && teacher && coef.lambda_kd > 0.0;
  const bool need_anchors = anchors && (anchor_ce || coef.lambda_reg > 0.0 || use_kd);
  m.used_kd = use_kd;
  LossCoefficients step_coef = coef;
  if (!use_kd) step_coef.lambda_kd = 0.0;

  Rng rng = make_rng(cfg.seed, "protocol/local", {c.id, round});
  Rng anchor_rng = make_rng(cfg.seed, "protocol/anchor", {c.id, round});
  std::vector<std::size_t> order(c.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::size_t> anchor_pool;
  if (need_anchors) {
    anchor_pool.resize(anchors->size());
    std::iota(anchor_pool.begin(), anchor_pool.end(), 0);
  }
  double sum_ce = 0.0, sum_reg = 0.0, sum_kd = 0.0, sum_total = 0.0;
  for (std::size_t e = 0; e < cfg.local_epochs; ++e) {
    shuffle_in_place(order, rng);
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      std::span<const std::size_t> bi(order.data() + s, std::min(cfg.batch_size, order.size() - s));
      LossBatch b;
      b.local_x = gather_rows(c.train.features, bi);
      b.local_y.reserve(bi.size());
      for (std::size_t i : bi) b.local_y.push_back(c.train.labels[i]);
      b.anchor_ce = anchor_ce;
      b.coef = step_coef;
      if (need_anchors) {
        const auto want = static_cast<std::size_t>(
            std::llround(cfg.anchor_batch_ratio * static_cast<double>(bi.size())));
        const std::size_t count = std::clamp<std::size_t>(want, 1, anchor_pool.size());
        for (std::size_t i = 0; i < count; ++i) {
          const std::size_t j = i + uniform_index(anchor_rng, anchor_pool.size() - i);
          std::swap(anchor_pool[i], anchor_pool[j]);
        }
        std::span<const std::size_t> ai(anchor_pool.data(), count);
        b.anchor_x = gather_rows(anchors->features, ai);
        b.anchor_y.reserve(count);
        for (std::size_t i : ai) b.anchor_y.push_back(anchors->labels[i]);
        if (use_kd) b.teacher_logits = gather_rows(*teacher, ai);
      }
      TotalLoss tl = total_loss(c.model, b);
      apply_sgd(c.model, tl.grads, cfg.lr);
      sum_ce += tl.components.ce;
      sum_reg += tl.components.reg;
      sum_kd += tl.components.kd;
      sum_total += tl.loss;
      ++m.steps;
    }
  }
  const double n = static_cast<double>(std::max<std::size_t>(m.steps, 1));
  m.mean = {sum_ce / n, sum_reg / n, sum_kd / n};
  m.total = sum_total / n;
  if (!model_is_finite(c.model)) {
    throw NumericError("local training diverged: client " + std::to_string(c.id) +
                       " round " + std::to_string(round));
  }
  return m;
}

}  // namespace detail

inline RoundMetrics run_round(Federation& fed, std::size_t round) {
  const RunConfig& cfg = fed.cfg;
  const std::size_t n = fed.clients.size();
  const auto sampled = sample_clients(cfg, n, round);
  RoundMetrics rm;
  rm.round = round;
  rm.clients.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    rm.clients[i].client = i;
    rm.clients[i].sampled = sampled[i];
  }
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < n; ++i) {
    if (sampled[i]) active.push_back(i);
  }
  const LossCoefficients coef = cfg.effective_coef();
  const bool anchor_ce = cfg.effective_anchor_ce();

  if (cfg.algorithm == Algorithm::fedavg) {
    const Model& global = *fed.global_model;
    for (std::size_t i : active) fed.clients[i].model = global;
    parallel_for(active.size(), cfg.workers, [&](std::size_t k) {
      auto& c = fed.clients[active[k]];
      rm.clients[c.id] = detail::local_train(cfg, c, std::nullopt, round, coef, false);
    });
    Params avg = zeros_like(global.params);
    double wsum = 0.0;
    std::vector<double> w;
    for (std::size_t i : active) {
      w.push_back(cfg.fedavg_weight_by_size ? static_cast<double>(fed.clients[i].train.size())
                                            : 1.0);
      wsum += w.back();
    }
    for (std::size_t k = 0; k < active.size(); ++k) {
      accumulate(avg, fed.clients[active[k]].model.params, w[k] / wsum);
    }
    fed.global_model->params = std::move(avg);
    for (auto& c : fed.clients) c.model = *fed.global_model;
    const std::uint64_t p = fed.global_model->parameter_count();
    fed.traffic.push_back({static_cast<long>(round), PayloadKind::model_params,
                           2 * active.size(), 2 * p * active.size()});
    return rm;
  }

  std::vector<std::optional<Tensor>> teachers(n);
  if (cfg.uses_anchors()) {
    // Phase 1: broadcasts from round-start snapshots.
    std::vector<Tensor> fresh(active.size());
    parallel_for(active.size(), cfg.workers, [&](std::size_t k) {
      fresh[k] = predict_logits(fed.clients[active[k]].model, fed.global_anchors->features);
    });
    TrafficRecord rec{static_cast<long>(round), PayloadKind::logits, 0, 0};
    for (std::size_t k = 0; k < active.size(); ++k) {
      auto& c = fed.clients[active[k]];
      rec.messages += fed.topology.neighbors[c.id].size();
      rec.scalars += fresh[k].size();
      c.broadcast_logits = std::move(fresh[k]);
      c.broadcast_round = static_cast<long>(round);
    }
    fed.traffic.push_back(rec);
    // Phase 2: neighbour means over whatever each neighbour last broadcast.
    for (std::size_t i : active) {
      std::optional<Tensor> sum;
      std::size_t count = 0;
      for (std::size_t j : fed.topology.neighbors[i]) {
        const auto& z = fed.clients[j].broadcast_logits;
        if (!z) continue;
        if (!sum) sum = Tensor(z->shape());
        add_inplace(*sum, *z);
        ++count;
      }
      if (count) {
        for (double& v : sum->values()) v /= static_cast<double>(count);
        teachers[i] = std::move(sum);
      }
    }
  }
  // Phase 3: local updates, each client owning its own state.
  parallel_for(active.size(), cfg.workers, [&](std::size_t k) {
    auto& c = fed.clients[active[k]];
    rm.clients[c.id] = detail::local_train(cfg, c, teachers[c.id], round, coef, anchor_ce);
  });
  return rm;
}

struct ExperimentReport {
  RunConfig cfg;
  std::vector<RoundMetrics> rounds;
  AccuracyMatrix accuracy;
  std::vector<Model> final_models;
  std::vector<TrafficRecord> traffic;
  std::shared_ptr<const AnchorSet> global_anchors;
};

inline Federation make_federation(const RunConfig& cfg, const std::vector<ClientData>& suite,
                                  std::span<const AnchorSet> client_anchors) {
  cfg.validate();
  if (suite.empty()) throw ValidationError("run: empty suite");
  Federation fed;
  fed.cfg = cfg;
  const std::size_t n = suite.size();
  const std::size_t dim = suite.front().train.dim();
  const std::size_t k = suite.front().train.num_classes;
  fed.topology = make_topology(cfg.topology, n, cfg.topology_degree,
                               derive_seed(cfg.seed, "topology"));
  std::vector<ArchSpec> specs;
  for (std::size_t i = 0; i < n; ++i) {
    specs.push_back(cfg.zoo.make(cfg.archs[i % cfg.archs.size()], dim, k));
  }
  if (cfg.algorithm == Algorithm::fedavg) {
    for (const auto& s : specs) {
      if (!(s == specs.front())) {
        throw ConfigError("fedavg requires homogeneous architectures (run.archs)");
      }
    }
    fed.global_model = init_model(specs.front(), derive_seed(cfg.seed, "model", {0}));
  }
  for (std::size_t i = 0; i < n; ++i) {
    ClientState c;
    c.id = i;
    c.model = fed.global_model ? *fed.global_model
                               : init_model(specs[i], derive_seed(cfg.seed, "model",
                                                                  {cfg.shared_init ? 0 : i}));
    c.train = suite[i].train;
    c.test = suite[i].test;
    c.coef = cfg.effective_coef();
    fed.clients.push_back(std::move(c));
  }
  if (cfg.uses_anchors()) {
    fed.global_anchors =
        init_phase(fed.clients, client_anchors, fed.topology, cfg.merge_mode, &fed.traffic);
  }
  return fed;
}

inline ExperimentReport run_experiment(const RunConfig& cfg, const std::vector<ClientData>& suite,
                                       std::span<const AnchorSet> client_anchors) {
  Federation fed = make_federation(cfg, suite, client_anchors);
  ExperimentReport rep;
  rep.cfg = cfg;
  for (std::size_t t = 0; t < cfg.rounds; ++t) rep.rounds.push_back(run_round(fed, t));
  for (const auto& c : fed.clients) rep.final_models.push_back(c.model);
  rep.accuracy = evaluate_all(rep.final_models, suite);
  rep.traffic = std::move(fed.traffic);
  rep.global_anchors = fed.global_anchors;
  return rep;
}

}  // namespace desa
