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

// Synthetic anchor generation by distribution matching: per class, the mean
// embedding of synthetic records is pulled onto the mean embedding of a real
// batch under a freshly drawn random encoder every iteration. The optional
// DP mode clips the synthetic-feature gradient and adds Gaussian noise
// before each SGD step.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "desa/datasets.hpp"
#include "desa/errors.hpp"
#include "desa/models.hpp"
#include "desa/rng.hpp"
#include "desa/tensor.hpp"

namespace desa {

// Class-major layout: record c*ipc + s is slot s of class c.
struct AnchorSet {
  Tensor features;  // [ipc*K, D]
  std::vector<int> labels;
  std::string origin;  // client id or "global"
  std::size_t ipc = 0;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.dim(1); }

  void validate() const {
    if (ipc == 0 || num_classes < 2) {
      throw ValidationError("AnchorSet: ipc must be >= 1 and num_classes >= 2");
    }
    if (labels.size() != ipc * num_classes || features.dim(0) != labels.size()) {
      throw DimensionError("AnchorSet: expected " +
                           std::to_string(ipc * num_classes) + " records, got " +
                           std::to_string(labels.size()));
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] != static_cast<int>(i / ipc)) {
        throw ValidationError("AnchorSet: record " + std::to_string(i) +
                              " breaks the class-major balanced layout");
      }
    }
    if (!features.all_finite()) throw NumericError("AnchorSet: non-finite feature");
  }

  Dataset as_dataset() const {
    Dataset d;
    d.features = features;
    d.labels = labels;
    d.num_classes = num_classes;
    return d;
  }

  friend bool operator==(const AnchorSet&, const AnchorSet&) = default;
};

enum class EncoderKind { random_mlp, identity };
enum class AnchorInit { real, noise };

struct DpConfig {
  double clip_norm = 2.0;
  double noise_sigma = 1.2;
  std::size_t batch_size = 256;
};

struct DistillConfig {
  std::size_t ipc = 50;
  std::size_t iterations = 300;
  double lr = 1.0;
  double momentum = 0.5;
  std::size_t batch_size = 256;  // real records per class per iteration
  EncoderKind encoder = EncoderKind::random_mlp;
  std::size_t encoder_min_width = 32;
  std::size_t encoder_max_width = 64;
  AnchorInit init = AnchorInit::real;
  std::uint64_t seed = 0;
  std::optional<DpConfig> dp;

  void validate() const {
    if (ipc == 0) throw ValidationError("distill.ipc must be >= 1");
    if (!(lr > 0.0)) throw ValidationError("distill.lr must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) {
      throw ValidationError("distill.momentum must be in [0, 1)");
    }
    if (batch_size == 0) throw ValidationError("distill.batch_size must be >= 1");
    if (encoder_min_width == 0 || encoder_max_width < encoder_min_width) {
      throw ValidationError("distill.encoder width range is empty");
    }
    if (dp) {
      if (!(dp->clip_norm > 0.0)) throw ValidationError("distill.dp.clip_norm must be > 0");
      if (!(dp->noise_sigma >= 0.0)) {
        throw ValidationError("distill.dp.noise_sigma must be >= 0");
      }
      if (dp->batch_size == 0) throw ValidationError("distill.dp.batch_size must be >= 1");
    }
  }
};

// Optional per-iteration record of the optimisation.
struct DistillTrace {
  std::vector<double> objective;            // before each step
  std::vector<double> clipped_grad_norm;    // DP only; after clipping, pre-noise
  std::vector<double> noise_draws;          // DP only; N(0, sigma) before scaling
  std::size_t max_noise_draws = 0;          // 0 keeps none
};

// A feature extractor for one distillation iteration; empty layers means the
// identity map.
struct FeatureMap {
  std::vector<Dense> layers;

  Tensor apply(const Tensor& x) const {
    return layers.empty() ? x : encoder_forward(layers, x).output;
  }
};

inline FeatureMap sample_feature_map(const DistillConfig& cfg, std::size_t input_dim,
                                     Rng& rng) {
  if (cfg.encoder == EncoderKind::identity) return {};
  const std::size_t span = cfg.encoder_max_width - cfg.encoder_min_width + 1;
  const std::size_t width = cfg.encoder_min_width + uniform_index(rng, span);
  FeatureMap fm{init_encoder(input_dim, {width}, rng)};
  const double limit = std::sqrt(6.0 / static_cast<double>(input_dim + width));
  for (double& b : fm.layers[0].bias.values()) b = uniform(rng, -limit, limit);
  return fm;
}

namespace detail {

inline std::vector<double> column_mean(const Tensor& x) {
  std::vector<double> m(x.dim(1), 0.0);
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    auto r = x.row(i);
    for (std::size_t d = 0; d < m.size(); ++d) m[d] += r[d];
  }
  for (double& v : m) v /= static_cast<double>(x.dim(0));
  return m;
}

inline std::vector<std::vector<std::size_t>> class_members(const Dataset& d) {
  std::vector<std::vector<std::size_t>> m(d.num_classes);
  for (std::size_t i = 0; i < d.size(); ++i) {
    m[static_cast<std::size_t>(d.labels[i])].push_back(i);
  }
  return m;
}

// Without replacement; the whole class once `count` covers it.
inline std::vector<std::size_t> sample_members(const std::vector<std::size_t>& members,
                                               std::size_t count, Rng& rng) {
  if (count >= members.size()) return members;
  std::vector<std::size_t> pool = members;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + uniform_index(rng, pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  return pool;
}

inline void require_all_classes(const Dataset& d,
                                const std::vector<std::vector<std::size_t>>& members) {
  for (std::size_t c = 0; c < members.size(); ++c) {
    if (members[c].empty()) {
      throw ValidationError("distill: class " + std::to_string(c) +
                            " has no records in client " +
                            std::to_string(d.client_id));
    }
  }
}

// Per-class objective and its gradient w.r.t. the synthetic rows of the class.
inline double class_match(const FeatureMap& fm, const Tensor& real, const Tensor& syn,
                          Tensor* grad_syn) {
  const auto mr = column_mean(fm.apply(real));
  double loss = 0.0;
  if (fm.layers.empty()) {
    const auto ms = column_mean(syn);
    std::vector<double> diff(mr.size());
    for (std::size_t d = 0; d < diff.size(); ++d) {
      diff[d] = mr[d] - ms[d];
      loss += diff[d] * diff[d];
    }
    if (grad_syn) {
      *grad_syn = Tensor(syn.shape());
      const double s = -2.0 / static_cast<double>(syn.dim(0));
      for (std::size_t i = 0; i < syn.dim(0); ++i) {
        for (std::size_t d = 0; d < diff.size(); ++d) (*grad_syn)(i, d) = s * diff[d];
      }
    }
    return loss;
  }
  EncoderTrace tr = encoder_forward(fm.layers, syn);
  const auto ms = column_mean(tr.output);
  std::vector<double> diff(mr.size());
  for (std::size_t d = 0; d < diff.size(); ++d) {
    diff[d] = mr[d] - ms[d];
    loss += diff[d] * diff[d];
  }
  if (grad_syn) {
    Tensor ge(tr.output.shape());
    const double s = -2.0 / static_cast<double>(syn.dim(0));
    for (std::size_t i = 0; i < ge.dim(0); ++i) {
      for (std::size_t d = 0; d < diff.size(); ++d) ge(i, d) = s * diff[d];
    }
    *grad_syn = encoder_backward(fm.layers, tr, std::move(ge), nullptr);
  }
  return loss;
}

inline Tensor class_rows(const Tensor& x, std::size_t cls, std::size_t ipc) {
  std::vector<std::size_t> idx(ipc);
  std::iota(idx.begin(), idx.end(), cls * ipc);
  return gather_rows(x, idx);
}

// Class-balanced subset: every class trimmed to the smallest class count,
// keeping original order.
inline Dataset balanced_subset(const Dataset& d, Rng& rng) {
  auto members = class_members(d);
  std::size_t m = std::numeric_limits<std::size_t>::max();
  for (const auto& c : members) m = std::min(m, c.size());
  std::vector<std::size_t> keep;
  for (const auto& c : members) {
    auto pick = sample_members(c, m, rng);
    keep.insert(keep.end(), pick.begin(), pick.end());
  }
  std::sort(keep.begin(), keep.end());
  return subset(d, keep);
}

inline AnchorSet run_distillation(const Dataset& data, const DistillConfig& cfg,
                                  DistillTrace* trace) {
  cfg.validate();
  data.validate();
  const auto members = class_members(data);
  require_all_classes(data, members);
  const std::size_t k = data.num_classes, dim = data.dim(), ipc = cfg.ipc;

  AnchorSet a;
  a.ipc = ipc;
  a.num_classes = k;
  a.origin = data.client_id >= 0 ? std::to_string(data.client_id) : "pool";
  a.features = Tensor({ipc * k, dim});
  a.labels.resize(ipc * k);
  {
    Rng rng = make_rng(cfg.seed, "distill/init");
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<std::size_t> pick;
      if (cfg.init == AnchorInit::real) {
        pick = sample_members(members[c], std::min(ipc, members[c].size()), rng);
        shuffle_in_place(pick, rng);
        while (pick.size() < ipc) pick.push_back(members[c][uniform_index(rng, members[c].size())]);
      }
      for (std::size_t s = 0; s < ipc; ++s) {
        const std::size_t r = c * ipc + s;
        a.labels[r] = static_cast<int>(c);
        auto dst = a.features.row(r);
        if (cfg.init == AnchorInit::real) {
          auto src = data.features.row(pick[s]);
          std::copy(src.begin(), src.end(), dst.begin());
        } else {
          for (double& v : dst) v = standard_normal(rng);
        }
      }
    }
  }

  const std::size_t real_batch = cfg.dp ? cfg.dp->batch_size : cfg.batch_size;
  Tensor velocity(a.features.shape());
  Tensor grad(a.features.shape());
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    Rng rng = make_rng(cfg.seed, "distill/iter", {it});
    const FeatureMap fm = sample_feature_map(cfg, dim, rng);
    double objective = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      const auto idx = sample_members(members[c], real_batch, rng);
      const Tensor real = gather_rows(data.features, idx);
      const Tensor syn = class_rows(a.features, c, ipc);
      Tensor g;
      objective += class_match(fm, real, syn, &g);
      std::copy(g.values().begin(), g.values().end(),
                grad.values().begin() + static_cast<std::ptrdiff_t>(c * ipc * dim));
    }
    if (!std::isfinite(objective)) {
      throw NumericError("distill: non-finite objective at iteration " +
                         std::to_string(it));
    }
    if (trace) trace->objective.push_back(objective);

    if (cfg.dp) {
      const double norm = std::sqrt(squared_norm(grad.values()));
      if (norm > cfg.dp->clip_norm) {
        const double s = cfg.dp->clip_norm / norm;
        for (double& v : grad.values()) v *= s;
      }
      if (trace) trace->clipped_grad_norm.push_back(std::sqrt(squared_norm(grad.values())));
      Rng noise = make_rng(cfg.seed, "distill/dp-noise", {it});
      const double sensitivity =
          cfg.dp->clip_norm / static_cast<double>(cfg.dp->batch_size);
      // Zero sigma adds nothing, even with an unbounded clip norm.
      if (cfg.dp->noise_sigma > 0.0) {
        for (double& v : grad.values()) {
          const double z = cfg.dp->noise_sigma * standard_normal(noise);
          if (trace && trace->noise_draws.size() < trace->max_noise_draws) {
            trace->noise_draws.push_back(z);
          }
          v += z * sensitivity;
        }
      }
    }

    for (std::size_t i = 0; i < grad.size(); ++i) {
      velocity[i] = cfg.momentum * velocity[i] + grad[i];
      a.features[i] -= cfg.lr * velocity[i];
    }
  }
  if (!a.features.all_finite()) throw NumericError("distill: anchors diverged");
  return a;
}

}  // namespace detail

inline AnchorSet distill(const Dataset& data, const DistillConfig& cfg,
                         DistillTrace* trace = nullptr) {
  return detail::run_distillation(data, cfg, trace);
}

// Samples a class-balanced subset first, then distils with clipped and
// noised gradients. Requires cfg.dp.
inline AnchorSet distill_dp(const Dataset& data, const DistillConfig& cfg,
                            DistillTrace* trace = nullptr) {
  if (!cfg.dp) throw ValidationError("distill_dp: dp settings are required");
  data.validate();
  detail::require_all_classes(data, detail::class_members(data));
  Rng rng = make_rng(cfg.seed, "distill/dp-subset");
  Dataset balanced = detail::balanced_subset(data, rng);
  balanced.client_id = data.client_id;
  return detail::run_distillation(balanced, cfg, trace);
}

// Sum over classes of the squared distance between the class-mean embedding
// of all real records and that of the anchors.
inline double mmd_objective(const Dataset& data, const AnchorSet& anchors,
                            const FeatureMap& fm) {
  const auto members = detail::class_members(data);
  detail::require_all_classes(data, members);
  double total = 0.0;
  for (std::size_t c = 0; c < anchors.num_classes; ++c) {
    total += detail::class_match(fm, gather_rows(data.features, members[c]),
                                 detail::class_rows(anchors.features, c, anchors.ipc),
                                 nullptr);
  }
  return total;
}

enum class MergeMode { average, union_ };

inline const char* to_string(MergeMode m) {
  return m == MergeMode::average ? "average" : "union";
}

inline AnchorSet merge_anchors(std::span<const AnchorSet> sets, MergeMode mode) {
  if (sets.empty()) throw ValidationError("merge_anchors: no anchor sets");
  const AnchorSet& first = sets.front();
  for (const auto& s : sets) {
    s.validate();
    if (s.num_classes != first.num_classes || s.dim() != first.dim()) {
      throw DimensionError("merge_anchors: anchor sets disagree on K or D");
    }
    if (mode == MergeMode::average && s.ipc != first.ipc) {
      throw DimensionError("merge_anchors: average mode needs equal ipc (" +
                           std::to_string(first.ipc) + " vs " +
                           std::to_string(s.ipc) + ")");
    }
  }
  AnchorSet out;
  out.origin = "global";
  out.num_classes = first.num_classes;
  if (mode == MergeMode::average) {
    out.ipc = first.ipc;
    out.labels = first.labels;
    out.features = Tensor(first.features.shape());
    for (const auto& s : sets) add_inplace(out.features, s.features);
    const double n = static_cast<double>(sets.size());
    for (double& v : out.features.values()) v /= n;
    return out;
  }
  std::size_t ipc = 0;
  for (const auto& s : sets) ipc += s.ipc;
  out.ipc = ipc;
  const std::size_t dim = first.dim();
  std::vector<double> data;
  data.reserve(ipc * out.num_classes * dim);
  for (std::size_t c = 0; c < out.num_classes; ++c) {
    for (const auto& s : sets) {
      for (std::size_t slot = 0; slot < s.ipc; ++slot) {
        auto r = s.features.row(c * s.ipc + slot);
        data.insert(data.end(), r.begin(), r.end());
        out.labels.push_back(static_cast<int>(c));
      }
    }
  }
  out.features = Tensor({out.labels.size(), dim}, std::move(data));
  return out;
}

// Anchor files: dataset CSV plus `<stem>.json` sidecar.
inline void save_anchors(const std::filesystem::path& stem, const AnchorSet& a,
                         const nlohmann::json& meta = nlohmann::json::object()) {
  save_dataset(stem.string() + ".csv", a.features, a.labels);
  nlohmann::json side = meta;
  side["origin"] = a.origin;
  side["ipc"] = a.ipc;
  side["num_classes"] = a.num_classes;
  std::ofstream os(stem.string() + ".json");
  os << side.dump(2) << '\n';
}

struct LoadedAnchors {
  AnchorSet anchors;
  nlohmann::json meta;
};

inline LoadedAnchors load_anchors(const std::filesystem::path& stem) {
  std::ifstream js(stem.string() + ".json");
  if (!js) throw ValidationError("missing anchor sidecar " + stem.string() + ".json");
  LoadedAnchors out;
  try {
    out.meta = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(stem.string() + ".json: " + e.what());
  }
  CsvTable t = read_labeled_csv(stem.string() + ".csv");
  out.anchors.features = std::move(t.features);
  out.anchors.labels = std::move(t.labels);
  out.anchors.origin = out.meta.at("origin").get<std::string>();
  out.anchors.ipc = out.meta.at("ipc").get<std::size_t>();
  out.anchors.num_classes = out.meta.at("num_classes").get<std::size_t>();
  out.anchors.validate();
  return out;
}

}  // namespace desa
