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

// Evaluation: the intra/inter-client accuracy matrix, communication
// accounting, and data-driven estimates of the measurable terms of the
// generalisation bound (labelling disagreement and proxy A-distance).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "desa/datasets.hpp"
#include "desa/distill.hpp"
#include "desa/errors.hpp"
#include "desa/losses.hpp"
#include "desa/models.hpp"
#include "desa/rng.hpp"

namespace desa {

// Row-wise argmax, ties resolved to the lowest class index.
inline std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.dim(0));
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    auto r = logits.row(i);
    out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

inline double accuracy(const Model& model, const Dataset& data) {
  if (data.size() == 0) throw ValidationError("accuracy: empty dataset");
  const auto pred = argmax_rows(predict_logits(model, data.features));
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == data.labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

// values[i][j]: model i on client j's test split.
struct AccuracyMatrix {
  std::vector<std::vector<double>> values;

  std::size_t size() const { return values.size(); }

  double global_average() const {
    double s = 0.0;
    for (const auto& r : values) s += std::accumulate(r.begin(), r.end(), 0.0);
    return s / static_cast<double>(size() * size());
  }

  double local_average() const {
    double s = 0.0;
    for (std::size_t i = 0; i < size(); ++i) s += values[i][i];
    return s / static_cast<double>(size());
  }

  // Inter-client accuracy of model i: its mean over every client's test set.
  double model_average(std::size_t i) const {
    return std::accumulate(values[i].begin(), values[i].end(), 0.0) /
           static_cast<double>(size());
  }
};

inline AccuracyMatrix evaluate_all(const std::vector<Model>& models,
                                   const std::vector<ClientData>& suite) {
  if (models.size() != suite.size()) {
    throw DimensionError("evaluate_all: " + std::to_string(models.size()) +
                         " models for " + std::to_string(suite.size()) + " clients");
  }
  AccuracyMatrix m;
  m.values.assign(models.size(), std::vector<double>(suite.size(), 0.0));
  for (std::size_t i = 0; i < models.size(); ++i) {
    if (models[i].spec.num_classes != suite[i].test.num_classes) {
      throw DimensionError("evaluate_all: model " + std::to_string(i) +
                           " class count differs from the suite");
    }
    for (std::size_t j = 0; j < suite.size(); ++j) {
      m.values[i][j] = accuracy(models[i], suite[j].test);
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Communication accounting, in transmitted scalars.

enum class Algorithm { desa, standalone, fedavg, logit_only };

inline const char* to_string(Algorithm a) {
  switch (a) {
    case Algorithm::desa: return "desa";
    case Algorithm::standalone: return "standalone";
    case Algorithm::fedavg: return "fedavg";
    case Algorithm::logit_only: return "logit-only";
  }
  return "?";
}

struct CommLedger {
  std::uint64_t pre_fl_params = 0;
  std::uint64_t per_round_params = 0;
  std::uint64_t rounds = 0;
  std::uint64_t total = 0;
};

struct CommAuditInput {
  Algorithm algorithm = Algorithm::desa;
  std::uint64_t model_params = 0;      // parameter-sharing algorithms
  std::uint64_t anchor_payload = 0;    // scalars per synthetic record
  std::uint64_t ipc = 0;
  std::uint64_t num_classes = 0;
  std::uint64_t logit_dim = 0;
  std::uint64_t rounds = 0;
};

// Logit-sharing methods pay for the anchors once and K·ipc·logit_dim per
// round; parameter-sharing methods pay the model size every round.
inline CommLedger comm_audit(const CommAuditInput& in) {
  CommLedger l;
  l.rounds = in.rounds;
  switch (in.algorithm) {
    case Algorithm::desa:
    case Algorithm::logit_only:
      l.pre_fl_params = in.anchor_payload * in.ipc * in.num_classes;
      l.per_round_params = in.num_classes * in.ipc * in.logit_dim;
      break;
    case Algorithm::fedavg:
      l.per_round_params = in.model_params;
      break;
    case Algorithm::standalone:
      break;
  }
  l.total = l.pre_fl_params + l.per_round_params * l.rounds;
  return l;
}

// Three significant digits in millions with trailing zeros dropped, e.g.
// 2036000 -> "2.04M", 32000000 -> "32M". Integer rounding, half up.
inline std::string format_millions(std::uint64_t v) {
  if (v == 0) return "0M";
  std::uint64_t scale = 1;  // unit of the third significant digit
  while (v / scale >= 1000) scale *= 10;
  std::uint64_t rounded = (v + scale / 2) / scale * scale;
  // Render rounded / 1e6 with exactly the kept digits.
  const std::uint64_t whole = rounded / 1000000;
  std::uint64_t frac = rounded % 1000000;
  std::string f = std::to_string(frac);
  f.insert(0, 6 - f.size(), '0');
  while (!f.empty() && f.back() == '0') f.pop_back();
  return std::to_string(whole) + (f.empty() ? "" : "." + f) + "M";
}

// ---------------------------------------------------------------------------
// Bound probes.

struct ProbeConfig {
  std::vector<std::size_t> oracle_hidden{64, 32};
  std::size_t oracle_epochs = 30;
  double oracle_lr = 0.05;
  std::size_t domain_width = 32;
  std::size_t domain_epochs = 30;
  double domain_lr = 0.05;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  double lambda_reg = 1.0;
  double lambda_kd = 1.0;
};

struct BoundProbeReport {
  double est_synth_label_error = 0.0;
  std::optional<double> est_kd_label_error;
  double proxy_divergence = 0.0;
  double domain_classifier_accuracy = 0.0;
  double oracle_train_accuracy = 0.0;
  // Mixing fractions 1 : λ_REG : λ_KD normalised to sum to one.
  double alpha_local = 0.0;
  double alpha_synth = 0.0;
  double alpha_kd = 0.0;
};

namespace detail {

struct Standardizer {
  std::vector<double> mean, scale;

  static Standardizer fit(const Tensor& x) {
    Standardizer s{std::vector<double>(x.dim(1), 0.0), std::vector<double>(x.dim(1), 0.0)};
    const double n = static_cast<double>(x.dim(0));
    for (std::size_t i = 0; i < x.dim(0); ++i) {
      for (std::size_t d = 0; d < x.dim(1); ++d) s.mean[d] += x(i, d) / n;
    }
    for (std::size_t i = 0; i < x.dim(0); ++i) {
      for (std::size_t d = 0; d < x.dim(1); ++d) {
        const double c = x(i, d) - s.mean[d];
        s.scale[d] += c * c / n;
      }
    }
    for (double& v : s.scale) v = v > 1e-24 ? std::sqrt(v) : 1.0;
    return s;
  }

  Tensor apply(const Tensor& x) const {
    Tensor y = x;
    for (std::size_t i = 0; i < y.dim(0); ++i) {
      for (std::size_t d = 0; d < y.dim(1); ++d) y(i, d) = (y(i, d) - mean[d]) / scale[d];
    }
    return y;
  }
};

// Mini-batch SGD on cross-entropy; inputs are expected pre-standardised.
inline Model train_classifier(const ArchSpec& spec, const Tensor& x,
                              const std::vector<int>& y, std::size_t epochs, double lr,
                              std::size_t batch, std::uint64_t seed, const char* what) {
  Model m = init_model(spec, seed);
  Rng rng = make_rng(seed, "probe/batches");
  std::vector<std::size_t> idx(x.dim(0));
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t e = 0; e < epochs; ++e) {
    shuffle_in_place(idx, rng);
    for (std::size_t s = 0; s < idx.size(); s += batch) {
      std::span<const std::size_t> b(idx.data() + s, std::min(batch, idx.size() - s));
      std::vector<int> yb;
      yb.reserve(b.size());
      for (std::size_t i : b) yb.push_back(y[i]);
      LossValue lv = ce_loss(m, gather_rows(x, b), yb);
      if (!std::isfinite(lv.loss)) {
        throw NumericError(std::string(what) + ": training diverged at epoch " +
                           std::to_string(e));
      }
      apply_sgd(m, lv.grads, lr);
    }
  }
  return m;
}

}  // namespace detail

// `real` is the pooled real data; `teacher_logits`, when given, are the
// averaged neighbour logits aligned with the anchor records.
inline BoundProbeReport bound_probe(const Dataset& real, const Dataset& anchors,
                                    const std::optional<Tensor>& teacher_logits,
                                    const ProbeConfig& cfg) {
  real.validate();
  anchors.validate();
  if (real.dim() != anchors.dim()) {
    throw DimensionError("bound_probe: real dim " + std::to_string(real.dim()) +
                         " vs anchor dim " + std::to_string(anchors.dim()));
  }
  BoundProbeReport r;
  const double denom = 1.0 + cfg.lambda_reg + cfg.lambda_kd;
  r.alpha_local = 1.0 / denom;
  r.alpha_synth = cfg.lambda_reg / denom;
  r.alpha_kd = cfg.lambda_kd / denom;

  // Oracle labelling function fitted on pooled real data.
  const auto stdz = detail::Standardizer::fit(real.features);
  const Tensor real_x = stdz.apply(real.features);
  ArchSpec oracle_spec =
      make_arch("arch-L", real.dim(), cfg.oracle_hidden, real.num_classes);
  const Model oracle =
      detail::train_classifier(oracle_spec, real_x, real.labels, cfg.oracle_epochs,
                               cfg.oracle_lr, cfg.batch_size,
                               derive_seed(cfg.seed, "probe/oracle"), "bound_probe oracle");
  {
    Dataset std_real = real;
    std_real.features = real_x;
    r.oracle_train_accuracy = accuracy(oracle, std_real);
  }
  const auto oracle_pred = argmax_rows(predict_logits(oracle, stdz.apply(anchors.features)));
  std::size_t miss = 0;
  for (std::size_t i = 0; i < oracle_pred.size(); ++i) miss += oracle_pred[i] != anchors.labels[i];
  r.est_synth_label_error = static_cast<double>(miss) / static_cast<double>(anchors.size());
  if (teacher_logits) {
    if (teacher_logits->dim(0) != anchors.size()) {
      throw DimensionError("bound_probe: teacher logits not aligned with anchors");
    }
    const auto tp = argmax_rows(*teacher_logits);
    std::size_t kd_miss = 0;
    for (std::size_t i = 0; i < tp.size(); ++i) kd_miss += tp[i] != oracle_pred[i];
    r.est_kd_label_error = static_cast<double>(kd_miss) / static_cast<double>(tp.size());
  }

  // Proxy A-distance: balanced anchor-vs-real domain classifier, scored on a
  // held-out half.
  Rng rng = make_rng(cfg.seed, "probe/domain-split");
  const std::size_t m = std::min(real.size(), anchors.size());
  std::vector<std::size_t> ri(real.size()), ai(anchors.size());
  std::iota(ri.begin(), ri.end(), 0);
  std::iota(ai.begin(), ai.end(), 0);
  shuffle_in_place(ri, rng);
  shuffle_in_place(ai, rng);
  ri.resize(m);
  ai.resize(m);
  Tensor dom_x = concat_rows(gather_rows(real.features, ri), gather_rows(anchors.features, ai));
  std::vector<int> dom_y(2 * m, 0);
  std::fill(dom_y.begin() + static_cast<std::ptrdiff_t>(m), dom_y.end(), 1);
  std::vector<std::size_t> order(2 * m);
  std::iota(order.begin(), order.end(), 0);
  shuffle_in_place(order, rng);
  const std::size_t half = m;  // train on half the pooled domain sample
  std::span<const std::size_t> tr(order.data(), half), te(order.data() + half, 2 * m - half);
  Tensor xtr = gather_rows(dom_x, tr), xte = gather_rows(dom_x, te);
  std::vector<int> ytr, yte;
  for (std::size_t i : tr) ytr.push_back(dom_y[i]);
  for (std::size_t i : te) yte.push_back(dom_y[i]);
  const auto dstd = detail::Standardizer::fit(xtr);
  Model dom = detail::train_classifier(
      make_arch("arch-S", real.dim(), {cfg.domain_width}, 2), dstd.apply(xtr), ytr,
      cfg.domain_epochs, cfg.domain_lr, cfg.batch_size,
      derive_seed(cfg.seed, "probe/domain"), "bound_probe domain classifier");
  Dataset test;
  test.features = dstd.apply(xte);
  test.labels = yte;
  test.num_classes = 2;
  r.domain_classifier_accuracy = accuracy(dom, test);
  r.proxy_divergence = std::clamp(2.0 * (2.0 * r.domain_classifier_accuracy - 1.0), 0.0, 2.0);
  return r;
}

}  // namespace desa
