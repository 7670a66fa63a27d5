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

// Finite-difference checks of every loss with respect to the flattened model
// parameters. REG treats anchor embeddings as constants, so its numerical
// counterpart freezes them at the unperturbed parameters.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "desa/losses.hpp"
#include "desa/models.hpp"
#include "desa/protocol.hpp"
#include "desa/rng.hpp"
#include "desa/tensor.hpp"

namespace desa {

struct GradCheckResult {
  std::string loss;
  std::string arch;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct GradCheckSetup {
  std::size_t input_dim = 3;
  std::size_t num_classes = 3;
  std::size_t local_rows = 8;
  std::size_t anchors_per_class = 2;
  double eps = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
  // Tiny widths (45 and 43 parameters) keep every coordinate's gradient well
  // above the central-difference roundoff floor.
  ModelZoo zoo{6, 4, 3};
};

namespace detail {

struct GradCheckBatch {
  Tensor local_x;
  std::vector<int> local_y;
  Tensor anchor_x;
  std::vector<int> anchor_y;
  Tensor teacher;
};

inline GradCheckBatch grad_check_batch(const GradCheckSetup& s) {
  Rng rng = make_rng(s.seed, "grad-check/batch");
  GradCheckBatch b;
  b.local_x = Tensor({s.local_rows, s.input_dim});
  for (double& v : b.local_x.values()) v = standard_normal(rng);
  for (std::size_t i = 0; i < s.local_rows; ++i) {
    b.local_y.push_back(static_cast<int>(i % s.num_classes));
  }
  const std::size_t na = s.anchors_per_class * s.num_classes;
  b.anchor_x = Tensor({na, s.input_dim});
  for (double& v : b.anchor_x.values()) v = standard_normal(rng);
  for (std::size_t c = 0; c < s.num_classes; ++c) {
    for (std::size_t j = 0; j < s.anchors_per_class; ++j) b.anchor_y.push_back(static_cast<int>(c));
  }
  b.teacher = Tensor({na, s.num_classes});
  for (double& v : b.teacher.values()) v = 2.0 * standard_normal(rng);
  return b;
}

inline Tensor flat_tensor(const Params& p) {
  return Tensor({p.count()}, flatten(p));
}

inline Model with_flat(const Model& m, const Tensor& flat) {
  Model out = m;
  assign_flat(out.params, flat.values());
  return out;
}

inline Tensor maybe_normalize(const Tensor& h, bool normalize) {
  return normalize ? normalize_rows(h) : h;
}

}  // namespace detail

// Checks ce, reg (anchors detached), kd and total for each architecture.
inline std::vector<GradCheckResult> run_grad_checks(const GradCheckSetup& s = {},
                                                    const LossCoefficients& coef = {}) {
  const auto b = detail::grad_check_batch(s);
  const ModelZoo& zoo = s.zoo;
  std::vector<GradCheckResult> out;
  for (const std::string arch : {"arch-S", "arch-L"}) {
    Model model = init_model(zoo.make(arch, s.input_dim, s.num_classes),
                             derive_seed(s.seed, "grad-check/model", {out.size()}));
    // Zero-initialised biases put dead rows exactly on a ReLU kink.
    Rng jitter = make_rng(s.seed, "grad-check/bias", {out.size()});
    for (auto& l : model.params.encoder) {
      for (double& v : l.bias.values()) v = 0.1 * standard_normal(jitter);
    }
    const Tensor theta = detail::flat_tensor(model.params);
    const Tensor frozen_anchor_emb = detail::maybe_normalize(
        forward(model, b.anchor_x).embedding, coef.normalize_embeddings);

    auto reg_numeric = [&](const Model& m) {
      const Tensor le = detail::maybe_normalize(forward(m, b.local_x).embedding,
                                                coef.normalize_embeddings);
      return reg_from_embeddings(le, b.local_y, frozen_anchor_emb, b.anchor_y, coef.tau_temp)
          .loss;
    };

    auto record = [&](const std::string& name, const std::function<double(const Model&)>& f,
                      const Params& analytic) {
      const double err = grad_check(
          [&](const Tensor& flat) { return f(detail::with_flat(model, flat)); }, theta,
          detail::flat_tensor(analytic), s.eps);
      out.push_back({name, arch, err, err < s.tolerance});
    };

    record("ce_loss", [&](const Model& m) { return ce_loss(m, b.local_x, b.local_y).loss; },
           ce_loss(model, b.local_x, b.local_y).grads);

    record("reg_loss", reg_numeric,
           reg_loss(model, b.local_x, b.local_y, b.anchor_x, b.anchor_y, coef.tau_temp,
                    coef.normalize_embeddings)
               .grads);

    record("kd_loss", [&](const Model& m) { return kd_loss(m, b.anchor_x, b.teacher).loss; },
           kd_loss(model, b.anchor_x, b.teacher).grads);

    LossBatch batch{b.local_x, b.local_y, b.anchor_x, b.anchor_y, b.teacher, true, coef};
    auto total_numeric = [&](const Model& m) {
      const Tensor x = concat_rows(b.local_x, b.anchor_x);
      std::vector<int> y = b.local_y;
      y.insert(y.end(), b.anchor_y.begin(), b.anchor_y.end());
      const double ce = ce_loss(m, x, y).loss;
      const double kd = kd_loss(m, b.anchor_x, b.teacher).loss;
      return ce + coef.lambda_reg * reg_numeric(m) + coef.lambda_kd * kd;
    };
    record("total_loss", total_numeric, total_loss(model, batch).grads);
  }
  return out;
}

}  // namespace desa
