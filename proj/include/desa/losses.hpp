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

// Training objective for one client step:
//
//   L = CE(local ∪ anchors) + λ_REG · REG(local, anchors) + λ_KD · KD(anchors, Z̄)
//
// REG is a supervised contrastive loss over the combined batch in which the
// anchor embeddings are constants (detached). KD is KL(softmax(Z̄) ‖
// softmax(student)) on the anchors, where Z̄ is the mean of the neighbours'
// logits. Every term returns its exact gradient w.r.t. the model parameters.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "desa/errors.hpp"
#include "desa/models.hpp"
#include "desa/tensor.hpp"

namespace desa {

struct LossCoefficients {
  double lambda_reg = 1.0;
  double lambda_kd = 1.0;
  double tau_temp = 0.07;
  bool normalize_embeddings = true;

  void validate() const {
    if (!(lambda_reg >= 0.0)) throw ValidationError("lambda_reg must be >= 0");
    if (!(lambda_kd >= 0.0)) throw ValidationError("lambda_kd must be >= 0");
    if (!(tau_temp > 0.0)) throw ValidationError("tau_temp must be > 0");
  }
};

struct LossValue {
  double loss = 0.0;
  Params grads;
};

// Loss value with the gradient w.r.t. one intermediate tensor.
struct TensorLoss {
  double loss = 0.0;
  Tensor grad;
};

namespace detail {

inline void require_labels(std::span<const int> labels, std::size_t rows,
                           std::size_t num_classes, const char* op) {
  if (labels.size() != rows) {
    throw DimensionError(std::string(op) + ": " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(rows) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw ValidationError(std::string(op) + ": label " + std::to_string(y) +
                            " outside [0," + std::to_string(num_classes) + ")");
    }
  }
}

}  // namespace detail

// Sum over rows of -log softmax(z)[y]; gradient rows are softmax - onehot.
// The caller divides both by its normaliser.
inline TensorLoss ce_sum_from_logits(const Tensor& logits, std::span<const int> labels) {
  detail::require_labels(labels, logits.dim(0), logits.dim(1), "ce_loss");
  const Tensor lp = log_softmax(logits);
  TensorLoss out{0.0, Tensor(logits.shape())};
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    out.loss -= lp(i, y);
    for (std::size_t k = 0; k < logits.dim(1); ++k) {
      out.grad(i, k) = std::exp(lp(i, k)) - (k == y ? 1.0 : 0.0);
    }
  }
  return out;
}

inline LossValue ce_loss(const Model& model, const Tensor& x, std::span<const int> labels) {
  const Activations a = forward(model, x);
  TensorLoss t = ce_sum_from_logits(a.logits, labels);
  const double n = static_cast<double>(x.dim(0));
  for (double& g : t.grad.values()) g /= n;
  return {t.loss / n, backward(model, a, t.grad)};
}

// Mean KL(softmax(teacher) ‖ softmax(student)) over rows and its gradient
// w.r.t. the student logits. Teacher logits are constants.
inline TensorLoss kd_from_logits(const Tensor& student, const Tensor& teacher) {
  if (student.shape() != teacher.shape()) {
    throw DimensionError("kd_loss: student logits " + shape_string(student.shape()) +
                         " not aligned with teacher logits " +
                         shape_string(teacher.shape()));
  }
  const Tensor lq = log_softmax(student);
  const Tensor lp = log_softmax(teacher);
  const double n = static_cast<double>(student.dim(0));
  TensorLoss out{0.0, Tensor(student.shape())};
  for (std::size_t i = 0; i < student.dim(0); ++i) {
    for (std::size_t k = 0; k < student.dim(1); ++k) {
      const double p = std::exp(lp(i, k));
      if (p > 0.0) out.loss += p * (lp(i, k) - lq(i, k));
      out.grad(i, k) = (std::exp(lq(i, k)) - p) / n;
    }
  }
  out.loss /= n;
  // Rounding can leave a tiny negative value when the distributions match.
  out.loss = std::max(out.loss, 0.0);
  return out;
}

inline LossValue kd_loss(const Model& model, const Tensor& anchor_x,
                         const Tensor& teacher_logits) {
  if (anchor_x.rank() != 2 || teacher_logits.rank() != 2 ||
      anchor_x.dim(0) != teacher_logits.dim(0)) {
    throw DimensionError("kd_loss: " + shape_string(teacher_logits.shape()) +
                         " teacher rows not aligned with anchors " +
                         shape_string(anchor_x.shape()));
  }
  const Activations a = forward(model, anchor_x);
  TensorLoss t = kd_from_logits(a.logits, teacher_logits);
  return {t.loss, backward(model, a, t.grad)};
}

// Row-wise L2 normalisation and its backward; zero rows map to zero.
inline Tensor normalize_rows(const Tensor& h) {
  Tensor e = h;
  for (std::size_t i = 0; i < h.dim(0); ++i) {
    auto r = e.row(i);
    const double n = std::sqrt(squared_norm(r));
    if (n > 0.0) {
      for (double& v : r) v /= n;
    }
  }
  return e;
}

inline Tensor normalize_rows_backward(const Tensor& h, const Tensor& grad_e) {
  Tensor g(h.shape());
  for (std::size_t i = 0; i < h.dim(0); ++i) {
    auto hr = h.row(i);
    const double n = std::sqrt(squared_norm(hr));
    if (!(n > 0.0)) continue;
    auto gr = grad_e.row(i);
    double dot = 0.0;
    for (std::size_t d = 0; d < hr.size(); ++d) dot += hr[d] / n * gr[d];
    for (std::size_t d = 0; d < hr.size(); ++d) {
      g(i, d) = (gr[d] - hr[d] / n * dot) / n;
    }
  }
  return g;
}

// Supervised contrastive loss over B = local ∪ anchors. For every sample j
// with at least one positive (same label, j excluded) the term is
//   -(1/|P_j|) Σ_p s_jp + log Σ_{a≠j} exp(s_ja),   s_ja = e_j·e_a / τ,
// and the loss is the mean over those samples (0 if none has a positive).
// Only the local embeddings receive gradient.
inline TensorLoss reg_from_embeddings(const Tensor& local_emb, std::span<const int> local_y,
                                      const Tensor& anchor_emb,
                                      std::span<const int> anchor_y, double tau) {
  if (!(tau > 0.0)) throw ValidationError("reg_loss: tau_temp must be > 0");
  const std::size_t nl = local_emb.dim(0);
  const std::size_t na = anchor_emb.empty() ? 0 : anchor_emb.dim(0);
  if (na && anchor_emb.dim(1) != local_emb.dim(1)) {
    throw DimensionError("reg_loss: local embedding dim " +
                         std::to_string(local_emb.dim(1)) + " vs anchor " +
                         std::to_string(anchor_emb.dim(1)));
  }
  if (local_y.size() != nl || anchor_y.size() != na) {
    throw DimensionError("reg_loss: labels not aligned with embeddings");
  }
  const std::size_t n = nl + na, dim = local_emb.dim(1);
  auto emb = [&](std::size_t i) {
    return i < nl ? local_emb.row(i) : anchor_emb.row(i - nl);
  };
  auto label = [&](std::size_t i) { return i < nl ? local_y[i] : anchor_y[i - nl]; };

  std::vector<double> sim(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto ei = emb(i);
    for (std::size_t j = i + 1; j < n; ++j) {
      auto ej = emb(j);
      double s = 0.0;
      for (std::size_t d = 0; d < dim; ++d) s += ei[d] * ej[d];
      sim[i * n + j] = sim[j * n + i] = s / tau;
    }
  }

  std::size_t contributing = 0;
  std::vector<std::size_t> positives(n, 0);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t a = 0; a < n; ++a) {
      if (a != j && label(a) == label(j)) ++positives[j];
    }
    if (positives[j]) ++contributing;
  }
  TensorLoss out{0.0, Tensor(local_emb.shape())};
  if (contributing == 0) return out;
  const double inv_m = 1.0 / static_cast<double>(contributing);

  std::vector<double> coeff(n);  // dℓ_j/ds_ja, row j
  for (std::size_t j = 0; j < n; ++j) {
    if (!positives[j]) continue;
    const double* sj = &sim[j * n];
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < n; ++a) {
      if (a != j) mx = std::max(mx, sj[a]);
    }
    double z = 0.0, pos_sum = 0.0;
    for (std::size_t a = 0; a < n; ++a) {
      if (a == j) continue;
      z += std::exp(sj[a] - mx);
      if (label(a) == label(j)) pos_sum += sj[a];
    }
    const double inv_p = 1.0 / static_cast<double>(positives[j]);
    out.loss += -inv_p * pos_sum + mx + std::log(z);
    for (std::size_t a = 0; a < n; ++a) {
      if (a == j) {
        coeff[a] = 0.0;
        continue;
      }
      const double q = std::exp(sj[a] - mx) / z;
      coeff[a] = inv_m * (q - (label(a) == label(j) ? inv_p : 0.0));
    }
    // s_ja depends on e_j and e_a; anchors (index >= nl) are constants.
    auto ej = emb(j);
    for (std::size_t a = 0; a < n; ++a) {
      if (coeff[a] == 0.0) continue;
      const double c = coeff[a] / tau;
      auto ea = emb(a);
      if (j < nl) {
        auto gj = out.grad.row(j);
        for (std::size_t d = 0; d < dim; ++d) gj[d] += c * ea[d];
      }
      if (a < nl) {
        auto ga = out.grad.row(a);
        for (std::size_t d = 0; d < dim; ++d) ga[d] += c * ej[d];
      }
    }
  }
  out.loss *= inv_m;
  return out;
}

// REG on raw (or optionally normalised) embeddings, gradient through the
// local records only.
inline LossValue reg_loss(const Model& model, const Tensor& local_x,
                          std::span<const int> local_y, const Tensor& anchor_x,
                          std::span<const int> anchor_y, double tau,
                          bool normalize = false) {
  if (!(tau > 0.0)) throw ValidationError("reg_loss: tau_temp must be > 0");
  const Activations local = forward(model, local_x);
  const Tensor anchor_h = forward(model, anchor_x).embedding;
  const Tensor le = normalize ? normalize_rows(local.embedding) : local.embedding;
  const Tensor ae = normalize ? normalize_rows(anchor_h) : anchor_h;
  TensorLoss t = reg_from_embeddings(le, local_y, ae, anchor_y, tau);
  Tensor ge = normalize ? normalize_rows_backward(local.embedding, t.grad) : std::move(t.grad);
  return {t.loss, backward(model, local, Tensor(local.logits.shape()), ge)};
}

struct LossBatch {
  Tensor local_x;
  std::vector<int> local_y;
  std::optional<Tensor> anchor_x;
  std::vector<int> anchor_y;
  std::optional<Tensor> teacher_logits;  // rows aligned with anchor_x
  bool anchor_ce = true;
  LossCoefficients coef;
};

struct LossComponents {
  double ce = 0.0;
  double reg = 0.0;
  double kd = 0.0;
};

struct TotalLoss {
  double loss = 0.0;
  Params grads;
  LossComponents components;
};

// One forward/backward over the concatenated batch [local; anchors]. Terms
// with a zero coefficient are skipped and reported as 0.
inline TotalLoss total_loss(const Model& model, const LossBatch& b) {
  b.coef.validate();
  const std::size_t nl = b.local_x.dim(0);
  const bool have_anchors = b.anchor_x.has_value();
  const bool use_reg = have_anchors && b.coef.lambda_reg > 0.0;
  const bool use_kd = have_anchors && b.teacher_logits && b.coef.lambda_kd > 0.0;
  const bool use_anchor_ce = have_anchors && b.anchor_ce;
  const bool forward_anchors = use_reg || use_kd || use_anchor_ce;
  if (have_anchors && b.anchor_y.size() != b.anchor_x->dim(0)) {
    throw DimensionError("total_loss: anchor labels not aligned with anchors");
  }
  if (use_kd && b.teacher_logits->dim(0) != b.anchor_x->dim(0)) {
    throw DimensionError("total_loss: teacher logits rows " +
                         std::to_string(b.teacher_logits->dim(0)) +
                         " not aligned with " + std::to_string(b.anchor_x->dim(0)) +
                         " anchors");
  }

  const Tensor x = forward_anchors ? concat_rows(b.local_x, *b.anchor_x) : b.local_x;
  const std::size_t na = forward_anchors ? b.anchor_x->dim(0) : 0;
  const Activations acts = forward(model, x);
  const std::size_t k = acts.logits.dim(1);

  TotalLoss out;
  Tensor grad_logits(acts.logits.shape());
  std::vector<int> y(b.local_y);
  if (forward_anchors) y.insert(y.end(), b.anchor_y.begin(), b.anchor_y.end());

  // CE over local rows, plus anchor rows when enabled.
  {
    const std::size_t rows = use_anchor_ce ? nl + na : nl;
    std::vector<std::size_t> idx(rows);
    std::iota(idx.begin(), idx.end(), 0);
    TensorLoss ce = ce_sum_from_logits(gather_rows(acts.logits, idx),
                                       std::span<const int>(y).first(rows));
    const double n = static_cast<double>(rows);
    out.components.ce = ce.loss / n;
    for (std::size_t i = 0; i < rows * k; ++i) grad_logits[i] = ce.grad[i] / n;
  }

  std::optional<Tensor> grad_emb;
  if (use_reg) {
    std::vector<std::size_t> li(nl), ai(na);
    std::iota(li.begin(), li.end(), 0);
    std::iota(ai.begin(), ai.end(), nl);
    const Tensor lh = gather_rows(acts.embedding, li);
    const Tensor ah = gather_rows(acts.embedding, ai);
    const bool norm = b.coef.normalize_embeddings;
    TensorLoss reg = reg_from_embeddings(norm ? normalize_rows(lh) : lh, b.local_y,
                                         norm ? normalize_rows(ah) : ah, b.anchor_y,
                                         b.coef.tau_temp);
    Tensor gl = norm ? normalize_rows_backward(lh, reg.grad) : std::move(reg.grad);
    out.components.reg = reg.loss;
    grad_emb = Tensor(acts.embedding.shape());
    for (std::size_t i = 0; i < gl.size(); ++i) (*grad_emb)[i] = b.coef.lambda_reg * gl[i];
  }

  if (use_kd) {
    std::vector<std::size_t> ai(na);
    std::iota(ai.begin(), ai.end(), nl);
    TensorLoss kd = kd_from_logits(gather_rows(acts.logits, ai), *b.teacher_logits);
    out.components.kd = kd.loss;
    for (std::size_t i = 0; i < kd.grad.size(); ++i) {
      grad_logits[nl * k + i] += b.coef.lambda_kd * kd.grad[i];
    }
  }

  out.loss = out.components.ce + b.coef.lambda_reg * out.components.reg +
             b.coef.lambda_kd * out.components.kd;
  if (!std::isfinite(out.loss)) throw NumericError("total_loss: non-finite loss");
  out.grads = backward(model, acts, grad_logits, grad_emb);
  return out;
}

}  // namespace desa
