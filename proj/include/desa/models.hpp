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

// Client models M = head ∘ encoder. Encoders are ReLU MLPs; the head is a
// single affine map from the embedding to K logits, so logits stay
// exchangeable across architectures with different encoders.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "desa/errors.hpp"
#include "desa/rng.hpp"
#include "desa/tensor.hpp"

namespace desa {

struct ArchSpec {
  std::string arch_id;
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden_dims;
  std::size_t embed_dim = 0;
  std::size_t num_classes = 0;

  void validate() const {
    if (input_dim == 0) throw ValidationError("ArchSpec: input_dim must be > 0");
    if (hidden_dims.empty()) {
      throw ValidationError("ArchSpec " + arch_id + ": hidden_dims is empty");
    }
    for (std::size_t h : hidden_dims) {
      if (h == 0) throw ValidationError("ArchSpec " + arch_id + ": zero width");
    }
    if (embed_dim != hidden_dims.back()) {
      throw ValidationError("ArchSpec " + arch_id +
                            ": embed_dim must equal the last hidden dim");
    }
    if (num_classes < 2) {
      throw ValidationError("ArchSpec " + arch_id + ": num_classes must be >= 2");
    }
  }

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

inline ArchSpec make_arch(std::string id, std::size_t input_dim,
                          std::vector<std::size_t> hidden,
                          std::size_t num_classes) {
  ArchSpec spec{std::move(id), input_dim, std::move(hidden), 0, num_classes};
  spec.embed_dim = spec.hidden_dims.empty() ? 0 : spec.hidden_dims.back();
  spec.validate();
  return spec;
}

// One hidden layer.
inline ArchSpec arch_small(std::size_t input_dim, std::size_t num_classes,
                           std::size_t width = 32) {
  return make_arch("arch-S", input_dim, {width}, num_classes);
}

// Two hidden layers.
inline ArchSpec arch_large(std::size_t input_dim, std::size_t num_classes,
                           std::size_t width = 64, std::size_t embed = 32) {
  return make_arch("arch-L", input_dim, {width, embed}, num_classes);
}

struct Dense {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  friend bool operator==(const Dense&, const Dense&) = default;
};

// Parameters and gradients share this layout.
struct Params {
  std::vector<Dense> encoder;
  Dense head;

  std::size_t count() const {
    std::size_t n = head.weight.size() + head.bias.size();
    for (const auto& l : encoder) n += l.weight.size() + l.bias.size();
    return n;
  }

  template <class Fn>
  void for_each_tensor(Fn&& fn) {
    for (auto& l : encoder) {
      fn(l.weight);
      fn(l.bias);
    }
    fn(head.weight);
    fn(head.bias);
  }

  template <class Fn>
  void for_each_tensor(Fn&& fn) const {
    for (const auto& l : encoder) {
      fn(l.weight);
      fn(l.bias);
    }
    fn(head.weight);
    fn(head.bias);
  }

  friend bool operator==(const Params&, const Params&) = default;
};

struct Model {
  ArchSpec spec;
  Params params;

  std::size_t parameter_count() const { return params.count(); }

  friend bool operator==(const Model&, const Model&) = default;
};

inline bool model_is_finite(const Model& m) {
  bool ok = true;
  m.params.for_each_tensor([&](const Tensor& t) { ok = ok && t.all_finite(); });
  return ok;
}

inline Params zeros_like(const Params& p) {
  Params z = p;
  z.for_each_tensor([](Tensor& t) {
    for (double& v : t.values()) v = 0.0;
  });
  return z;
}

// acc += scale * g
inline void accumulate(Params& acc, const Params& g, double scale = 1.0) {
  if (acc.encoder.size() != g.encoder.size()) {
    throw DimensionError("accumulate: encoder depth " +
                         std::to_string(acc.encoder.size()) + " vs " +
                         std::to_string(g.encoder.size()));
  }
  for (std::size_t i = 0; i < acc.encoder.size(); ++i) {
    add_inplace(acc.encoder[i].weight, g.encoder[i].weight, scale);
    add_inplace(acc.encoder[i].bias, g.encoder[i].bias, scale);
  }
  add_inplace(acc.head.weight, g.head.weight, scale);
  add_inplace(acc.head.bias, g.head.bias, scale);
}

inline std::vector<double> flatten(const Params& p) {
  std::vector<double> flat;
  flat.reserve(p.count());
  p.for_each_tensor([&](const Tensor& t) {
    flat.insert(flat.end(), t.raw().begin(), t.raw().end());
  });
  return flat;
}

inline void assign_flat(Params& p, std::span<const double> flat) {
  if (flat.size() != p.count()) {
    throw DimensionError("assign_flat: expected " + std::to_string(p.count()) +
                         " values, got " + std::to_string(flat.size()));
  }
  std::size_t off = 0;
  p.for_each_tensor([&](Tensor& t) {
    for (double& v : t.values()) v = flat[off++];
  });
}

namespace detail {

inline Dense glorot_dense(std::size_t in, std::size_t out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  Dense d{Tensor({in, out}), Tensor({out})};
  for (double& v : d.weight.values()) v = uniform(rng, -limit, limit);
  return d;
}

}  // namespace detail

// Glorot-uniform ReLU encoder with zero biases; shared with the random
// feature extractors used during distillation.
inline std::vector<Dense> init_encoder(std::size_t input_dim,
                                       const std::vector<std::size_t>& widths,
                                       Rng& rng) {
  std::vector<Dense> layers;
  std::size_t in = input_dim;
  for (std::size_t w : widths) {
    layers.push_back(detail::glorot_dense(in, w, rng));
    in = w;
  }
  return layers;
}

inline Model init_model(const ArchSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng = make_rng(seed, "model-init");
  Model m{spec, {}};
  m.params.encoder = init_encoder(spec.input_dim, spec.hidden_dims, rng);
  m.params.head = detail::glorot_dense(spec.embed_dim, spec.num_classes, rng);
  return m;
}

struct EncoderTrace {
  std::vector<Tensor> inputs;       // input of each layer
  std::vector<Tensor> pre_activations;
  Tensor output;                    // post-ReLU of the final layer
};

inline EncoderTrace encoder_forward(const std::vector<Dense>& layers,
                                    const Tensor& x) {
  EncoderTrace tr;
  Tensor h = x;
  for (const auto& l : layers) {
    tr.inputs.push_back(h);
    Tensor z = affine_forward(h, l.weight, l.bias);
    h = relu_forward(z);
    tr.pre_activations.push_back(std::move(z));
  }
  tr.output = std::move(h);
  return tr;
}

// Returns the gradient w.r.t. the encoder input; layer gradients are written
// into `grads` (same depth as `layers`) when non-null.
inline Tensor encoder_backward(const std::vector<Dense>& layers,
                               const EncoderTrace& tr, Tensor grad_output,
                               std::vector<Dense>* grads) {
  Tensor g = std::move(grad_output);
  for (std::size_t k = layers.size(); k-- > 0;) {
    g = relu_backward(tr.pre_activations[k], g);
    AffineGrads ag = affine_backward(tr.inputs[k], layers[k].weight, g);
    if (grads) {
      (*grads)[k].weight = std::move(ag.grad_w);
      (*grads)[k].bias = std::move(ag.grad_b);
    }
    g = std::move(ag.grad_x);
  }
  return g;
}

struct Activations {
  EncoderTrace encoder;
  Tensor embedding;  // [B, E]
  Tensor logits;     // [B, K]
};

inline Activations forward(const Model& model, const Tensor& x) {
  if (x.rank() != 2 || x.dim(1) != model.spec.input_dim) {
    throw DimensionError("forward: x.shape=" + shape_string(x.shape()) +
                         " but model " + model.spec.arch_id +
                         " expects input_dim=" +
                         std::to_string(model.spec.input_dim));
  }
  Activations a;
  a.encoder = encoder_forward(model.params.encoder, x);
  a.embedding = a.encoder.output;
  a.logits = affine_forward(a.embedding, model.params.head.weight,
                            model.params.head.bias);
  return a;
}

inline Tensor predict_logits(const Model& model, const Tensor& x) {
  return forward(model, x).logits;
}

// Gradient of a loss given its partial derivatives w.r.t. the logits and
// (optionally) the embedding. Both upstream paths meet at the embedding.
inline Params backward(const Model& model, const Activations& acts,
                       const Tensor& grad_logits,
                       const std::optional<Tensor>& grad_embedding = {}) {
  Params g;
  g.encoder.resize(model.params.encoder.size());
  AffineGrads hg =
      affine_backward(acts.embedding, model.params.head.weight, grad_logits);
  g.head = Dense{std::move(hg.grad_w), std::move(hg.grad_b)};
  Tensor ge = std::move(hg.grad_x);
  if (grad_embedding) add_inplace(ge, *grad_embedding);
  encoder_backward(model.params.encoder, acts.encoder, std::move(ge),
                   &g.encoder);
  return g;
}

inline void apply_sgd(Model& model, const Params& grads, double lr) {
  if (!(lr > 0.0)) throw ValidationError("sgd_step: lr must be > 0");
  if (grads.count() != model.params.count()) {
    throw DimensionError("sgd_step: gradient has " +
                         std::to_string(grads.count()) + " values, model has " +
                         std::to_string(model.params.count()));
  }
  accumulate(model.params, grads, -lr);
}

inline Model sgd_step(Model model, const Params& grads, double lr) {
  apply_sgd(model, grads, lr);
  return model;
}

}  // namespace desa
