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

// Dense row-major f64 tensors and the forward/backward primitives every
// model and loss in the library is assembled from. There is no autodiff
// graph: callers chain the explicit backward functions themselves.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "desa/errors.hpp"

namespace desa {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_product(shape_), fill) {
    check_shape();
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (data_.size() != shape_product(shape_)) {
      throw DimensionError("Tensor: shape " + shape_string(shape_) +
                           " needs " + std::to_string(shape_product(shape_)) +
                           " values, got " + std::to_string(data_.size()));
    }
  }

  // Builds a [rows, cols] tensor from nested braces.
  static Tensor matrix(
      std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("Tensor::matrix: ragged rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  const std::vector<double>& raw() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t r, std::size_t c) {
    return data_[r * shape_[1] + c];
  }
  const double& operator()(std::size_t r, std::size_t c) const {
    return data_[r * shape_[1] + c];
  }

  std::span<double> row(std::size_t r) {
    return std::span<double>(data_).subspan(r * shape_[1], shape_[1]);
  }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * shape_[1], shape_[1]);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_shape() const {
    for (std::size_t d : shape_) {
      if (d == 0) {
        throw DimensionError("Tensor: zero-sized axis in shape " +
                             shape_string(shape_));
      }
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

// Gathers rows of a rank-2 tensor in the given order.
inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  const std::size_t cols = x.dim(1);
  std::vector<double> out;
  out.reserve(rows.size() * cols);
  for (std::size_t r : rows) {
    auto src = x.row(r);
    out.insert(out.end(), src.begin(), src.end());
  }
  return Tensor({rows.size(), cols}, std::move(out));
}

// Stacks rank-2 tensors with matching column counts.
inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.dim(1) != b.dim(1)) {
    throw DimensionError("concat_rows: a.shape[1]=" + std::to_string(a.dim(1)) +
                         " != b.shape[1]=" + std::to_string(b.dim(1)));
  }
  std::vector<double> out(a.raw());
  out.insert(out.end(), b.raw().begin(), b.raw().end());
  return Tensor({a.dim(0) + b.dim(0), a.dim(1)}, std::move(out));
}

inline void add_inplace(Tensor& acc, const Tensor& x, double scale = 1.0) {
  if (acc.shape() != x.shape()) {
    throw DimensionError("add_inplace: " + shape_string(acc.shape()) +
                         " vs " + shape_string(x.shape()));
  }
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += scale * x[i];
}

inline double squared_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

struct GradPair {
  Tensor value;
  Tensor grad;

  GradPair(Tensor v, Tensor g) : value(std::move(v)), grad(std::move(g)) {
    if (value.shape() != grad.shape()) {
      throw DimensionError("GradPair: value " + shape_string(value.shape()) +
                           " vs grad " + shape_string(grad.shape()));
    }
  }
};

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* op,
                         const char* name) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + name + " must have rank " +
                         std::to_string(rank) + ", got shape " +
                         shape_string(t.shape()));
  }
}

inline void require_axis(const char* op, const char* lhs, std::size_t lv,
                         const char* rhs, std::size_t rv) {
  if (lv != rv) {
    throw DimensionError(std::string(op) + ": " + lhs + "=" +
                         std::to_string(lv) + " != " + rhs + "=" +
                         std::to_string(rv));
  }
}

}  // namespace detail

// out[i,j] = sum_d x[i,d] * W[d,j] + b[j]
inline Tensor affine_forward(const Tensor& x, const Tensor& w,
                             const Tensor& b) {
  detail::require_rank(x, 2, "affine_forward", "x");
  detail::require_rank(w, 2, "affine_forward", "W");
  detail::require_rank(b, 1, "affine_forward", "b");
  detail::require_axis("affine_forward", "x.shape[1]", x.dim(1), "W.shape[0]",
                       w.dim(0));
  detail::require_axis("affine_forward", "W.shape[1]", w.dim(1), "b.shape[0]",
                       b.dim(0));
  const std::size_t rows = x.dim(0), in = x.dim(1), out = w.dim(1);
  Tensor y({rows, out});
  for (std::size_t i = 0; i < rows; ++i) {
    double* yr = &y(i, 0);
    for (std::size_t j = 0; j < out; ++j) yr[j] = b[j];
    for (std::size_t d = 0; d < in; ++d) {
      const double xv = x(i, d);
      if (xv == 0.0) continue;
      const double* wr = &w(d, 0);
      for (std::size_t j = 0; j < out; ++j) yr[j] += xv * wr[j];
    }
  }
  return y;
}

struct AffineGrads {
  Tensor grad_x;
  Tensor grad_w;
  Tensor grad_b;
};

inline AffineGrads affine_backward(const Tensor& x, const Tensor& w,
                                   const Tensor& grad_out) {
  detail::require_rank(x, 2, "affine_backward", "x");
  detail::require_rank(w, 2, "affine_backward", "W");
  detail::require_rank(grad_out, 2, "affine_backward", "grad_out");
  detail::require_axis("affine_backward", "x.shape[1]", x.dim(1), "W.shape[0]",
                       w.dim(0));
  detail::require_axis("affine_backward", "grad_out.shape[0]", grad_out.dim(0),
                       "x.shape[0]", x.dim(0));
  detail::require_axis("affine_backward", "grad_out.shape[1]", grad_out.dim(1),
                       "W.shape[1]", w.dim(1));
  const std::size_t rows = x.dim(0), in = x.dim(1), out = w.dim(1);
  AffineGrads g{Tensor({rows, in}), Tensor({in, out}), Tensor({out})};
  for (std::size_t i = 0; i < rows; ++i) {
    const double* go = &grad_out(i, 0);
    for (std::size_t j = 0; j < out; ++j) g.grad_b[j] += go[j];
    for (std::size_t d = 0; d < in; ++d) {
      const double* wr = &w(d, 0);
      double* gw = &g.grad_w(d, 0);
      const double xv = x(i, d);
      double acc = 0.0;
      for (std::size_t j = 0; j < out; ++j) {
        acc += go[j] * wr[j];
        gw[j] += xv * go[j];
      }
      g.grad_x(i, d) = acc;
    }
  }
  return g;
}

inline Tensor relu_forward(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
  return y;
}

// Subgradient at exactly zero is zero.
inline Tensor relu_backward(const Tensor& x, const Tensor& grad_out) {
  if (x.shape() != grad_out.shape()) {
    throw DimensionError("relu_backward: x " + shape_string(x.shape()) +
                         " vs grad_out " + shape_string(grad_out.shape()));
  }
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(x[i] > 0.0)) g[i] = 0.0;
  }
  return g;
}

inline Tensor log_softmax(const Tensor& z) {
  detail::require_rank(z, 2, "log_softmax", "z");
  if (z.dim(1) < 2) {
    throw DimensionError("log_softmax: need at least 2 classes, got shape " +
                         shape_string(z.shape()));
  }
  Tensor out = z;
  for (std::size_t i = 0; i < z.dim(0); ++i) {
    auto r = out.row(i);
    const double m = *std::max_element(r.begin(), r.end());
    double s = 0.0;
    for (double v : r) s += std::exp(v - m);
    const double lse = m + std::log(s);
    for (double& v : r) v -= lse;
  }
  return out;
}

inline Tensor softmax(const Tensor& z) {
  Tensor p = log_softmax(z);
  for (double& v : p.values()) v = std::exp(v);
  return p;
}

// Maximum per-coordinate relative error between `analytic` and the central
// difference of `f` at `x`. Denominator is max(|a|, |n|, 1e-8).
inline double grad_check(const std::function<double(const Tensor&)>& f,
                         const Tensor& x, const Tensor& analytic,
                         double eps = 1e-5) {
  if (!(eps > 0.0)) throw ValidationError("grad_check: eps must be > 0");
  if (x.shape() != analytic.shape()) {
    throw DimensionError("grad_check: x " + shape_string(x.shape()) +
                         " vs analytic " + shape_string(analytic.shape()));
  }
  Tensor probe = x;
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double fp = f(probe);
    probe[i] = orig - eps;
    const double fm = f(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("grad_check: non-finite objective at coordinate " +
                         std::to_string(i));
    }
    const double numeric = (fp - fm) / (2.0 * eps);
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace desa
