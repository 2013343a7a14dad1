/* Copyright 2026 The StaR-MoE Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#ifndef STARMOE_TENSOR_HPP_
#define STARMOE_TENSOR_HPP_

// Dense row-major matrices in double precision plus the probability helpers
// shared by routing, alignment and drift code.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "starmoe/errors.hpp"

namespace starmoe {

using Vector = std::vector<double>;

class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  // Throws InvalidArgument on a size mismatch and NumericDomainError on a
  // non-finite entry.
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    detail::require(data_.size() == rows_ * cols_,
                    "DenseMatrix: data length " + std::to_string(data_.size()) +
                        " != " + std::to_string(rows_) + "x" +
                        std::to_string(cols_));
    if (!all_finite()) throw NumericDomainError("DenseMatrix: non-finite entry");
  }

  static DenseMatrix row_vector(std::span<const double> v) {
    return DenseMatrix(1, v.size(), std::vector<double>(v.begin(), v.end()));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  bool same_shape(const DenseMatrix& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

  // Appends columns initialised to `fill`; existing entries keep their values.
  void append_cols(std::size_t extra, double fill = 0.0) {
    std::vector<double> grown(rows_ * (cols_ + extra), fill);
    for (std::size_t r = 0; r < rows_; ++r)
      std::copy_n(data_.begin() + r * cols_, cols_, grown.begin() + r * (cols_ + extra));
    cols_ += extra;
    data_ = std::move(grown);
  }

  double frobenius_norm() const {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return std::sqrt(s);
  }

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  detail::require(a.cols() == b.rows(),
                  "matmul: inner dimensions " + std::to_string(a.cols()) + " vs " +
                      std::to_string(b.rows()));
  DenseMatrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto orow = out.row(i);
    for (std::size_t p = 0; p < a.cols(); ++p) {
      const double av = a(i, p);
      if (av == 0.0) continue;
      auto brow = b.row(p);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

// a^T b without materialising the transpose.
inline DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b) {
  detail::require(a.rows() == b.rows(), "matmul_tn: row counts differ");
  DenseMatrix out(a.cols(), b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto arow = a.row(r);
    auto brow = b.row(r);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      auto orow = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

// a b^T without materialising the transpose.
inline DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b) {
  detail::require(a.cols() == b.cols(), "matmul_nt: column counts differ");
  DenseMatrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto brow = b.row(j);
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols(); ++p) s += arow[p] * brow[p];
      out(i, j) = s;
    }
  }
  return out;
}

// Row vector times matrix: x (length rows) -> length cols.
inline Vector vecmat(std::span<const double> x, const DenseMatrix& m) {
  detail::require(x.size() == m.rows(),
                  "vecmat: vector length " + std::to_string(x.size()) +
                      " vs matrix rows " + std::to_string(m.rows()));
  Vector out(m.cols(), 0.0);
  for (std::size_t p = 0; p < m.rows(); ++p) {
    const double xv = x[p];
    if (xv == 0.0) continue;
    auto mrow = m.row(p);
    for (std::size_t j = 0; j < m.cols(); ++j) out[j] += xv * mrow[j];
  }
  return out;
}

inline Vector relu(Vector v) {
  for (double& x : v) x = std::max(x, 0.0);
  return v;
}

// A validated probability distribution: entries in [0,1], sum within 1e-9 of 1.
class ProbVector {
 public:
  static constexpr double kSumTolerance = 1e-9;

  ProbVector() = default;
  explicit ProbVector(std::vector<double> probs) : probs_(std::move(probs)) {
    double sum = 0.0;
    for (double p : probs_) {
      if (!(p >= 0.0 && p <= 1.0))
        throw InvalidArgument("ProbVector: entry outside [0,1]");
      sum += p;
    }
    if (std::abs(sum - 1.0) > kSumTolerance)
      throw InvalidArgument("ProbVector: entries sum to " + std::to_string(sum));
  }

  std::size_t size() const { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }
  const std::vector<double>& values() const { return probs_; }
  std::span<const double> span() const { return probs_; }
  auto begin() const { return probs_.begin(); }
  auto end() const { return probs_.end(); }

  friend bool operator==(const ProbVector&, const ProbVector&) = default;

 private:
  std::vector<double> probs_;
};

namespace detail {

inline void require_finite(std::span<const double> v, const char* who) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericDomainError(std::string(who) + ": non-finite entry");
}

// Max-subtracted exponentials normalised in place; no validation.
inline void softmax_inplace(std::span<double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double& x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (double& x : v) x /= sum;
}

}  // namespace detail

inline ProbVector softmax(std::span<const double> logits) {
  detail::require(!logits.empty(), "softmax: empty logits");
  detail::require_finite(logits, "softmax");
  Vector out(logits.begin(), logits.end());
  detail::softmax_inplace(out);
  return ProbVector(std::move(out));
}

// sum_j p_j log(p_j / q_j) with 0 log(0/q) = 0.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  detail::require(p.size() == q.size(),
                  "kl_divergence: lengths " + std::to_string(p.size()) + " vs " +
                      std::to_string(q.size()));
  double kl = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (p[j] <= 0.0) continue;
    if (q[j] <= 0.0)
      throw InfiniteDivergence("kl_divergence: q_" + std::to_string(j) +
                               " = 0 where p is positive");
    kl += p[j] * std::log(p[j] / q[j]);
  }
  // Rounding can leave a tiny negative residue for p ~= q.
  return std::max(kl, 0.0);
}

inline double kl_divergence(const ProbVector& p, const ProbVector& q) {
  return kl_divergence(p.span(), q.span());
}

inline double l1_distance(std::span<const double> p, std::span<const double> q) {
  detail::require(p.size() == q.size(), "l1_distance: length mismatch");
  double s = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) s += std::abs(p[j] - q[j]);
  return s;
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

inline double normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

inline double mean(std::span<const double> v) {
  detail::require(!v.empty(), "mean: empty input");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Even counts average the two middle order statistics.
inline double median(std::vector<double> v) {
  detail::require(!v.empty(), "median: empty input");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace starmoe

#endif  // STARMOE_TENSOR_HPP_
