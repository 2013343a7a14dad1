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

#ifndef STARMOE_AUTODIFF_HPP_
#define STARMOE_AUTODIFF_HPP_

// Reverse-mode differentiation over matrix-valued nodes.
//
// A Tape owns every node created while building a loss. Leaves are either
// constants (no adjoint) or parameters (adjoint accumulated by backward()).
// Each recorded op stores a closure that reads its own output adjoint and
// adds into the adjoints of its inputs. Nodes are appended in evaluation
// order, so a reverse sweep visits every consumer before its producers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "starmoe/errors.hpp"
#include "starmoe/tensor.hpp"

namespace starmoe {

class Tape;

class Var {
 public:
  Var() = default;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  inline const DenseMatrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double scalar() const {
    detail::require(rows() == 1 && cols() == 1, "Var::scalar: not 1x1");
    return value()(0, 0);
  }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(DenseMatrix value) { return push(std::move(value), false, nullptr); }
  Var parameter(DenseMatrix value) { return push(std::move(value), true, nullptr); }
  Var scalar_constant(double v) { return constant(DenseMatrix(1, 1, v)); }

  // Records an op node. It requires grad iff any input does; otherwise the
  // closure is dropped since nothing upstream can receive an adjoint.
  Var record(DenseMatrix value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& in : inputs) {
      check_owned(in);
      needs = needs || nodes_[in.id()].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr);
  }

  const DenseMatrix& value(Var v) const {
    check_owned(v);
    return nodes_[v.id()].value;
  }

  bool requires_grad(Var v) const {
    check_owned(v);
    return nodes_[v.id()].requires_grad;
  }

  // Adjoint of `v` after backward(); zeros when nothing flowed into it.
  DenseMatrix grad(Var v) const {
    check_owned(v);
    const Node& n = nodes_[v.id()];
    return n.has_grad ? n.grad : DenseMatrix(n.value.rows(), n.value.cols());
  }

  void backward(Var loss) {
    check_owned(loss);
    const DenseMatrix& lv = nodes_[loss.id()].value;
    if (lv.rows() != 1 || lv.cols() != 1)
      throw InvalidArgument("backward: root is " + std::to_string(lv.rows()) + "x" +
                            std::to_string(lv.cols()) + ", expected a scalar");
    for (Node& n : nodes_) {
      n.has_grad = false;
      n.grad = DenseMatrix();
    }
    grad_ref(loss.id())(0, 0) = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.has_grad && n.backward) n.backward(*this, i);
    }
  }

  std::size_t size() const { return nodes_.size(); }

  // For op closures.
  const DenseMatrix& out_grad(std::size_t self) const { return nodes_[self].grad; }
  const DenseMatrix& node_value(std::size_t id) const { return nodes_[id].value; }
  bool wants_grad(Var v) const { return nodes_[v.id()].requires_grad; }

  // Adjoint buffer of `v`, allocated as zeros on first touch. Only valid for
  // nodes that require grad.
  DenseMatrix& grad_ref(Var v) { return grad_ref(v.id()); }

 private:
  struct Node {
    DenseMatrix value;
    DenseMatrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };

  Var push(DenseMatrix value, bool requires_grad, BackwardFn fn) {
    if (!value.all_finite()) throw NumericDomainError("Tape: non-finite node value");
    nodes_.push_back(Node{std::move(value), DenseMatrix(), requires_grad, false, std::move(fn)});
    return Var(this, nodes_.size() - 1);
  }

  DenseMatrix& grad_ref(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = DenseMatrix(n.value.rows(), n.value.cols());
      n.has_grad = true;
    }
    return n.grad;
  }

  void check_owned(Var v) const {
    if (v.tape() != this || v.id() >= nodes_.size())
      throw InvalidArgument("Tape: variable belongs to a different tape");
  }

  std::deque<Node> nodes_;
};

inline const DenseMatrix& Var::value() const { return tape_->value(*this); }

// Primitive ops. Shapes are validated eagerly; every op is differentiable
// in each Var argument except where a parameter is documented as constant.
namespace ad {

namespace detail {

inline void add_into(DenseMatrix& dst, const DenseMatrix& src, double s = 1.0) {
  auto& d = dst.data();
  const auto& v = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * v[i];
}

inline void same_shape(const Var& a, const Var& b, const char* who) {
  starmoe::detail::require(a.value().same_shape(b.value()),
                           std::string(who) + ": shape mismatch");
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  Tape& t = *a.tape();
  return t.record(starmoe::matmul(a.value(), b.value()), {a, b},
                  [a, b](Tape& t, std::size_t self) {
                    const DenseMatrix& g = t.out_grad(self);
                    if (t.wants_grad(a)) detail::add_into(t.grad_ref(a), matmul_nt(g, b.value()));
                    if (t.wants_grad(b)) detail::add_into(t.grad_ref(b), matmul_tn(a.value(), g));
                  });
}

inline Var add(Var a, Var b) {
  detail::same_shape(a, b, "add");
  DenseMatrix out = a.value();
  detail::add_into(out, b.value());
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const DenseMatrix& g = t.out_grad(self);
    if (t.wants_grad(a)) detail::add_into(t.grad_ref(a), g);
    if (t.wants_grad(b)) detail::add_into(t.grad_ref(b), g);
  });
}

inline Var sub(Var a, Var b) {
  detail::same_shape(a, b, "sub");
  DenseMatrix out = a.value();
  detail::add_into(out, b.value(), -1.0);
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const DenseMatrix& g = t.out_grad(self);
    if (t.wants_grad(a)) detail::add_into(t.grad_ref(a), g);
    if (t.wants_grad(b)) detail::add_into(t.grad_ref(b), g, -1.0);
  });
}

inline Var scale(Var a, double s) {
  DenseMatrix out = a.value();
  for (double& v : out.data()) v *= s;
  return a.tape()->record(std::move(out), {a}, [a, s](Tape& t, std::size_t self) {
    detail::add_into(t.grad_ref(a), t.out_grad(self), s);
  });
}

// a + c for a constant scalar c; no adjoint flows to c.
inline Var add_constant(Var a, double c) {
  DenseMatrix out = a.value();
  for (double& v : out.data()) v += c;
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, std::size_t self) {
    detail::add_into(t.grad_ref(a), t.out_grad(self));
  });
}

inline Var relu(Var a) {
  DenseMatrix out = a.value();
  for (double& v : out.data()) v = std::max(v, 0.0);
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, std::size_t self) {
    const auto& g = t.out_grad(self).data();
    const auto& x = a.value().data();
    auto& dst = t.grad_ref(a).data();
    for (std::size_t i = 0; i < dst.size(); ++i)
      if (x[i] > 0.0) dst[i] += g[i];
  });
}

inline Var square(Var a) {
  DenseMatrix out = a.value();
  for (double& v : out.data()) v *= v;
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, std::size_t self) {
    const auto& g = t.out_grad(self).data();
    const auto& x = a.value().data();
    auto& dst = t.grad_ref(a).data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += 2.0 * x[i] * g[i];
  });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape()->record(DenseMatrix(1, 1, s), {a}, [a](Tape& t, std::size_t self) {
    const double g = t.out_grad(self)(0, 0);
    for (double& d : t.grad_ref(a).data()) d += g;
  });
}

// 1 x cols row of column sums.
inline Var column_sums(Var a) {
  const DenseMatrix& x = a.value();
  DenseMatrix out(1, x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out(0, c) += x(r, c);
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, std::size_t self) {
    const DenseMatrix& g = t.out_grad(self);
    DenseMatrix& dst = t.grad_ref(a);
    for (std::size_t r = 0; r < dst.rows(); ++r)
      for (std::size_t c = 0; c < dst.cols(); ++c) dst(r, c) += g(0, c);
  });
}

// out[b, :] = gates[b, column] * m[b, :].
inline Var scale_rows_by_column(Var m, Var gates, std::size_t column) {
  const DenseMatrix& mv = m.value();
  const DenseMatrix& gv = gates.value();
  starmoe::detail::require(mv.rows() == gv.rows() && column < gv.cols(),
                           "scale_rows_by_column: shape mismatch");
  DenseMatrix out = mv;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (double& v : out.row(r)) v *= gv(r, column);
  return m.tape()->record(std::move(out), {m, gates}, [m, gates, column](Tape& t, std::size_t self) {
    const DenseMatrix& g = t.out_grad(self);
    const DenseMatrix& mv = m.value();
    const DenseMatrix& gv = gates.value();
    if (t.wants_grad(m)) {
      DenseMatrix& dm = t.grad_ref(m);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) dm(r, c) += gv(r, column) * g(r, c);
    }
    if (t.wants_grad(gates)) {
      DenseMatrix& dg = t.grad_ref(gates);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < g.cols(); ++c) s += mv(r, c) * g(r, c);
        dg(r, column) += s;
      }
    }
  });
}

// Indices of the min(k, n) largest entries, ties to the lower index. Sorted
// by descending value.
inline std::vector<std::size_t> top_k_indices(std::span<const double> h, std::size_t k) {
  std::vector<std::size_t> idx(h.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const std::size_t m = std::min(k, h.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(m), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      return h[a] > h[b] || (h[a] == h[b] && a < b);
                    });
  idx.resize(m);
  return idx;
}

// Row-wise sparse gate: softmax over each row's top-k logits, exact zeros
// elsewhere. The selection itself is piecewise constant and carries no
// adjoint.
inline Var topk_gate(Var h, std::size_t k) {
  starmoe::detail::require(k >= 1, "topk_gate: k must be >= 1");
  const DenseMatrix& hv = h.value();
  DenseMatrix out(hv.rows(), hv.cols());
  for (std::size_t r = 0; r < hv.rows(); ++r) {
    auto row = hv.row(r);
    const auto sel = top_k_indices(row, k);
    double mx = row[sel.front()];
    double z = 0.0;
    for (std::size_t j : sel) z += std::exp(row[j] - mx);
    for (std::size_t j : sel) out(r, j) = std::exp(row[j] - mx) / z;
  }
  return h.tape()->record(std::move(out), {h}, [h](Tape& t, std::size_t self) {
    const DenseMatrix& g = t.out_grad(self);
    const DenseMatrix& p = t.node_value(self);
    DenseMatrix& dh = t.grad_ref(h);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < g.cols(); ++c) dot += p(r, c) * g(r, c);
      for (std::size_t c = 0; c < g.cols(); ++c)
        if (p(r, c) > 0.0) dh(r, c) += p(r, c) * (g(r, c) - dot);
    }
  });
}

inline Var row_softmax(Var h) {
  DenseMatrix out = h.value();
  for (std::size_t r = 0; r < out.rows(); ++r) starmoe::detail::softmax_inplace(out.row(r));
  return h.tape()->record(std::move(out), {h}, [h](Tape& t, std::size_t self) {
    const DenseMatrix& g = t.out_grad(self);
    const DenseMatrix& p = t.node_value(self);
    DenseMatrix& dh = t.grad_ref(h);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < g.cols(); ++c) dot += p(r, c) * g(r, c);
      for (std::size_t c = 0; c < g.cols(); ++c) dh(r, c) += p(r, c) * (g(r, c) - dot);
    }
  });
}

// Mean softmax cross-entropy over the rows of `logits`. When `columns` is
// non-empty the softmax is restricted to [columns.first, columns.second) and
// the other logits receive no adjoint.
inline Var cross_entropy(Var logits, std::span<const std::size_t> labels,
                         std::pair<std::size_t, std::size_t> columns = {0, 0}) {
  const DenseMatrix& z = logits.value();
  starmoe::detail::require(labels.size() == z.rows() && !labels.empty(),
                           "cross_entropy: label count mismatch");
  const std::size_t lo = columns.first;
  const std::size_t hi = columns.second == 0 ? z.cols() : columns.second;
  starmoe::detail::require(lo < hi && hi <= z.cols(), "cross_entropy: bad column range");
  DenseMatrix probs(z.rows(), z.cols());
  double loss = 0.0;
  for (std::size_t r = 0; r < z.rows(); ++r) {
    starmoe::detail::require(labels[r] >= lo && labels[r] < hi,
                             "cross_entropy: label outside the active columns");
    double mx = z(r, lo);
    for (std::size_t c = lo; c < hi; ++c) mx = std::max(mx, z(r, c));
    double s = 0.0;
    for (std::size_t c = lo; c < hi; ++c) s += std::exp(z(r, c) - mx);
    for (std::size_t c = lo; c < hi; ++c) probs(r, c) = std::exp(z(r, c) - mx) / s;
    loss += (mx + std::log(s)) - z(r, labels[r]);
  }
  const double n = static_cast<double>(z.rows());
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return logits.tape()->record(
      DenseMatrix(1, 1, loss / n), {logits},
      [logits, probs = std::move(probs), lab = std::move(lab), lo, hi, n](Tape& t, std::size_t self) {
        const double g = t.out_grad(self)(0, 0) / n;
        DenseMatrix& dz = t.grad_ref(logits);
        for (std::size_t r = 0; r < dz.rows(); ++r) {
          for (std::size_t c = lo; c < hi; ++c) dz(r, c) += g * probs(r, c);
          dz(r, lab[r]) -= g;
        }
      });
}

// sum_b w_b * KL(targets[b] || softmax(logits[b])). Targets and weights are
// constants; rows of `targets` must be distributions.
inline Var kl_to_softmax(const DenseMatrix& targets, Var logits, std::span<const double> row_weights) {
  const DenseMatrix& h = logits.value();
  starmoe::detail::require(targets.same_shape(h) && row_weights.size() == h.rows(),
                           "kl_to_softmax: shape mismatch");
  DenseMatrix q(h.rows(), h.cols());
  double loss = 0.0;
  for (std::size_t r = 0; r < h.rows(); ++r) {
    auto hr = h.row(r);
    const double mx = *std::max_element(hr.begin(), hr.end());
    double s = 0.0;
    for (double v : hr) s += std::exp(v - mx);
    const double log_z = mx + std::log(s);
    double kl = 0.0;
    for (std::size_t c = 0; c < h.cols(); ++c) {
      const double log_q = hr[c] - log_z;
      q(r, c) = std::exp(log_q);
      const double p = targets(r, c);
      if (p > 0.0) kl += p * (std::log(p) - log_q);
    }
    loss += row_weights[r] * std::max(kl, 0.0);
  }
  std::vector<double> w(row_weights.begin(), row_weights.end());
  return logits.tape()->record(
      DenseMatrix(1, 1, loss), {logits},
      [logits, targets, q = std::move(q), w = std::move(w)](Tape& t, std::size_t self) {
        const double g = t.out_grad(self)(0, 0);
        DenseMatrix& dh = t.grad_ref(logits);
        for (std::size_t r = 0; r < dh.rows(); ++r) {
          double mass = 0.0;
          for (std::size_t c = 0; c < dh.cols(); ++c) mass += targets(r, c);
          for (std::size_t c = 0; c < dh.cols(); ++c)
            dh(r, c) += g * w[r] * (q(r, c) * mass - targets(r, c));
        }
      });
}

// Value of the k-th highest entry of `row` excluding `skip`, together with
// its index (lower index on ties). Requires k < row.size().
inline std::pair<double, std::size_t> kth_highest_excluding(std::span<const double> row,
                                                            std::size_t skip, std::size_t k) {
  std::vector<std::size_t> others;
  others.reserve(row.size() - 1);
  for (std::size_t i = 0; i < row.size(); ++i)
    if (i != skip) others.push_back(i);
  std::nth_element(others.begin(), others.begin() + static_cast<std::ptrdiff_t>(k - 1), others.end(),
                   [&](std::size_t a, std::size_t b) {
                     return row[a] > row[b] || (row[a] == row[b] && a < b);
                   });
  const std::size_t at = others[k - 1];
  return {row[at], at};
}

// Elementwise smooth top-k membership Phi((h_j - tau_k(j)) / sigma), where
// tau_k(j) is the k-th highest logit among the other entries of the row.
// Rows with k >= width are constant ones.
inline Var smooth_select(Var h, std::size_t k, double sigma) {
  starmoe::detail::require(k >= 1, "smooth_select: k must be >= 1");
  if (!(sigma > 0.0)) throw InvalidArgument("smooth_select: sigma must be positive");
  const DenseMatrix& hv = h.value();
  const std::size_t e = hv.cols();
  DenseMatrix out(hv.rows(), e, 1.0);
  DenseMatrix slope(hv.rows(), e);
  std::vector<std::size_t> rival(hv.rows() * e, 0);
  if (k < e) {
    for (std::size_t r = 0; r < hv.rows(); ++r) {
      auto row = hv.row(r);
      for (std::size_t j = 0; j < e; ++j) {
        const auto [tau, at] = kth_highest_excluding(row, j, k);
        const double u = (row[j] - tau) / sigma;
        out(r, j) = normal_cdf(u);
        slope(r, j) = normal_pdf(u) / sigma;
        rival[r * e + j] = at;
      }
    }
  }
  const bool dense = k >= e;
  return h.tape()->record(
      std::move(out), {h},
      [h, slope = std::move(slope), rival = std::move(rival), dense, e](Tape& t, std::size_t self) {
        if (dense) return;
        const DenseMatrix& g = t.out_grad(self);
        DenseMatrix& dh = t.grad_ref(h);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t j = 0; j < e; ++j) {
            const double v = g(r, j) * slope(r, j);
            dh(r, j) += v;
            dh(r, rival[r * e + j]) -= v;
          }
      });
}

}  // namespace ad

// Per-entry comparison of tape adjoints against central differences.
struct GradientCheckEntry {
  std::size_t param = 0;
  std::size_t row = 0;
  std::size_t col = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double error = 0.0;  // relative, or absolute when both magnitudes < 1e-8
};

struct GradientCheckReport {
  std::vector<GradientCheckEntry> entries;
  double max_error = 0.0;
  bool passed = false;
};

// Builds a scalar loss on the given tape from parameter leaves.
using LossBuilder = std::function<Var(Tape&, std::span<const Var>)>;

inline double gradient_error(double analytic, double numeric) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  if (scale < 1e-8) return std::abs(analytic - numeric);
  return std::abs(analytic - numeric) / scale;
}

inline GradientCheckReport finite_diff_check(const LossBuilder& fn, std::span<const DenseMatrix> params,
                                             double step, double tol) {
  if (!(step > 0.0)) throw InvalidArgument("finite_diff_check: step must be positive");
  if (!(tol > 0.0)) throw InvalidArgument("finite_diff_check: tol must be positive");

  std::vector<DenseMatrix> values(params.begin(), params.end());
  auto evaluate = [&]() {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& v : values) leaves.push_back(tape.constant(v));
    const double f = fn(tape, leaves).scalar();
    if (!std::isfinite(f)) throw NumericDomainError("finite_diff_check: non-finite loss");
    return f;
  };

  Tape tape;
  std::vector<Var> leaves;
  for (const auto& v : values) leaves.push_back(tape.parameter(v));
  Var loss = fn(tape, leaves);
  tape.backward(loss);

  GradientCheckReport report;
  for (std::size_t p = 0; p < values.size(); ++p) {
    const DenseMatrix analytic = tape.grad(leaves[p]);
    for (std::size_t i = 0; i < values[p].size(); ++i) {
      double& x = values[p].data()[i];
      const double saved = x;
      x = saved + step;
      const double up = evaluate();
      x = saved - step;
      const double down = evaluate();
      x = saved;
      GradientCheckEntry e;
      e.param = p;
      e.row = i / values[p].cols();
      e.col = i % values[p].cols();
      e.analytic = analytic.data()[i];
      e.numeric = (up - down) / (2.0 * step);
      e.error = gradient_error(e.analytic, e.numeric);
      report.max_error = std::max(report.max_error, e.error);
      report.entries.push_back(e);
    }
  }
  report.passed = report.max_error <= tol;
  return report;
}

}  // namespace starmoe

#endif  // STARMOE_AUTODIFF_HPP_
