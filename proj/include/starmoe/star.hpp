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

#ifndef STARMOE_STAR_HPP_
#define STARMOE_STAR_HPP_

// Routing stabilisation for expandable MoE.
//
// Old classes are remembered per MoE layer by
//   * a routing anchor: mean routing logits over the class's router inputs at
//     the end of its task, and their softmax P_bar (zero-padded as experts are
//     added later), and
//   * a diagonal Gaussian over the class's router inputs.
//
// Alignment samples synthetic router inputs from the Gaussians and penalises
// KL(P_hat || softmax(z W_router)); layers are weighted by the softmax of
// their router gradient norms, blended with uniform weights by gamma.
//
// Capacity regularisation penalises only experts whose smooth top-k load on
// the current batch exceeds the (gradient-detached) mean load.

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "starmoe/autodiff.hpp"
#include "starmoe/errors.hpp"
#include "starmoe/moe.hpp"
#include "starmoe/rng.hpp"
#include "starmoe/tensor.hpp"

namespace starmoe {

inline constexpr double kVarianceJitter = 1e-6;
inline constexpr double kDefaultSigma = 0.1;
inline constexpr double kDefaultEpsilon = 1e-8;
inline constexpr double kBoundSlack = 1e-9;

struct RoutingAnchor {
  std::size_t class_id = 0;
  std::size_t layer_index = 0;
  Vector mean_logits;
  ProbVector hist_dist;
  std::size_t e_at_learning = 0;

  friend bool operator==(const RoutingAnchor&, const RoutingAnchor&) = default;
};

struct RouterInputStats {
  std::size_t class_id = 0;
  std::size_t layer_index = 0;
  Vector mean;
  Vector diag_var;  // jitter included
  std::size_t sample_count = 0;

  friend bool operator==(const RouterInputStats&, const RouterInputStats&) = default;
};

// Anchors and statistics of every old class for one MoE layer, aligned by
// position.
struct LayerMemory {
  std::vector<RoutingAnchor> anchors;
  std::vector<RouterInputStats> stats;

  std::size_t class_count() const { return anchors.size(); }
};

inline RoutingAnchor compute_anchor(const DenseMatrix& router_inputs, const Router& router,
                                    std::size_t class_id = 0, std::size_t layer_index = 0) {
  detail::require(router_inputs.rows() >= 1, "compute_anchor: no router inputs");
  detail::require(router_inputs.cols() == router.w_router.rows(), "compute_anchor: input width mismatch");
  const DenseMatrix logits = matmul(router_inputs, router.w_router);
  Vector mean_logits(router.e_total(), 0.0);
  for (std::size_t r = 0; r < logits.rows(); ++r)
    for (std::size_t j = 0; j < logits.cols(); ++j) mean_logits[j] += logits(r, j);
  for (double& v : mean_logits) v /= static_cast<double>(logits.rows());
  RoutingAnchor a;
  a.class_id = class_id;
  a.layer_index = layer_index;
  a.hist_dist = softmax(mean_logits);
  a.mean_logits = std::move(mean_logits);
  a.e_at_learning = router.e_total();
  return a;
}

inline ProbVector pad_target(const RoutingAnchor& anchor, std::size_t e_total_now) {
  if (e_total_now < anchor.e_at_learning)
    throw InvalidArgument("pad_target: router has " + std::to_string(e_total_now) +
                          " experts, fewer than the anchor's " + std::to_string(anchor.e_at_learning));
  Vector padded = anchor.hist_dist.values();
  padded.resize(e_total_now, 0.0);
  return ProbVector(std::move(padded));
}

// Per-coordinate mean and population variance (divide by N) plus jitter.
inline RouterInputStats fit_router_input_stats(const DenseMatrix& router_inputs, std::size_t class_id = 0,
                                               std::size_t layer_index = 0, double jitter = kVarianceJitter) {
  detail::require(router_inputs.rows() >= 2, "fit_router_input_stats: need at least two inputs");
  const std::size_t n = router_inputs.rows();
  const std::size_t d = router_inputs.cols();
  RouterInputStats s;
  s.class_id = class_id;
  s.layer_index = layer_index;
  s.sample_count = n;
  s.mean.assign(d, 0.0);
  s.diag_var.assign(d, 0.0);
  // Welford: numerically safe single pass.
  for (std::size_t r = 0; r < n; ++r) {
    const double count = static_cast<double>(r + 1);
    for (std::size_t i = 0; i < d; ++i) {
      const double x = router_inputs(r, i);
      const double delta = x - s.mean[i];
      s.mean[i] += delta / count;
      s.diag_var[i] += delta * (x - s.mean[i]);
    }
  }
  for (double& v : s.diag_var) v = std::max(v / static_cast<double>(n), 0.0) + jitter;
  return s;
}

// ---------------------------------------------------------------------------
// Alignment.

// Synthetic router inputs for one layer: samples_per_class rows per class,
// with their zero-padded targets and the 1/samples_per_class row weights.
struct AlignmentBatch {
  DenseMatrix inputs;   // M x d
  DenseMatrix targets;  // M x E_total
  Vector weights;       // M
  std::vector<std::size_t> owner;  // class position of each row
};

inline void check_memory(const LayerMemory& memory) {
  if (memory.anchors.size() != memory.stats.size())
    throw InvalidArgument("alignment: anchors and statistics cover different class sets");
  for (std::size_t i = 0; i < memory.anchors.size(); ++i)
    if (memory.anchors[i].class_id != memory.stats[i].class_id)
      throw InvalidArgument("alignment: class " + std::to_string(memory.anchors[i].class_id) +
                            " has no matching statistics");
}

inline AlignmentBatch draw_alignment_batch(const LayerMemory& memory, std::size_t e_total,
                                           std::size_t samples_per_class, SeededRng& rng) {
  check_memory(memory);
  detail::require(samples_per_class >= 1, "alignment: samples_per_class must be >= 1");
  const std::size_t classes = memory.class_count();
  const std::size_t d = classes == 0 ? 0 : memory.stats.front().mean.size();
  AlignmentBatch b;
  b.inputs = DenseMatrix(classes * samples_per_class, d);
  b.targets = DenseMatrix(classes * samples_per_class, e_total);
  b.weights.assign(classes * samples_per_class, 1.0 / static_cast<double>(samples_per_class));
  b.owner.resize(classes * samples_per_class);
  std::size_t row = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    const ProbVector target = pad_target(memory.anchors[c], e_total);
    const RouterInputStats& st = memory.stats[c];
    detail::require(st.mean.size() == d, "alignment: statistics width mismatch");
    for (std::size_t s = 0; s < samples_per_class; ++s, ++row) {
      const Vector z = sample_gaussian_diag(st.mean, st.diag_var, rng);
      std::copy(z.begin(), z.end(), b.inputs.row(row).begin());
      std::copy(target.begin(), target.end(), b.targets.row(row).begin());
      b.owner[row] = c;
    }
  }
  return b;
}

// L_align for one layer on a drawn batch. Gradient reaches w_router only.
inline Var alignment_loss(Var w_router, const AlignmentBatch& batch) {
  Tape& tape = *w_router.tape();
  if (batch.inputs.rows() == 0) return tape.scalar_constant(0.0);
  detail::require(batch.inputs.cols() == w_router.rows() && batch.targets.cols() == w_router.cols(),
                  "alignment_loss: shape mismatch");
  Var logits = ad::matmul(tape.constant(batch.inputs), w_router);
  return ad::kl_to_softmax(batch.targets, logits, batch.weights);
}

inline double sara_layer_loss(const LayerMemory& memory, const Router& router, std::size_t samples_per_class,
                              SeededRng& rng) {
  const AlignmentBatch batch = draw_alignment_batch(memory, router.e_total(), samples_per_class, rng);
  Tape tape;
  return alignment_loss(tape.constant(router.w_router), batch).scalar();
}

// ---------------------------------------------------------------------------
// Sensitivity-aware layer weights.

struct SensitivityWeights {
  Vector raw_scores;
  Vector softmax_weights;
  Vector blended_weights;
  double gamma = 0.0;

  std::size_t layer_count() const { return blended_weights.size(); }
};

inline SensitivityWeights blend_weights(std::span<const double> scores, double gamma) {
  detail::require(!scores.empty(), "blend_weights: need at least one layer");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw InvalidArgument("blend_weights: gamma must lie in [0, 1]");
  SensitivityWeights w;
  w.raw_scores.assign(scores.begin(), scores.end());
  w.softmax_weights = softmax(scores).values();
  w.gamma = gamma;
  const double uniform = 1.0 / static_cast<double>(scores.size());
  for (double a : w.softmax_weights) w.blended_weights.push_back(gamma * a + (1.0 - gamma) * uniform);
  return w;
}

inline SensitivityWeights uniform_weights(std::size_t layers) {
  return blend_weights(Vector(layers, 0.0), 0.0);
}

// Label columns [first, second) of the loss softmax; {0, 0} means all.
using ColumnRange = std::pair<std::size_t, std::size_t>;

// Frobenius norm of the classification-loss gradient on every MoE router
// for one batch. Does not modify `net`.
inline Vector sensitivity_scores(const Network& net, const DenseMatrix& inputs,
                                 std::span<const std::size_t> labels, ColumnRange columns = {0, 0}) {
  detail::require(inputs.rows() >= 1, "sensitivity_scores: empty proxy batch");
  Tape tape;
  const NetworkGraph g = build_graph(tape, net, inputs);
  Var loss = ad::cross_entropy(g.logits, labels, columns);
  tape.backward(loss);
  Vector scores;
  for (std::size_t l : net.moe_layer_indices()) scores.push_back(tape.grad(g.router_weights[l]).frobenius_norm());
  return scores;
}

inline double sara_total(const SensitivityWeights& weights, std::span<const double> layer_losses) {
  if (weights.layer_count() != layer_losses.size())
    throw InvalidArgument("sara_total: " + std::to_string(layer_losses.size()) + " losses for " +
                          std::to_string(weights.layer_count()) + " weights");
  double total = 0.0;
  for (std::size_t l = 0; l < layer_losses.size(); ++l) total += weights.blended_weights[l] * layer_losses[l];
  return total;
}

inline Var sara_total(const SensitivityWeights& weights, std::span<const Var> layer_losses) {
  if (weights.layer_count() != layer_losses.size())
    throw InvalidArgument("sara_total: loss count differs from weight count");
  detail::require(!layer_losses.empty(), "sara_total: no layers");
  Var total = ad::scale(layer_losses[0], weights.blended_weights[0]);
  for (std::size_t l = 1; l < layer_losses.size(); ++l)
    total = ad::add(total, ad::scale(layer_losses[l], weights.blended_weights[l]));
  return total;
}

// ---------------------------------------------------------------------------
// Capacity regularisation.

inline double smooth_select_prob(std::span<const double> logits, std::size_t j, std::size_t k, double sigma) {
  detail::require(!logits.empty() && j < logits.size(), "smooth_select_prob: expert index out of range");
  detail::require(k >= 1, "smooth_select_prob: k must be >= 1");
  if (!(sigma > 0.0)) throw InvalidArgument("smooth_select_prob: sigma must be positive");
  if (k >= logits.size()) return 1.0;
  const double tau = ad::kth_highest_excluding(logits, j, k).first;
  return normal_cdf((logits[j] - tau) / sigma);
}

inline Var batch_load(Var router_inputs, Var w_router, std::size_t k, double sigma) {
  detail::require(router_inputs.rows() >= 1, "batch_load: empty batch");
  return ad::column_sums(ad::smooth_select(ad::matmul(router_inputs, w_router), k, sigma));
}

inline Vector batch_load(const DenseMatrix& router_inputs, const Router& router, std::size_t k, double sigma) {
  detail::require(router_inputs.rows() >= 1, "batch_load: empty batch");
  Tape tape;
  return batch_load(tape.constant(router_inputs), tape.constant(router.w_router), k, sigma).value().data();
}

// (1/E) sum_j max(L_j - m, 0)^2 / (m^2 + eps) with m a constant.
inline Var acr_loss_at_mean(Var loads, double mean_load, double epsilon = kDefaultEpsilon) {
  if (!(epsilon > 0.0)) throw InvalidArgument("acr_loss: epsilon must be positive");
  const std::size_t e = loads.value().size();
  detail::require(e >= 1, "acr_loss: no experts");
  Var excess = ad::relu(ad::add_constant(loads, -mean_load));
  const double norm = static_cast<double>(e) * (mean_load * mean_load + epsilon);
  return ad::scale(ad::sum(ad::square(excess)), 1.0 / norm);
}

inline double mean_load(const DenseMatrix& loads) {
  detail::require(loads.size() >= 1, "acr_loss: no experts");
  return mean(loads.data());
}

// acr_loss_at_mean at sg(mean L): the mean is read as a plain double, so no
// graph edge carries its adjoint.
inline Var acr_loss(Var loads, double epsilon = kDefaultEpsilon) {
  return acr_loss_at_mean(loads, mean_load(loads.value()), epsilon);
}

inline double acr_loss(std::span<const double> loads, double epsilon = kDefaultEpsilon) {
  detail::require(!loads.empty(), "acr_loss: no experts");
  Tape tape;
  return acr_loss(tape.constant(DenseMatrix::row_vector(loads)), epsilon).scalar();
}

// ---------------------------------------------------------------------------
// Total objective.

inline void check_lambdas(double lambda_sara, double lambda_acr) {
  if (!(lambda_sara >= 0.0) || !(lambda_acr >= 0.0))
    throw InvalidArgument("total_loss: lambda values must be non-negative");
}

// The first task (task_index 0) trains on the classification loss alone.
inline double total_loss(double l_cur, double l_sara, double l_acr, double lambda_sara, double lambda_acr,
                         std::size_t task_index = 1) {
  check_lambdas(lambda_sara, lambda_acr);
  if (task_index == 0) return l_cur;
  return l_cur + lambda_sara * l_sara + lambda_acr * l_acr;
}

// ---------------------------------------------------------------------------
// Routing drift.

struct DriftReport {
  Vector layer_drift;
  Vector layer_alignment;
  Vector weights;
  double total_drift = 0.0;
  double sara_loss = 0.0;
  std::size_t old_class_count = 0;
  double bound = 0.0;
  bool bound_holds = true;
};

// Ordered text form with the documented field order.
inline std::string drift_report_json(const DriftReport& r) {
  nlohmann::ordered_json j;
  j["layer_drift"] = r.layer_drift;
  j["total_drift"] = r.total_drift;
  j["sara_loss"] = r.sara_loss;
  j["class_count"] = r.old_class_count;
  j["bound"] = r.bound;
  j["bound_holds"] = r.bound_holds;
  j["layer_alignment"] = r.layer_alignment;
  j["weights"] = r.weights;
  return j.dump(2);
}

using DivergenceFn = std::function<double(std::span<const double>, std::span<const double>)>;

inline double default_divergence(std::span<const double> p, std::span<const double> q) {
  return kl_divergence(p, q);
}

// Monte-Carlo drift and alignment loss on one shared set of samples per
// (layer, class). `routers[l]` and `memories[l]` describe MoE layer l.
inline DriftReport routing_drift(std::span<const LayerMemory> memories, std::span<const Router* const> routers,
                                 const SensitivityWeights& weights, std::size_t samples_per_class, SeededRng& rng,
                                 const DivergenceFn& divergence = default_divergence) {
  detail::require(memories.size() == routers.size(), "routing_drift: one memory per router required");
  detail::require(weights.layer_count() == routers.size(), "routing_drift: one weight per layer required");
  detail::require(samples_per_class >= 1, "routing_drift: samples_per_class must be >= 1");
  DriftReport report;
  report.weights = weights.blended_weights;
  report.layer_drift.assign(routers.size(), 0.0);
  report.layer_alignment.assign(routers.size(), 0.0);
  report.old_class_count = memories.empty() ? 0 : memories.front().class_count();
  for (const LayerMemory& m : memories) {
    check_memory(m);
    if (m.class_count() != report.old_class_count)
      throw InvalidArgument("routing_drift: layers disagree on the old-class set");
  }
  if (report.old_class_count == 0) return report;

  for (std::size_t l = 0; l < routers.size(); ++l) {
    const Router& router = *routers[l];
    const AlignmentBatch batch = draw_alignment_batch(memories[l], router.e_total(), samples_per_class, rng);
    const DenseMatrix logits = matmul(batch.inputs, router.w_router);
    for (std::size_t r = 0; r < logits.rows(); ++r) {
      Vector q(logits.row(r).begin(), logits.row(r).end());
      detail::softmax_inplace(q);
      const auto p = batch.targets.row(r);
      report.layer_drift[l] += batch.weights[r] * l1_distance(p, q);
      report.layer_alignment[l] += batch.weights[r] * divergence(p, q);
    }
  }
  for (std::size_t l = 0; l < routers.size(); ++l) {
    report.total_drift += weights.blended_weights[l] * report.layer_drift[l];
    report.sara_loss += weights.blended_weights[l] * report.layer_alignment[l];
  }
  report.bound = std::sqrt(2.0 * static_cast<double>(report.old_class_count) * std::max(report.sara_loss, 0.0));
  report.bound_holds = report.total_drift <= report.bound + kBoundSlack;
  return report;
}

}  // namespace starmoe

#endif  // STARMOE_STAR_HPP_
