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

#ifndef STARMOE_CHECKS_HPP_
#define STARMOE_CHECKS_HPP_

// Self-contained property suites behind `starmoe check`.
//
// Every case draws its inputs from SeededRng::derive(base_seed, stream + i),
// so a failing case is reproduced by re-running the suite with the printed
// seed and case index.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "starmoe/autodiff.hpp"
#include "starmoe/moe.hpp"
#include "starmoe/rng.hpp"
#include "starmoe/star.hpp"
#include "starmoe/tensor.hpp"

namespace starmoe {

struct CheckFailure {
  std::size_t case_index = 0;
  std::uint64_t seed = 0;  // derive(seed, ...) reproduces the case
  std::string detail;
};

struct SuiteResult {
  std::string name;
  std::size_t cases = 0;
  std::vector<CheckFailure> failures;
  double worst = 0.0;  // suite-specific worst-case statistic
  double seconds = 0.0;

  bool passed() const { return failures.empty() && cases > 0; }
};

struct CheckOptions {
  std::uint64_t seed = 20240601;
  std::size_t drift_cases = 1000;
  std::size_t estimator_cases = 200;
  std::size_t estimator_draws = 100000;
  double estimator_tolerance = 0.01;
  std::size_t gradient_networks = 20;
  double gradient_step = 1e-5;
  double gradient_tolerance = 1e-4;
  std::size_t gating_cases = 1000;
  std::size_t stop_gradient_cases = 200;
  DivergenceFn divergence = default_divergence;
};

inline const std::vector<std::string>& check_suite_names() {
  static const std::vector<std::string> names = {"drift_kl_bound", "smooth_load_estimator",
                                                 "gradient_finite_difference", "topk_dense_gating",
                                                 "acr_stop_gradient"};
  return names;
}

namespace detail {

template <typename Fn>
SuiteResult timed_suite(const std::string& name, Fn&& body) {
  const auto start = std::chrono::steady_clock::now();
  SuiteResult r;
  r.name = name;
  body(r);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

inline std::size_t uniform_count(SeededRng& rng, std::size_t lo, std::size_t hi) {
  return lo + rng.index(hi - lo + 1);
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Drift bound on random memories and routers.

// Random layer memories with anchors learned at various expert counts and a
// random current router per layer.
struct DriftCase {
  std::vector<LayerMemory> memories;
  std::vector<Router> routers;
  SensitivityWeights weights;
  std::size_t samples_per_class = 1;
};

inline DriftCase random_drift_case(SeededRng& rng) {
  DriftCase c;
  const std::size_t layers = detail::uniform_count(rng, 2, 8);
  const std::size_t experts = detail::uniform_count(rng, 2, 16);
  const std::size_t classes = detail::uniform_count(rng, 1, 20);
  const std::size_t d = detail::uniform_count(rng, 2, 8);
  c.samples_per_class = detail::uniform_count(rng, 1, 4);
  Vector scores;
  for (std::size_t l = 0; l < layers; ++l) {
    LayerMemory mem;
    for (std::size_t cls = 0; cls < classes; ++cls) {
      const std::size_t e_then = detail::uniform_count(rng, 1, experts);
      Router old{gaussian_matrix(d, e_then, 2.0 * rng.uniform(), rng)};
      const DenseMatrix inputs = gaussian_matrix(3, d, 1.0, rng);
      mem.anchors.push_back(compute_anchor(inputs, old, cls, l));
      RouterInputStats st;
      st.class_id = cls;
      st.layer_index = l;
      for (std::size_t i = 0; i < d; ++i) {
        st.mean.push_back(rng.normal());
        st.diag_var.push_back(rng.uniform() * 2.0 + kVarianceJitter);
      }
      st.sample_count = 3;
      mem.stats.push_back(std::move(st));
    }
    c.memories.push_back(std::move(mem));
    c.routers.push_back(Router{gaussian_matrix(d, experts, 3.0 * rng.uniform(), rng)});
    scores.push_back(5.0 * rng.uniform());
  }
  c.weights = blend_weights(scores, rng.uniform());
  return c;
}

inline SuiteResult check_drift_bound(const CheckOptions& opt) {
  return detail::timed_suite("drift_kl_bound", [&](SuiteResult& r) {
    for (std::size_t i = 0; i < opt.drift_cases; ++i, ++r.cases) {
      SeededRng rng = SeededRng::derive(opt.seed, 100000 + i);
      try {
        const DriftCase c = random_drift_case(rng);
        std::vector<const Router*> routers;
        for (const Router& router : c.routers) routers.push_back(&router);
        const DriftReport rep = routing_drift(c.memories, routers, c.weights, c.samples_per_class, rng, opt.divergence);
        if (rep.bound > 0.0) r.worst = std::max(r.worst, rep.total_drift / rep.bound);
        if (!rep.bound_holds)
          r.failures.push_back({i, opt.seed, "drift " + detail::fmt(rep.total_drift) + " > bound " +
                                                 detail::fmt(rep.bound)});
      } catch (const std::exception& e) {
        r.failures.push_back({i, opt.seed, std::string("exception: ") + e.what()});
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Smooth load against noisy top-k selection.

// Fraction of draws in which expert j, with N(0, sigma^2) noise on its own
// logit, lands in the top-k (ties to the lower index), by direct ranking.
inline double noisy_selection_frequency(std::span<const double> logits, std::size_t j, std::size_t k, double sigma,
                                        std::size_t draws, SeededRng& rng) {
  std::size_t hits = 0;
  for (std::size_t n = 0; n < draws; ++n) {
    const double hj = logits[j] + sigma * rng.normal();
    std::size_t ahead = 0;
    for (std::size_t i = 0; i < logits.size(); ++i)
      if (i != j && (logits[i] > hj || (logits[i] == hj && i < j))) ++ahead;
    hits += ahead < k ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(draws);
}

inline SuiteResult check_smooth_estimator(const CheckOptions& opt) {
  return detail::timed_suite("smooth_load_estimator", [&](SuiteResult& r) {
    for (std::size_t i = 0; i < opt.estimator_cases; ++i, ++r.cases) {
      SeededRng rng = SeededRng::derive(opt.seed, 200000 + i);
      const std::size_t e = detail::uniform_count(rng, 2, 8);
      const std::size_t k = detail::uniform_count(rng, 1, e - 1);
      const std::size_t j = rng.index(e);
      const double sigma = 0.05 + 1.95 * rng.uniform();
      Vector logits(e);
      for (double& v : logits) v = rng.normal();
      const double p = smooth_select_prob(logits, j, k, sigma);
      const double freq = noisy_selection_frequency(logits, j, k, sigma, opt.estimator_draws, rng);
      const double gap = std::abs(p - freq);
      r.worst = std::max(r.worst, gap);
      if (gap > opt.estimator_tolerance)
        r.failures.push_back({i, opt.seed, "estimate " + detail::fmt(p) + " vs frequency " + detail::fmt(freq)});
    }
  });
}

// ---------------------------------------------------------------------------
// Finite differences on random small networks.

struct GradientCase {
  Network net;
  DenseMatrix batch;
  std::vector<std::size_t> labels;
  std::vector<LayerMemory> memories;   // one per MoE layer
  std::vector<AlignmentBatch> align;   // drawn once, held fixed
  SensitivityWeights weights;
  double sigma = kDefaultSigma;
};

inline GradientCase random_gradient_case(SeededRng& rng) {
  GradientCase c;
  NetworkConfig cfg;
  cfg.input_dim = detail::uniform_count(rng, 2, 6);
  cfg.feature_dim = detail::uniform_count(rng, 2, 8);
  cfg.bottleneck = detail::uniform_count(rng, 1, 2);
  cfg.layers = detail::uniform_count(rng, 1, 2);
  const std::size_t experts = detail::uniform_count(rng, 2, 4);
  cfg.k = detail::uniform_count(rng, 1, experts);
  cfg.expert_init_std = 0.5;
  c.net = make_network(cfg, rng);
  for (MoELayer& layer : c.net.layers) {
    while (layer.experts.size() < experts) expand_layer(layer, rng, 0.5);
    layer.router.w_router = gaussian_matrix(cfg.feature_dim, experts, 1.0, rng);
    // Some older experts stay trainable so both kinds of leaves are covered.
    for (AdapterExpert& ex : layer.experts) ex.frozen = ex.frozen && rng.uniform() < 0.5;
  }
  const std::size_t classes = detail::uniform_count(rng, 2, 5);
  expand_classifier(c.net, classes, rng, 0.5);
  const std::size_t b = detail::uniform_count(rng, 2, 5);
  c.batch = gaussian_matrix(b, cfg.input_dim, 1.0, rng);
  for (std::size_t i = 0; i < b; ++i) c.labels.push_back(rng.index(classes));

  const std::size_t old_classes = detail::uniform_count(rng, 1, 4);
  Vector scores;
  for (std::size_t l : c.net.moe_layer_indices()) {
    LayerMemory mem;
    for (std::size_t cls = 0; cls < old_classes; ++cls) {
      Router old{gaussian_matrix(cfg.feature_dim, detail::uniform_count(rng, 1, experts), 1.0, rng)};
      mem.anchors.push_back(compute_anchor(gaussian_matrix(3, cfg.feature_dim, 1.0, rng), old, cls, l));
      mem.stats.push_back(fit_router_input_stats(gaussian_matrix(4, cfg.feature_dim, 1.0, rng), cls, l));
    }
    c.align.push_back(draw_alignment_batch(mem, experts, 2, rng));
    c.memories.push_back(std::move(mem));
    scores.push_back(rng.uniform());
  }
  c.weights = blend_weights(scores, 0.5);
  return c;
}

enum class GradientTarget { kCur, kAlign, kAcr, kTotal };

inline const char* to_string(GradientTarget t) {
  switch (t) {
    case GradientTarget::kCur: return "L_cur";
    case GradientTarget::kAlign: return "L_align";
    case GradientTarget::kAcr: return "L_acr";
    case GradientTarget::kTotal: return "L_total";
  }
  return "?";
}

// ACR mean loads of the unperturbed network, one per MoE layer. The
// finite-difference reference holds them fixed, as the stop-gradient does.
inline Vector detached_mean_loads(const GradientCase& c) {
  Tape tape;
  const NetworkGraph g = build_graph(tape, c.net, c.batch);
  Vector means;
  for (std::size_t l : c.net.moe_layer_indices())
    means.push_back(mean_load(batch_load(g.router_inputs[l], g.router_weights[l], c.net.layers[l].k, c.sigma).value()));
  return means;
}

inline LossBuilder gradient_loss(const GradientCase& c, GradientTarget target, const Vector& means) {
  return [&c, target, means](Tape& tape, std::span<const Var> leaves) -> Var {
    const NetworkGraph g = build_graph(tape, c.net, c.batch, leaves);
    const auto moe = c.net.moe_layer_indices();
    auto cur = [&] { return ad::cross_entropy(g.logits, c.labels); };
    auto align = [&] {
      std::vector<Var> losses;
      for (std::size_t m = 0; m < moe.size(); ++m) losses.push_back(alignment_loss(g.router_weights[moe[m]], c.align[m]));
      return sara_total(c.weights, losses);
    };
    auto acr = [&] {
      Var sum;
      for (std::size_t m = 0; m < moe.size(); ++m) {
        const MoELayer& layer = c.net.layers[moe[m]];
        Var loads = batch_load(g.router_inputs[moe[m]], g.router_weights[moe[m]], layer.k, c.sigma);
        Var term = acr_loss_at_mean(loads, means[m]);
        sum = m == 0 ? term : ad::add(sum, term);
      }
      return ad::scale(sum, 1.0 / static_cast<double>(moe.size()));
    };
    switch (target) {
      case GradientTarget::kCur: return cur();
      case GradientTarget::kAlign: return align();
      case GradientTarget::kAcr: return acr();
      case GradientTarget::kTotal: return ad::add(ad::add(cur(), ad::scale(align(), 0.6)), ad::scale(acr(), 0.4));
    }
    throw InvalidArgument("gradient_loss: unknown target");
  };
}

inline std::vector<DenseMatrix> trainable_values(const Network& net) {
  std::vector<DenseMatrix> values;
  for (const ParamRef& ref : trainable_parameters(net)) values.push_back(resolve(net, ref));
  return values;
}

inline SuiteResult check_gradients(const CheckOptions& opt) {
  return detail::timed_suite("gradient_finite_difference", [&](SuiteResult& r) {
    for (std::size_t i = 0; i < opt.gradient_networks; ++i) {
      SeededRng rng = SeededRng::derive(opt.seed, 300000 + i);
      const GradientCase c = random_gradient_case(rng);
      const Vector means = detached_mean_loads(c);
      const std::vector<DenseMatrix> values = trainable_values(c.net);
      const auto refs = trainable_parameters(c.net);
      for (GradientTarget t : {GradientTarget::kCur, GradientTarget::kAlign, GradientTarget::kAcr,
                               GradientTarget::kTotal}) {
        ++r.cases;
        const GradientCheckReport rep =
            finite_diff_check(gradient_loss(c, t, means), values, opt.gradient_step, opt.gradient_tolerance);
        r.worst = std::max(r.worst, rep.max_error);
        if (rep.passed) continue;
        const auto bad = std::max_element(rep.entries.begin(), rep.entries.end(),
                                          [](const auto& a, const auto& b) { return a.error < b.error; });
        r.failures.push_back({i, opt.seed, std::string(to_string(t)) + " " + describe(refs[bad->param]) + "[" +
                                               std::to_string(bad->row) + "," + std::to_string(bad->col) +
                                               "] analytic " + detail::fmt(bad->analytic) + " numeric " +
                                               detail::fmt(bad->numeric)});
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Sparse gate against dense softmax and a brute-force top-k.

inline std::vector<std::size_t> brute_force_topk(std::span<const double> h, std::size_t k) {
  std::vector<std::size_t> idx(h.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return h[a] > h[b]; });
  idx.resize(std::min(k, idx.size()));
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline SuiteResult check_gating(const CheckOptions& opt) {
  return detail::timed_suite("topk_dense_gating", [&](SuiteResult& r) {
    for (std::size_t i = 0; i < opt.gating_cases; ++i, ++r.cases) {
      SeededRng rng = SeededRng::derive(opt.seed, 400000 + i);
      const std::size_t e = detail::uniform_count(rng, 1, 16);
      const std::size_t d = detail::uniform_count(rng, 1, 8);
      const Router router{gaussian_matrix(d, e, 2.0, rng)};
      Vector z(d);
      for (double& v : z) v = rng.normal();
      // Every fourth case rounds the logits to force ties.
      const bool ties = i % 4 == 3;
      Router used = router;
      if (ties)
        for (double& w : used.w_router.data()) w = std::round(w);
      if (ties) std::fill(z.begin(), z.end(), 1.0);

      const RouteResult dense_route = route_topk(z, used, e);
      const ProbVector dense = softmax(vecmat(z, used.w_router));
      for (std::size_t j = 0; j < e; ++j) {
        const double gap = std::abs(dense_route.gate[j] - dense[j]);
        r.worst = std::max(r.worst, gap);
        if (gap > 1e-12) {
          r.failures.push_back({i, opt.seed, "k=E gate differs from softmax at expert " + std::to_string(j)});
          break;
        }
      }
      const std::size_t k = detail::uniform_count(rng, 1, e);
      const RouteResult sparse = route_topk(z, used, k);
      std::vector<std::size_t> support;
      for (std::size_t j = 0; j < e; ++j)
        if (sparse.gate[j] > 0.0) support.push_back(j);
      if (support != brute_force_topk(sparse.h, k))
        r.failures.push_back({i, opt.seed, "k=" + std::to_string(k) + " support differs from sorted top-k"});
    }
  });
}

// ---------------------------------------------------------------------------
// ACR stop-gradient.

// The tape gradient of acr_loss must equal the closed form with the mean
// held constant, and must differ from the full derivative (mean included).
inline SuiteResult check_acr_stop_gradient(const CheckOptions& opt) {
  return detail::timed_suite("acr_stop_gradient", [&](SuiteResult& r) {
    for (std::size_t i = 0; i < opt.stop_gradient_cases; ++i, ++r.cases) {
      SeededRng rng = SeededRng::derive(opt.seed, 500000 + i);
      const std::size_t e = detail::uniform_count(rng, 2, 8);
      Vector loads(e);
      for (double& v : loads) v = 0.1 + 5.0 * rng.uniform();
      const double m = mean(loads);
      const double eps = kDefaultEpsilon;

      Tape tape;
      Var leaf = tape.parameter(DenseMatrix::row_vector(loads));
      tape.backward(acr_loss(leaf, eps));
      const DenseMatrix grad = tape.grad(leaf);

      // Full derivative (mean not detached) via central differences.
      auto full = [&](const Vector& l) {
        const double mu = mean(l);
        double s = 0.0;
        for (double v : l) s += std::pow(std::max(v - mu, 0.0), 2);
        return s / (static_cast<double>(l.size()) * (mu * mu + eps));
      };
      double mean_path = 0.0;
      std::string problem;
      for (std::size_t j = 0; j < e && problem.empty(); ++j) {
        const double closed = 2.0 * std::max(loads[j] - m, 0.0) / (static_cast<double>(e) * (m * m + eps));
        Vector up = loads, down = loads;
        up[j] += 1e-6;
        down[j] -= 1e-6;
        const double total = (full(up) - full(down)) / 2e-6;
        // Central difference with the mean held at its unperturbed value.
        auto held = [&](const Vector& l) {
          Tape t;
          return acr_loss_at_mean(t.constant(DenseMatrix::row_vector(l)), m, eps).scalar();
        };
        const double frozen = (held(up) - held(down)) / 2e-6;
        const double err = gradient_error(grad.data()[j], closed);
        r.worst = std::max(r.worst, err);
        if (err > 1e-10) problem = "gradient differs from detached closed form at expert " + std::to_string(j);
        else if (gradient_error(grad.data()[j], frozen) > 1e-4)
          problem = "gradient differs from held-mean finite difference at expert " + std::to_string(j);
        mean_path += std::abs(total - grad.data()[j]);
      }
      // Above-mean loads exist for non-constant inputs, so the full
      // derivative must carry a non-zero mean-path term the tape omits.
      if (problem.empty() && !(mean_path > 1e-8)) problem = "no mean-path term: mean is not detached";
      if (!problem.empty()) r.failures.push_back({i, opt.seed, problem});
    }
  });
}

inline std::vector<SuiteResult> run_all_checks(const CheckOptions& opt = {}) {
  return {check_drift_bound(opt), check_smooth_estimator(opt), check_gradients(opt), check_gating(opt),
          check_acr_stop_gradient(opt)};
}

// One line per suite, then one line per failure.
inline std::string format_check_report(const std::vector<SuiteResult>& results) {
  std::ostringstream os;
  for (const SuiteResult& r : results) {
    os << (r.passed() ? "PASS " : "FAIL ") << r.name << " cases=" << r.cases << " failures=" << r.failures.size()
       << " worst=" << detail::fmt(r.worst) << " seconds=" << detail::fmt(r.seconds) << '\n';
  }
  for (const SuiteResult& r : results)
    for (const CheckFailure& f : r.failures)
      os << "  " << r.name << " case " << f.case_index << " seed " << f.seed << ": " << f.detail << '\n';
  return os.str();
}

}  // namespace starmoe

#endif  // STARMOE_CHECKS_HPP_
