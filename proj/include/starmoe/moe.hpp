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

#ifndef STARMOE_MOE_HPP_
#define STARMOE_MOE_HPP_

// Expandable mixture-of-adapters network.
//
//   input -> stem (frozen projection) -> MoE layers -> linear classifier
//
// Each MoE layer adds a gated sum of bottleneck adapters to a frozen
// two-layer perceptron:
//
//   x_out = MLP(x) + sum_{j in K} G_j(z) * ReLU(x W_down_j) W_up_j,   z = x
//
// where K is the top-k set of the router logits h = z W_router and G is the
// softmax restricted to K. A new task appends one expert per expandable layer
// (freezing the older ones) and one router column.

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "starmoe/autodiff.hpp"
#include "starmoe/errors.hpp"
#include "starmoe/rng.hpp"
#include "starmoe/tensor.hpp"

namespace starmoe {

inline constexpr double kExpansionInitStd = 0.01;

struct AdapterExpert {
  DenseMatrix w_down;  // d x r
  DenseMatrix w_up;    // r x d
  bool frozen = false;

  std::size_t feature_dim() const { return w_down.rows(); }
  std::size_t bottleneck() const { return w_down.cols(); }
};

struct Router {
  DenseMatrix w_router;  // d x E_total, column j belongs to expert j

  std::size_t e_total() const { return w_router.cols(); }
};

// Frozen two-layer ReLU perceptron of width 2d.
struct BaseBlock {
  DenseMatrix w1;  // d x 2d
  DenseMatrix w2;  // 2d x d
};

struct MoELayer {
  BaseBlock base;
  std::vector<AdapterExpert> experts;
  Router router;
  std::size_t k = 2;
  // Non-expandable layers keep a single always-trainable adapter and take no
  // part in alignment, capacity regularisation or drift measurement.
  bool expandable = true;

  std::size_t feature_dim() const { return base.w1.rows(); }
  std::size_t active_count() const { return std::min(k, experts.size()); }
};

struct Network {
  DenseMatrix stem;  // input_dim x d
  std::vector<MoELayer> layers;
  DenseMatrix classifier;  // d x classes seen

  std::size_t input_dim() const { return stem.rows(); }
  std::size_t feature_dim() const { return stem.cols(); }
  std::size_t class_count() const { return classifier.cols(); }

  std::vector<std::size_t> moe_layer_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i].expandable) out.push_back(i);
    return out;
  }
};

struct LayerTrace {
  Vector z;                           // router input
  Vector h;                           // routing logits
  ProbVector dense;                   // softmax(h)
  std::vector<std::size_t> selected;  // K, descending by logit
  Vector gate;                        // G, zero outside K
};

using ForwardTrace = std::vector<LayerTrace>;

struct NetworkConfig {
  std::size_t input_dim = 32;
  std::size_t feature_dim = 16;
  std::size_t bottleneck = 4;
  std::size_t layers = 2;
  std::size_t k = 2;
  std::size_t expand_start_layer = 0;  // layers below this index never expand
  double expert_init_std = kExpansionInitStd;
};

// ---------------------------------------------------------------------------
// Value path: one input vector at a time.

inline Vector adapter_forward(std::span<const double> x, const AdapterExpert& expert) {
  detail::require(x.size() == expert.w_down.rows() && expert.w_up.rows() == expert.w_down.cols() &&
                      expert.w_up.cols() == x.size(),
                  "adapter_forward: shape mismatch");
  return vecmat(relu(vecmat(x, expert.w_down)), expert.w_up);
}

struct RouteResult {
  Vector h;
  std::vector<std::size_t> selected;
  Vector gate;
};

inline RouteResult route_topk(std::span<const double> z, const Router& router, std::size_t k) {
  detail::require(k >= 1, "route_topk: k must be >= 1");
  detail::require(router.e_total() >= 1, "route_topk: router has no experts");
  RouteResult out;
  out.h = vecmat(z, router.w_router);
  out.selected = ad::top_k_indices(out.h, k);
  out.gate.assign(out.h.size(), 0.0);
  const double mx = out.h[out.selected.front()];
  double sum = 0.0;
  for (std::size_t j : out.selected) sum += std::exp(out.h[j] - mx);
  for (std::size_t j : out.selected) out.gate[j] = std::exp(out.h[j] - mx) / sum;
  return out;
}

inline Vector base_block_forward(std::span<const double> x, const BaseBlock& base) {
  return vecmat(relu(vecmat(x, base.w1)), base.w2);
}

inline std::pair<Vector, LayerTrace> moe_layer_forward(std::span<const double> x, const MoELayer& layer) {
  detail::require(x.size() == layer.feature_dim(), "moe_layer_forward: input width mismatch");
  detail::require(layer.experts.size() == layer.router.e_total(),
                  "moe_layer_forward: expert count differs from router width");
  RouteResult route = route_topk(x, layer.router, layer.k);
  Vector out = base_block_forward(x, layer.base);
  for (std::size_t j : route.selected) {
    const Vector a = adapter_forward(x, layer.experts[j]);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += route.gate[j] * a[i];
  }
  LayerTrace trace;
  trace.z.assign(x.begin(), x.end());
  trace.dense = softmax(route.h);
  trace.h = std::move(route.h);
  trace.selected = std::move(route.selected);
  trace.gate = std::move(route.gate);
  return {std::move(out), std::move(trace)};
}

inline Vector stem_forward(std::span<const double> input, const Network& net) {
  detail::require(input.size() == net.input_dim(),
                  "network_forward: input dimension " + std::to_string(input.size()) + " vs stem " +
                      std::to_string(net.input_dim()));
  return vecmat(input, net.stem);
}

inline std::pair<Vector, ForwardTrace> network_forward(std::span<const double> input, const Network& net) {
  Vector x = stem_forward(input, net);
  ForwardTrace trace;
  trace.reserve(net.layers.size());
  for (const MoELayer& layer : net.layers) {
    auto [next, entry] = moe_layer_forward(x, layer);
    x = std::move(next);
    trace.push_back(std::move(entry));
  }
  return {vecmat(x, net.classifier), std::move(trace)};
}

// Router inputs seen by every layer for each row of `inputs`, without the
// classifier. Result[l] is rows x d.
inline std::vector<DenseMatrix> router_inputs(const Network& net, const DenseMatrix& inputs) {
  std::vector<DenseMatrix> out(net.layers.size(), DenseMatrix(inputs.rows(), net.feature_dim()));
  for (std::size_t r = 0; r < inputs.rows(); ++r) {
    Vector x = stem_forward(inputs.row(r), net);
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      std::copy(x.begin(), x.end(), out[l].row(r).begin());
      x = moe_layer_forward(x, net.layers[l]).first;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Construction and growth.

inline AdapterExpert make_expert(std::size_t d, std::size_t r, double stddev, SeededRng& rng) {
  AdapterExpert e;
  e.w_down = gaussian_matrix(d, r, stddev, rng);
  e.w_up = gaussian_matrix(r, d, stddev, rng);
  return e;
}

// Stem and base blocks use variance-preserving scales; every layer starts
// with one trainable expert and a one-column router.
inline Network make_network(const NetworkConfig& cfg, SeededRng& rng) {
  detail::require(cfg.input_dim >= 1 && cfg.feature_dim >= 1 && cfg.bottleneck >= 1 && cfg.k >= 1,
                  "make_network: dimensions and k must be >= 1");
  detail::require(cfg.layers == 0 || cfg.expand_start_layer < cfg.layers,
                  "make_network: expand_start_layer must leave at least one MoE layer");
  const std::size_t d = cfg.feature_dim;
  Network net;
  net.stem = gaussian_matrix(cfg.input_dim, d, 1.0 / std::sqrt(static_cast<double>(cfg.input_dim)), rng);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    MoELayer layer;
    layer.base.w1 = gaussian_matrix(d, 2 * d, std::sqrt(2.0 / static_cast<double>(d)), rng);
    layer.base.w2 = gaussian_matrix(2 * d, d, 1.0 / std::sqrt(2.0 * static_cast<double>(d)), rng);
    layer.experts.push_back(make_expert(d, cfg.bottleneck, cfg.expert_init_std, rng));
    layer.router.w_router = gaussian_matrix(d, 1, cfg.expert_init_std, rng);
    layer.k = cfg.k;
    layer.expandable = l >= cfg.expand_start_layer;
    net.layers.push_back(std::move(layer));
  }
  net.classifier = DenseMatrix(d, 0);
  return net;
}

inline void expand_layer(MoELayer& layer, SeededRng& rng, double stddev = kExpansionInitStd) {
  detail::require(!layer.experts.empty(), "expand_layer: layer has no experts");
  for (AdapterExpert& e : layer.experts) e.frozen = true;
  const std::size_t d = layer.feature_dim();
  layer.experts.push_back(make_expert(d, layer.experts.front().bottleneck(), stddev, rng));
  const std::size_t col = layer.router.e_total();
  layer.router.w_router.append_cols(1);
  for (std::size_t i = 0; i < d; ++i) layer.router.w_router(i, col) = stddev * rng.normal();
}

inline void expand_classifier(Network& net, std::size_t new_class_count, SeededRng& rng,
                              double stddev = kExpansionInitStd) {
  detail::require(new_class_count >= 1, "expand_classifier: need at least one new class");
  const std::size_t first = net.classifier.cols();
  net.classifier.append_cols(new_class_count);
  for (std::size_t i = 0; i < net.classifier.rows(); ++i)
    for (std::size_t c = first; c < net.classifier.cols(); ++c) net.classifier(i, c) = stddev * rng.normal();
}

// ---------------------------------------------------------------------------
// Trainable parameter bookkeeping.

enum class ParamKind { kRouter, kExpertDown, kExpertUp, kClassifier };

struct ParamRef {
  ParamKind kind;
  std::size_t layer = 0;
  std::size_t expert = 0;

  friend bool operator==(const ParamRef&, const ParamRef&) = default;
};

// Routers, unfrozen experts and the classifier, in a fixed order.
inline std::vector<ParamRef> trainable_parameters(const Network& net) {
  std::vector<ParamRef> out;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    out.push_back({ParamKind::kRouter, l, 0});
    const auto& experts = net.layers[l].experts;
    for (std::size_t e = 0; e < experts.size(); ++e) {
      if (experts[e].frozen) continue;
      out.push_back({ParamKind::kExpertDown, l, e});
      out.push_back({ParamKind::kExpertUp, l, e});
    }
  }
  if (net.classifier.cols() > 0) out.push_back({ParamKind::kClassifier, 0, 0});
  return out;
}

inline DenseMatrix& resolve(Network& net, const ParamRef& ref) {
  switch (ref.kind) {
    case ParamKind::kRouter: return net.layers.at(ref.layer).router.w_router;
    case ParamKind::kExpertDown: return net.layers.at(ref.layer).experts.at(ref.expert).w_down;
    case ParamKind::kExpertUp: return net.layers.at(ref.layer).experts.at(ref.expert).w_up;
    case ParamKind::kClassifier: return net.classifier;
  }
  throw InvalidArgument("resolve: unknown parameter kind");
}

inline const DenseMatrix& resolve(const Network& net, const ParamRef& ref) {
  return resolve(const_cast<Network&>(net), ref);
}

inline std::string describe(const ParamRef& ref) {
  switch (ref.kind) {
    case ParamKind::kRouter: return "layer" + std::to_string(ref.layer) + ".router";
    case ParamKind::kExpertDown:
      return "layer" + std::to_string(ref.layer) + ".expert" + std::to_string(ref.expert) + ".w_down";
    case ParamKind::kExpertUp:
      return "layer" + std::to_string(ref.layer) + ".expert" + std::to_string(ref.expert) + ".w_up";
    case ParamKind::kClassifier: return "classifier";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Graph path: a batch forward recorded on a tape for training.

struct NetworkGraph {
  std::vector<ParamRef> params;   // trainable_parameters(net)
  std::vector<Var> param_vars;    // aligned with params
  std::vector<Var> router_inputs; // per layer, B x d
  std::vector<Var> router_logits; // per layer, B x E
  std::vector<Var> router_weights;// per layer, d x E
  Var logits;                     // B x classes

  Var param(const ParamRef& ref) const {
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i] == ref) return param_vars[i];
    throw InvalidArgument("NetworkGraph: parameter is not trainable: " + describe(ref));
  }
};

// Records the forward pass of `batch` (B x input_dim). Trainable matrices
// become tape parameters, frozen ones constants. Experts whose gate column
// is zero for the whole batch are skipped since they contribute nothing.
// `leaves`, when given, replaces the trainable matrices (same order as
// trainable_parameters) so callers can own the parameter nodes.
inline NetworkGraph build_graph(Tape& tape, const Network& net, const DenseMatrix& batch,
                                std::span<const Var> leaves = {}) {
  detail::require(batch.cols() == net.input_dim(), "build_graph: input dimension mismatch");
  NetworkGraph g;
  g.params = trainable_parameters(net);
  if (leaves.empty()) {
    for (const ParamRef& ref : g.params) g.param_vars.push_back(tape.parameter(resolve(net, ref)));
  } else {
    detail::require(leaves.size() == g.params.size(), "build_graph: one leaf per trainable parameter required");
    g.param_vars.assign(leaves.begin(), leaves.end());
  }
  auto lookup = [&](const ParamRef& ref, const DenseMatrix& value) {
    for (std::size_t i = 0; i < g.params.size(); ++i)
      if (g.params[i] == ref) return g.param_vars[i];
    return tape.constant(value);
  };

  Var x = tape.constant(matmul(batch, net.stem));
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const MoELayer& layer = net.layers[l];
    Var w_router = lookup({ParamKind::kRouter, l, 0}, layer.router.w_router);
    Var h = ad::matmul(x, w_router);
    Var gates = ad::topk_gate(h, layer.k);
    Var hidden = ad::relu(ad::matmul(x, tape.constant(layer.base.w1)));
    Var out = ad::matmul(hidden, tape.constant(layer.base.w2));
    const DenseMatrix& gv = gates.value();
    for (std::size_t e = 0; e < layer.experts.size(); ++e) {
      bool used = false;
      for (std::size_t r = 0; r < gv.rows() && !used; ++r) used = gv(r, e) > 0.0;
      if (!used) continue;
      const AdapterExpert& ex = layer.experts[e];
      Var down = lookup({ParamKind::kExpertDown, l, e}, ex.w_down);
      Var up = lookup({ParamKind::kExpertUp, l, e}, ex.w_up);
      Var a = ad::matmul(ad::relu(ad::matmul(x, down)), up);
      out = ad::add(out, ad::scale_rows_by_column(a, gates, e));
    }
    g.router_inputs.push_back(x);
    g.router_logits.push_back(h);
    g.router_weights.push_back(w_router);
    x = out;
  }
  g.logits = ad::matmul(x, lookup({ParamKind::kClassifier, 0, 0}, net.classifier));
  return g;
}

}  // namespace starmoe

#endif  // STARMOE_MOE_HPP_
