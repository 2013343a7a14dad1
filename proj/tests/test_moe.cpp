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

#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "starmoe/checkpoint.hpp"
#include "starmoe/moe.hpp"

namespace starmoe {
namespace {

AdapterExpert expert(Vector down, Vector up, std::size_t d, std::size_t r) {
  AdapterExpert e;
  e.w_down = DenseMatrix(d, r, std::move(down));
  e.w_up = DenseMatrix(r, d, std::move(up));
  return e;
}

// Identity-free base block that maps everything to zero.
BaseBlock zero_base(std::size_t d) { return BaseBlock{DenseMatrix(d, 2 * d), DenseMatrix(2 * d, d)}; }

TEST(AdapterForward, ZeroDownProjection) {
  const AdapterExpert e = expert(Vector(4, 0.0), Vector{1, 2, 3, 4}, 2, 2);
  EXPECT_EQ(adapter_forward(Vector{3, -1}, e), (Vector{0, 0}));
}

TEST(AdapterForward, NegativePreActivation) {
  const AdapterExpert e = expert(Vector{-1, -2}, Vector{1, 1}, 2, 1);
  EXPECT_EQ(adapter_forward(Vector{1, 2}, e), (Vector{0, 0}));
}

TEST(AdapterForward, HandValue) {
  const AdapterExpert e = expert(Vector{1, 1}, Vector{0.5, -0.5}, 2, 1);
  EXPECT_EQ(adapter_forward(Vector{1, 2}, e), (Vector{1.5, -1.5}));
}

TEST(AdapterForward, ShapeMismatch) {
  const AdapterExpert e = expert(Vector{1, 1}, Vector{0.5, -0.5}, 2, 1);
  EXPECT_THROW(adapter_forward(Vector{1, 2, 3}, e), InvalidArgument);
}

TEST(RouteTopk, TwoOfThree) {
  const Router router{DenseMatrix(1, 3, Vector{2.0, 1.0, 0.5})};
  const RouteResult r = route_topk(Vector{1.0}, router, 2);
  EXPECT_EQ(r.selected, (std::vector<std::size_t>{0, 1}));
  EXPECT_NEAR(r.gate[0], 0.7310585786300049, 1e-15);
  EXPECT_NEAR(r.gate[1], 0.2689414213699951, 1e-15);
  EXPECT_EQ(r.gate[2], 0.0);
}

TEST(RouteTopk, FullSelectionIsDense) {
  const Router router{DenseMatrix(1, 3, Vector{2.0, 1.0, 0.5})};
  for (std::size_t k : {3u, 4u, 10u}) {
    const RouteResult r = route_topk(Vector{1.0}, router, k);
    const ProbVector p = softmax(r.h);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(r.gate[j], p[j], 1e-15);
  }
}

TEST(RouteTopk, TieGoesToLowerIndex) {
  const Router router{DenseMatrix(1, 3, Vector{1.0, 1.0, 0.0})};
  const RouteResult r = route_topk(Vector{1.0}, router, 1);
  EXPECT_EQ(r.selected, (std::vector<std::size_t>{0}));
  EXPECT_EQ(r.gate, (Vector{1, 0, 0}));
}

TEST(RouteTopk, RejectsZeroK) {
  const Router router{DenseMatrix(1, 2, Vector{1.0, 0.0})};
  EXPECT_THROW(route_topk(Vector{1.0}, router, 0), InvalidArgument);
}

MoELayer hand_layer() {
  // d = 2, r = 1, two experts, zero base block.
  MoELayer layer;
  layer.base = zero_base(2);
  layer.experts.push_back(expert(Vector{1, 0}, Vector{1, 2}, 2, 1));
  layer.experts.push_back(expert(Vector{0, 1}, Vector{-1, 1}, 2, 1));
  layer.router.w_router = DenseMatrix(2, 2, Vector{1, 0, 0, 1});
  layer.k = 2;
  return layer;
}

TEST(MoELayerForward, ZeroExpertsGiveBaseOutput) {
  MoELayer layer = hand_layer();
  SeededRng rng(1);
  layer.base = BaseBlock{gaussian_matrix(2, 4, 1.0, rng), gaussian_matrix(4, 2, 1.0, rng)};
  for (auto& e : layer.experts) {
    e.w_down = DenseMatrix(2, 1);
    e.w_up = DenseMatrix(1, 2);
  }
  const Vector x{0.3, -0.8};
  EXPECT_EQ(moe_layer_forward(x, layer).first, base_block_forward(x, layer.base));
}

TEST(MoELayerForward, SingleExpertHasUnitGate) {
  MoELayer layer = hand_layer();
  layer.experts.pop_back();
  layer.router.w_router = DenseMatrix(2, 1, Vector{0.7, -3.0});
  layer.k = 1;
  const Vector x{2.0, 1.0};
  const auto [out, trace] = moe_layer_forward(x, layer);
  EXPECT_EQ(trace.gate, (Vector{1.0}));
  EXPECT_EQ(out, adapter_forward(x, layer.experts[0]));
}

TEST(MoELayerForward, HandEvaluation) {
  // x = [2, 1]: h = [2, 1]; G = softmax([2, 1]).
  // A_0(x) = relu(2) * [1, 2] = [2, 4]; A_1(x) = relu(1) * [-1, 1] = [-1, 1].
  const MoELayer layer = hand_layer();
  const auto [out, trace] = moe_layer_forward(Vector{2.0, 1.0}, layer);
  const double g0 = std::exp(2.0) / (std::exp(2.0) + std::exp(1.0));
  const double g1 = 1.0 - g0;
  EXPECT_NEAR(out[0], g0 * 2.0 + g1 * -1.0, 1e-15);
  EXPECT_NEAR(out[1], g0 * 4.0 + g1 * 1.0, 1e-15);
  EXPECT_EQ(trace.z, (Vector{2.0, 1.0}));
  EXPECT_EQ(trace.h, (Vector{2.0, 1.0}));
  EXPECT_EQ(trace.selected, (std::vector<std::size_t>{0, 1}));
}

TEST(MoELayerForward, BaseBlockHandEvaluation) {
  MoELayer layer = hand_layer();
  layer.k = 1;
  // w1 picks x0 and -x0; w2 sums them back into coordinate 1.
  layer.base.w1 = DenseMatrix(2, 4, Vector{1, -1, 0, 0, 0, 0, 0, 0});
  layer.base.w2 = DenseMatrix(4, 2, Vector{0, 1, 0, 1, 0, 0, 0, 0});
  const Vector out = moe_layer_forward(Vector{-3.0, 5.0}, layer).first;
  // MLP: relu([-3, 3, 0, 0]) -> [0, 3, 0, 0] -> [0, 3]. Router h = [-3, 5]
  // selects expert 1 only: relu(5) * [-1, 1] = [-5, 5].
  EXPECT_EQ(out, (Vector{-5.0, 8.0}));
}

Network small_network(std::size_t layers, std::uint64_t seed = 3) {
  NetworkConfig cfg;
  cfg.input_dim = 5;
  cfg.feature_dim = 4;
  cfg.bottleneck = 2;
  cfg.layers = layers;
  cfg.k = 2;
  SeededRng rng(seed);
  Network net = make_network(cfg, rng);
  expand_classifier(net, 3, rng, 0.5);
  return net;
}

TEST(NetworkForward, ZeroLayers) {
  const Network net = small_network(0);
  const Vector x{1, 2, 3, 4, 5};
  const auto [logits, trace] = network_forward(x, net);
  EXPECT_EQ(logits, vecmat(vecmat(x, net.stem), net.classifier));
  EXPECT_TRUE(trace.empty());
}

TEST(NetworkForward, TraceAndDeterminism) {
  const Network net = small_network(3);
  const Vector x{1, -2, 0.5, 4, 0};
  const auto a = network_forward(x, net);
  const auto b = network_forward(x, net);
  EXPECT_EQ(a.second.size(), 3u);
  EXPECT_EQ(a.first, b.first);
  EXPECT_THROW(network_forward(Vector{1, 2}, net), InvalidArgument);
}

TEST(NetworkForward, TraceInvariants) {
  Network net = small_network(2);
  SeededRng rng(4);
  for (int t = 0; t < 3; ++t)
    for (auto& l : net.layers) expand_layer(l, rng, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    Vector x(5);
    for (double& v : x) v = 3.0 * rng.normal();
    for (const LayerTrace& tr : network_forward(x, net).second) {
      double sum = 0.0;
      for (std::size_t j = 0; j < tr.gate.size(); ++j) {
        const bool in_k = std::find(tr.selected.begin(), tr.selected.end(), j) != tr.selected.end();
        if (!in_k) { EXPECT_EQ(tr.gate[j], 0.0); }
        if (tr.gate[j] > 0.0) { EXPECT_TRUE(in_k); }
        sum += tr.gate[j];
      }
      EXPECT_NEAR(sum, 1.0, 1e-9);
      EXPECT_EQ(tr.dense, softmax(tr.h));
      // argmax of G is argmax of P restricted to K
      const auto g_arg = std::max_element(tr.gate.begin(), tr.gate.end()) - tr.gate.begin();
      std::size_t p_arg = tr.selected.front();
      for (std::size_t j : tr.selected)
        if (tr.dense[j] > tr.dense[p_arg]) p_arg = j;
      EXPECT_EQ(static_cast<std::size_t>(g_arg), p_arg);
    }
  }
}

TEST(ExpandLayer, GrowsFreezesAndKeepsColumns) {
  Network net = small_network(1);
  MoELayer& layer = net.layers[0];
  SeededRng rng(5);
  const DenseMatrix before = layer.router.w_router;
  const Vector z{0.1, 0.2, -0.3, 0.4};
  const Vector h_before = vecmat(z, layer.router.w_router);
  expand_layer(layer, rng);
  EXPECT_EQ(layer.router.e_total(), 2u);
  EXPECT_EQ(layer.experts.size(), 2u);
  EXPECT_TRUE(layer.experts[0].frozen);
  EXPECT_FALSE(layer.experts[1].frozen);
  for (std::size_t i = 0; i < before.rows(); ++i) EXPECT_EQ(layer.router.w_router(i, 0), before(i, 0));
  const Vector h_after = vecmat(z, layer.router.w_router);
  EXPECT_EQ(h_after[0], h_before[0]);
  expand_layer(layer, rng);
  EXPECT_EQ(layer.router.e_total(), 3u);
  EXPECT_TRUE(layer.experts[1].frozen);
}

TEST(ExpandClassifier, GrowsAndKeepsColumns) {
  Network net = small_network(1);
  SeededRng rng(6);
  const DenseMatrix before = net.classifier;
  expand_classifier(net, 4, rng);
  EXPECT_EQ(net.classifier.cols(), before.cols() + 4);
  for (std::size_t i = 0; i < before.rows(); ++i)
    for (std::size_t c = 0; c < before.cols(); ++c) EXPECT_EQ(net.classifier(i, c), before(i, c));
  EXPECT_THROW(expand_classifier(net, 0, rng), InvalidArgument);
}

TEST(ExpandClassifier, NewLogitsAreSmall) {
  Network net = small_network(1);
  SeededRng rng(7);
  const std::size_t first = net.classifier.cols();
  expand_classifier(net, 2, rng, kExpansionInitStd);
  for (int trial = 0; trial < 50; ++trial) {
    Vector x(5);
    for (double& v : x) v = rng.normal();
    Vector feat = stem_forward(x, net);
    for (const auto& l : net.layers) feat = moe_layer_forward(feat, l).first;
    const double norm = std::sqrt(std::inner_product(feat.begin(), feat.end(), feat.begin(), 0.0));
    const Vector logits = network_forward(x, net).first;
    // |w.x| <= ||w|| ||x||; each coordinate of w is an N(0, s^2) draw, so
    // ||w|| stays below s * sqrt(d) * 3 with overwhelming probability.
    for (std::size_t c = first; c < logits.size(); ++c)
      EXPECT_LE(std::abs(logits[c]), 3.0 * kExpansionInitStd * std::sqrt(4.0) * norm);
  }
}

TEST(TrainableParameters, TaskOneAndAfterExpansion) {
  Network net = small_network(2);
  auto refs = trainable_parameters(net);
  // Per layer: router + expert down/up; then the classifier.
  ASSERT_EQ(refs.size(), 2u * 3u + 1u);
  EXPECT_EQ(refs.back().kind, ParamKind::kClassifier);
  SeededRng rng(8);
  for (auto& l : net.layers) expand_layer(l, rng);
  refs = trainable_parameters(net);
  ASSERT_EQ(refs.size(), 2u * 3u + 1u);
  for (const auto& ref : refs)
    if (ref.kind == ParamKind::kExpertDown || ref.kind == ParamKind::kExpertUp) { EXPECT_EQ(ref.expert, 1u); }
}

TEST(TrainableParameters, StepLeavesExcludedBitsUnchanged) {
  Network net = small_network(2);
  SeededRng rng(9);
  for (auto& l : net.layers) {
    l.experts[0].w_down = gaussian_matrix(4, 2, 1.0, rng);
    l.experts[0].w_up = gaussian_matrix(2, 4, 1.0, rng);
    expand_layer(l, rng, 0.5);
  }
  const FrozenHashes before = frozen_hashes(net);
  const DenseMatrix batch = gaussian_matrix(6, 5, 1.0, rng);
  const std::vector<std::size_t> labels{0, 1, 2, 0, 1, 2};
  Tape tape;
  const NetworkGraph g = build_graph(tape, net, batch);
  tape.backward(ad::cross_entropy(g.logits, labels));
  for (std::size_t i = 0; i < g.params.size(); ++i) {
    DenseMatrix& w = resolve(net, g.params[i]);
    const DenseMatrix grad = tape.grad(g.param_vars[i]);
    for (std::size_t j = 0; j < w.size(); ++j) w.data()[j] -= 0.1 * grad.data()[j];
  }
  EXPECT_EQ(frozen_hashes(net), before);
}

TEST(BuildGraph, MatchesValuePath) {
  Network net = small_network(2);
  SeededRng rng(10);
  for (auto& l : net.layers) {
    expand_layer(l, rng, 0.8);
    expand_layer(l, rng, 0.8);
  }
  const DenseMatrix batch = gaussian_matrix(7, 5, 1.0, rng);
  Tape tape;
  const NetworkGraph g = build_graph(tape, net, batch);
  const std::vector<DenseMatrix> z = router_inputs(net, batch);
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    const Vector logits = network_forward(batch.row(r), net).first;
    for (std::size_t c = 0; c < logits.size(); ++c) EXPECT_NEAR(g.logits.value()(r, c), logits[c], 1e-12);
    for (std::size_t l = 0; l < net.layers.size(); ++l)
      for (std::size_t i = 0; i < z[l].cols(); ++i)
        EXPECT_NEAR(g.router_inputs[l].value()(r, i), z[l](r, i), 1e-12);
  }
}

TEST(MakeNetwork, NonExpandablePrefix) {
  NetworkConfig cfg;
  cfg.layers = 3;
  cfg.expand_start_layer = 1;
  SeededRng rng(11);
  const Network net = make_network(cfg, rng);
  EXPECT_FALSE(net.layers[0].expandable);
  EXPECT_EQ(net.moe_layer_indices(), (std::vector<std::size_t>{1, 2}));
  cfg.expand_start_layer = 3;
  EXPECT_THROW(make_network(cfg, rng), InvalidArgument);
}

}  // namespace
}  // namespace starmoe
