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

#include <algorithm>
#include <set>

#include <gtest/gtest.h>

#include "starmoe/checkpoint.hpp"
#include "starmoe/harness.hpp"

namespace starmoe {
namespace {

RunConfig small_config() {
  RunConfig cfg;
  cfg.tasks = 3;
  cfg.classes_per_task = 2;
  cfg.input_dim = 8;
  cfg.feature_dim = 6;
  cfg.bottleneck = 2;
  cfg.epochs = 3;
  cfg.train_per_class = 20;
  cfg.test_per_class = 10;
  cfg.drift_samples_per_class = 8;
  cfg.class_separation = 3.0;
  return cfg;
}

TEST(Stream, Deterministic) {
  const RunConfig cfg = small_config();
  const TaskStream a = generate_stream(cfg);
  const TaskStream b = generate_stream(cfg);
  for (std::size_t t = 0; t < cfg.tasks; ++t) {
    EXPECT_EQ(a.task(t).train.inputs, b.task(t).train.inputs);
    EXPECT_EQ(a.task(t).test.inputs, b.task(t).test.inputs);
    EXPECT_EQ(a.spec(t).class_ids, b.spec(t).class_ids);
  }
  RunConfig other = cfg;
  other.data_seed = 2;
  EXPECT_NE(generate_stream(other).task(0).train.inputs, a.task(0).train.inputs);
}

TEST(Stream, TasksAreDisjoint) {
  const RunConfig cfg = small_config();
  const TaskStream s = generate_stream(cfg);
  std::set<std::size_t> ids;
  for (std::size_t t = 0; t < cfg.tasks; ++t) {
    const TaskSpec& spec = s.spec(t);
    ASSERT_EQ(spec.class_ids.size(), cfg.classes_per_task);
    for (std::size_t c = 0; c < spec.labels.size(); ++c) {
      EXPECT_TRUE(ids.insert(spec.class_ids[c]).second);
      EXPECT_EQ(spec.labels[c], t * cfg.classes_per_task + c);
    }
    EXPECT_EQ(s.task(t).train.size(), cfg.classes_per_task * cfg.train_per_class);
    EXPECT_EQ(s.task(t).test.size(), cfg.classes_per_task * cfg.test_per_class);
    for (std::size_t label : s.task(t).train.labels) {
      EXPECT_GE(label, spec.labels.front());
      EXPECT_LE(label, spec.labels.back());
    }
  }
  EXPECT_EQ(ids.size(), cfg.total_classes());
}

TEST(Stream, ClassMeansRespectSeparation) {
  const RunConfig cfg;
  const TaskStream s = generate_stream(cfg);
  const auto& g = s.generators();
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t j = i + 1; j < g.size(); ++j) {
      double d2 = 0.0;
      for (std::size_t k = 0; k < cfg.input_dim; ++k) d2 += std::pow(g[i].input_mean[k] - g[j].input_mean[k], 2);
      EXPECT_GE(std::sqrt(d2), cfg.class_separation);
    }
}

// A joint linear softmax classifier on the pooled default stream separates
// the classes, so forgetting in the continual runs is not a data artefact.
TEST(Stream, JointLinearClassifierSeparates) {
  const RunConfig cfg;
  const TaskStream s = generate_stream(cfg);
  Dataset train, test;
  for (std::size_t t = 0; t < cfg.tasks; ++t) {
    append(train, s.task(t).train);
    append(test, s.task(t).test);
  }
  DenseMatrix w(cfg.input_dim, cfg.total_classes());
  for (int it = 0; it < 300; ++it) {
    Tape tape;
    Var wv = tape.parameter(w);
    tape.backward(ad::cross_entropy(ad::matmul(tape.constant(train.inputs), wv), train.labels));
    const DenseMatrix g = tape.grad(wv);
    for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] -= 0.5 * g.data()[i];
  }
  const DenseMatrix logits = matmul(test.inputs, w);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < test.size(); ++r) {
    const auto row = logits.row(r);
    correct += static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) == test.labels[r];
  }
  EXPECT_GE(100.0 * static_cast<double>(correct) / static_cast<double>(test.size()), 95.0);
}

Network identity_net() {
  Network net;
  net.stem = DenseMatrix(2, 2, Vector{1, 0, 0, 1});
  net.classifier = DenseMatrix(2, 2, Vector{1, 0, 0, 1});
  return net;
}

TEST(Evaluate, Examples) {
  const Network net = identity_net();
  Dataset ds;
  ds.inputs = DenseMatrix(4, 2, Vector{1, 0, 0, 1, 1, 0, 0, 1});
  ds.labels = {0, 1, 1, 0};
  const Dataset* sets[] = {&ds};
  EXPECT_DOUBLE_EQ(evaluate(net, sets), 50.0);
  ds.labels = {0, 1, 0, 1};
  EXPECT_DOUBLE_EQ(evaluate(net, sets), 100.0);
  // Ties go to the lower class index.
  Dataset tie;
  tie.inputs = DenseMatrix(2, 2, Vector{1, 1, 1, 1});
  tie.labels = {0, 1};
  const Dataset* tie_sets[] = {&tie};
  EXPECT_DOUBLE_EQ(evaluate(net, tie_sets), 50.0);
  Dataset empty;
  empty.inputs = DenseMatrix(0, 2);
  const Dataset* empty_sets[] = {&empty};
  EXPECT_THROW(evaluate(net, empty_sets), InvalidArgument);
}

TEST(Evaluate, PoolsAllSeenTasks) {
  const Network net = identity_net();
  Dataset a, b;
  a.inputs = DenseMatrix(1, 2, Vector{1, 0});
  a.labels = {0};
  b.inputs = DenseMatrix(3, 2, Vector{1, 0, 1, 0, 0, 1});
  b.labels = {1, 1, 1};
  const Dataset* sets[] = {&a, &b};
  EXPECT_DOUBLE_EQ(evaluate(net, sets), 50.0);
}

TEST(ParameterCount, Examples) {
  NetworkConfig cfg;
  cfg.input_dim = 3;
  cfg.feature_dim = 4;
  cfg.bottleneck = 2;
  cfg.layers = 1;
  SeededRng rng(1);
  Network net = make_network(cfg, rng);
  expand_classifier(net, 4, rng);
  // router 4x1, expert 4x2 + 2x4, classifier 4x4
  EXPECT_EQ(count_learnable_parameters(net), 36u);
  net.layers[0].experts[0].frozen = true;
  EXPECT_EQ(count_learnable_parameters(net), 20u);
  net.layers[0].experts[0].frozen = false;
  expand_layer(net.layers[0], rng);
  EXPECT_EQ(count_learnable_parameters(net), 36u - 16u + 16u + 4u);
  expand_classifier(net, 2, rng);
  EXPECT_EQ(count_learnable_parameters(net), 48u);
}

TEST(Learner, FirstTaskUsesClassificationLossOnly) {
  const RunConfig cfg = small_config();
  const TaskStream s = generate_stream(cfg);
  ContinualLearner learner(cfg);
  learner.train_task(s, 0);
  ASSERT_FALSE(learner.trace().empty());
  for (const StepRecord& r : learner.trace()) {
    EXPECT_EQ(r.task, 0u);
    EXPECT_EQ(r.l_sara, 0.0);
    EXPECT_EQ(r.l_acr, 0.0);
    EXPECT_EQ(r.l_total, r.l_cur);
  }
  learner.train_task(s, 1);
  bool any_sara = false;
  for (const StepRecord& r : learner.trace())
    if (r.task == 1) any_sara = any_sara || r.l_sara > 0.0;
  EXPECT_TRUE(any_sara);
}

TEST(Learner, MemoryGrowsPerTask) {
  const RunConfig cfg = small_config();
  const TaskStream s = generate_stream(cfg);
  ContinualLearner learner(cfg);
  for (std::size_t t = 0; t < cfg.tasks; ++t) {
    learner.train_task(s, t);
    ASSERT_EQ(learner.memory().size(), cfg.layers);
    for (const LayerMemory& m : learner.memory()) {
      EXPECT_EQ(m.class_count(), (t + 1) * cfg.classes_per_task);
      EXPECT_EQ(m.stats.size(), m.anchors.size());
      for (std::size_t c = 0; c < m.class_count(); ++c) {
        EXPECT_EQ(m.anchors[c].class_id, c);
        EXPECT_EQ(m.anchors[c].e_at_learning, c / cfg.classes_per_task + 1);
      }
    }
    for (const MoELayer& l : learner.network().layers) EXPECT_EQ(l.experts.size(), t + 1);
    EXPECT_EQ(learner.network().class_count(), (t + 1) * cfg.classes_per_task);
  }
}

TEST(Learner, AnchorsNeverRewritten) {
  const RunConfig cfg = small_config();
  const TaskStream s = generate_stream(cfg);
  ContinualLearner learner(cfg);
  learner.train_task(s, 0);
  const std::vector<LayerMemory> first = learner.memory();
  learner.train_task(s, 1);
  learner.train_task(s, 2);
  for (std::size_t l = 0; l < first.size(); ++l)
    for (std::size_t c = 0; c < first[l].class_count(); ++c) {
      EXPECT_EQ(learner.memory()[l].anchors[c], first[l].anchors[c]);
      EXPECT_EQ(learner.memory()[l].stats[c], first[l].stats[c]);
    }
}

TEST(Learner, TasksMustRunInOrder) {
  const RunConfig cfg = small_config();
  const TaskStream s = generate_stream(cfg);
  ContinualLearner learner(cfg);
  EXPECT_THROW(learner.train_task(s, 1), InvalidState);
  learner.train_task(s, 0);
  EXPECT_THROW(learner.train_task(s, 0), InvalidState);
  EXPECT_THROW(learner.train_task(s, 2), InvalidState);
}

TEST(Learner, OnlyCurrentTaskDataTouched) {
  const RunConfig cfg = small_config();
  const TaskStream s = generate_stream(cfg);
  ContinualLearner learner(cfg);
  for (std::size_t t = 0; t < cfg.tasks; ++t) {
    s.clear_access_log();
    learner.train_task(s, t);
    EXPECT_EQ(s.access_log(), std::vector<std::size_t>{t});
  }
}

TEST(Experiment, FreezingHolds) {
  const RunResult r = run_experiment(small_config());
  EXPECT_TRUE(r.metrics.freezing_ok);
  for (const MoELayer& l : r.network.layers)
    for (std::size_t e = 0; e + 1 < l.experts.size(); ++e) EXPECT_TRUE(l.experts[e].frozen);
  EXPECT_FALSE(r.network.layers[0].experts.back().frozen);
}

TEST(Experiment, SummaryIdentitiesAndDeterminism) {
  const RunConfig cfg = small_config();
  const RunResult a = run_experiment(cfg);
  const RunResult b = run_experiment(cfg);
  ASSERT_EQ(a.metrics.accuracies.size(), cfg.tasks);
  EXPECT_DOUBLE_EQ(a.metrics.average_accuracy, mean(a.metrics.accuracies));
  EXPECT_EQ(a.metrics.last_accuracy, a.metrics.accuracies.back());
  EXPECT_EQ(a.metrics.accuracies, b.metrics.accuracies);
  EXPECT_EQ(a.trace, b.trace);
  EXPECT_EQ(checkpoint_string(a.network), checkpoint_string(b.network));
  EXPECT_EQ(a.access_log, (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_TRUE(a.metrics.bounds_hold());
  EXPECT_EQ(a.metrics.variant, "full");
  EXPECT_EQ(a.metrics.weighting, "sensitivity");
}

TEST(Experiment, DisabledTermsMatchZeroWeights) {
  RunConfig off = small_config();
  off.sara_on = false;
  off.acr_on = false;
  RunConfig zero = small_config();
  zero.lambda_sara = 0.0;
  zero.lambda_acr = 0.0;
  const RunResult a = run_experiment(off);
  const RunResult b = run_experiment(zero);
  ASSERT_EQ(a.trace.size(), b.trace.size());
  for (std::size_t i = 0; i < a.trace.size(); ++i) {
    EXPECT_EQ(a.trace[i].l_cur, b.trace[i].l_cur) << i;
    EXPECT_EQ(a.trace[i].l_total, b.trace[i].l_total) << i;
  }
  EXPECT_EQ(checkpoint_string(a.network), checkpoint_string(b.network));
  EXPECT_EQ(a.metrics.accuracies, b.metrics.accuracies);
  EXPECT_EQ(a.metrics.variant, "baseline");
}

TEST(Experiment, DriftReportsPerTask) {
  const RunResult r = run_experiment(small_config());
  ASSERT_EQ(r.metrics.drift.size(), 3u);
  EXPECT_EQ(r.metrics.drift[0].old_class_count, 0u);
  EXPECT_EQ(r.metrics.drift[0].total_drift, 0.0);
  EXPECT_EQ(r.metrics.drift[1].old_class_count, 2u);
  EXPECT_EQ(r.metrics.drift[2].old_class_count, 4u);
  for (const DriftReport& d : r.metrics.drift) {
    EXPECT_LE(d.total_drift, d.bound + kBoundSlack);
    EXPECT_NEAR(std::accumulate(d.weights.begin(), d.weights.end(), 0.0), 1.0, 1e-12);
  }
}

TEST(RoutingMass, RowsAreDistributions) {
  const RunResult r = run_experiment(small_config());
  ASSERT_EQ(r.routing_mass.rows(), 3u);
  ASSERT_EQ(r.routing_mass.cols(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_GE(r.routing_mass(i, j), 0.0);
      s += r.routing_mass(i, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
  const DenseMatrix m(3, 3, Vector{0.5, 0.3, 0.2, 0.1, 0.6, 0.3, 0.2, 0.2, 0.6});
  EXPECT_DOUBLE_EQ(later_expert_mass(m), 0.3 + 0.2 + 0.3);
}

TEST(RoutingMass, RequiresCompletedTask) {
  const RunConfig cfg = small_config();
  ContinualLearner learner(cfg);
  SeededRng rng(1);
  EXPECT_THROW(old_task_routing_mass(learner.network(), learner.memory(), 2, 4, rng), InvalidArgument);
  const TaskStream s = generate_stream(cfg);
  learner.train_task(s, 0);
  learner.train_task(s, 1);
  const DenseMatrix m = old_task_routing_mass(learner.network(), learner.memory(), 2, 4, rng);
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 2u);
}

TEST(Ablation, RowsAndMedians) {
  const RunConfig cfg = small_config();
  const AblationTable one = run_ablation(cfg, {ablation_variant("full")}, {4});
  ASSERT_EQ(one.rows.size(), 1u);
  EXPECT_EQ(one.rows[0].metrics.accuracies, run_experiment(with_seed(cfg, 4)).metrics.accuracies);

  const std::vector<std::uint64_t> seeds{1, 2, 3};
  const AblationTable t = run_ablation(cfg, standard_variants(), seeds, 4);
  ASSERT_EQ(t.rows.size(), 12u);
  for (const AblationRow& row : t.rows) {
    EXPECT_EQ(row.metrics.variant, row.variant.name);
    EXPECT_EQ(row.metrics.seed, row.seed);
  }
  for (std::size_t v = 0; v < 4; ++v) {
    Vector avg;
    for (std::size_t s = 0; s < 3; ++s) avg.push_back(t.rows[v * 3 + s].metrics.average_accuracy);
    EXPECT_EQ(t.summaries[v].median_average, median(avg));
  }
  const AblationTable serial = run_ablation(cfg, standard_variants(), seeds, 1);
  for (std::size_t i = 0; i < t.rows.size(); ++i)
    EXPECT_EQ(t.rows[i].metrics.accuracies, serial.rows[i].metrics.accuracies);
  EXPECT_THROW(run_ablation(cfg, {}, seeds), InvalidArgument);
  EXPECT_THROW(run_ablation(cfg, standard_variants(), {}), InvalidArgument);
}

TEST(Ablation, VariantFlags) {
  for (const auto& [name, sara, acr] : std::vector<std::tuple<std::string, bool, bool>>{
           {"baseline", false, false}, {"sara_only", true, false}, {"acr_only", false, true}, {"full", true, true}}) {
    const AblationVariant v = ablation_variant(name, Weighting::kUniform);
    EXPECT_EQ(v.sara_on, sara);
    EXPECT_EQ(v.acr_on, acr);
    EXPECT_EQ(v.weighting, Weighting::kUniform);
    EXPECT_EQ(variant_name(v.sara_on, v.acr_on), name);
  }
  EXPECT_THROW(ablation_variant("everything"), InvalidArgument);
}

TEST(Sweep, SingleValueEqualsPlainRun) {
  const RunConfig cfg = small_config();
  const auto rows = run_sweep(cfg, SweepParameter::kGamma, {0.5}, {3});
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].metrics.accuracies, run_experiment(with_seed(cfg, 3)).metrics.accuracies);
}

TEST(Sweep, LargeKGivesDenseGating) {
  const RunConfig cfg = apply_sweep_value(small_config(), SweepParameter::kK, 4);
  const RunResult r = run_experiment(cfg);
  const TaskStream s = generate_stream(cfg);
  const auto [logits, trace] = network_forward(s.task(0).test.inputs.row(0), r.network);
  for (const LayerTrace& lt : trace) {
    EXPECT_EQ(lt.selected.size(), 3u);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(lt.gate[j], lt.dense[j], 1e-12);
  }
  EXPECT_TRUE(r.metrics.bounds_hold());
}

TEST(Sweep, LambdaValuesKeepBound) {
  const std::vector<double> values{0.2, 0.4, 0.6, 1.0, 2.0};
  const auto rows = run_sweep(small_config(), SweepParameter::kLambdaSara, values, {1}, 4);
  ASSERT_EQ(rows.size(), values.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].value, values[i]);
    EXPECT_TRUE(rows[i].metrics.bounds_hold());
    EXPECT_TRUE(rows[i].metrics.freezing_ok);
  }
}

TEST(Sweep, InvalidValues) {
  const RunConfig cfg = small_config();
  EXPECT_THROW(run_sweep(cfg, SweepParameter::kGamma, {1.5}, {1}), InvalidArgument);
  EXPECT_THROW(run_sweep(cfg, SweepParameter::kK, {1.5}, {1}), InvalidArgument);
  EXPECT_THROW(run_sweep(cfg, SweepParameter::kK, {0}, {1}), InvalidArgument);
  EXPECT_THROW(run_sweep(cfg, SweepParameter::kExpandStartLayer, {2}, {1}), InvalidArgument);
  EXPECT_THROW(run_sweep(cfg, SweepParameter::kLambdaAcr, {-1}, {1}), InvalidArgument);
  EXPECT_THROW(run_sweep(cfg, SweepParameter::kGamma, {}, {1}), InvalidArgument);
  try {
    parse_sweep_parameter("beta");
    FAIL();
  } catch (const InvalidArgument& e) {
    for (const auto& n : sweep_parameter_names()) EXPECT_NE(std::string(e.what()).find(n), std::string::npos);
  }
  for (const auto& n : sweep_parameter_names()) EXPECT_EQ(to_string(parse_sweep_parameter(n)), n);
}

TEST(Sweep, NonExpandablePrefix) {
  const RunConfig cfg = apply_sweep_value(small_config(), SweepParameter::kExpandStartLayer, 1);
  const RunResult r = run_experiment(cfg);
  EXPECT_EQ(r.network.layers[0].experts.size(), 1u);
  EXPECT_FALSE(r.network.layers[0].experts[0].frozen);
  EXPECT_EQ(r.network.layers[1].experts.size(), 3u);
  EXPECT_EQ(r.memory.size(), 1u);
  EXPECT_TRUE(r.metrics.freezing_ok);
  EXPECT_TRUE(r.metrics.bounds_hold());
}

TEST(Config, Validation) {
  RunConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.gamma = 1.1;
  EXPECT_THROW(cfg.validate(), InvalidArgument);
  cfg = RunConfig{};
  cfg.expand_start_layer = 2;
  EXPECT_THROW(cfg.validate(), InvalidArgument);
  cfg = RunConfig{};
  cfg.train_per_class = 1;
  EXPECT_THROW(cfg.validate(), InvalidArgument);
}

}  // namespace
}  // namespace starmoe
