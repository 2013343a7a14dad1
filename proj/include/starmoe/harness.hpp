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

#ifndef STARMOE_HARNESS_HPP_
#define STARMOE_HARNESS_HPP_

// Class-incremental experiment engine on a synthetic stream.
//
// Each class is a Gaussian cluster in input space. Classes are shuffled by
// the data seed and split into tasks; the learner sees one task's training
// set at a time and is evaluated on the pooled test sets of every class seen
// so far.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "starmoe/autodiff.hpp"
#include "starmoe/checkpoint.hpp"
#include "starmoe/errors.hpp"
#include "starmoe/moe.hpp"
#include "starmoe/rng.hpp"
#include "starmoe/star.hpp"
#include "starmoe/tensor.hpp"

namespace starmoe {

enum class Weighting { kSensitivity, kUniform };
enum class OptimizerKind { kSgd, kAdam };

inline std::string to_string(Weighting w) { return w == Weighting::kSensitivity ? "sensitivity" : "uniform"; }
inline std::string to_string(OptimizerKind o) { return o == OptimizerKind::kSgd ? "sgd" : "adam"; }

struct RunConfig {
  std::size_t tasks = 5;
  std::size_t classes_per_task = 4;
  std::size_t input_dim = 32;
  std::size_t feature_dim = 16;
  std::size_t bottleneck = 4;
  std::size_t layers = 2;
  std::size_t k = 2;
  double sigma = kDefaultSigma;
  double epsilon = kDefaultEpsilon;
  double lambda_sara = 0.6;
  double lambda_acr = 0.4;
  double gamma = 0.5;
  double learning_rate = 0.005;
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  std::size_t samples_per_class = 1;
  std::size_t drift_samples_per_class = 32;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 50;
  std::uint64_t data_seed = 1;
  std::uint64_t init_seed = 1;
  bool sara_on = true;
  bool acr_on = true;
  Weighting weighting = Weighting::kSensitivity;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  std::size_t expand_start_layer = 0;
  bool mask_old_logits = true;
  double class_separation = 4.0;  // minimum pairwise distance of class means
  double mean_scale = 1.0;        // per-coordinate std of class means
  double input_noise = 1.0;       // per-coordinate std around a class mean
  double init_std = kExpansionInitStd;

  std::size_t total_classes() const { return tasks * classes_per_task; }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v < 1) throw InvalidArgument(std::string(name) + " must be >= 1");
    };
    positive(tasks, "tasks");
    positive(classes_per_task, "classes_per_task");
    positive(input_dim, "input_dim");
    positive(feature_dim, "feature_dim");
    positive(bottleneck, "bottleneck");
    positive(layers, "layers");
    positive(k, "k");
    positive(epochs, "epochs");
    positive(batch_size, "batch_size");
    positive(samples_per_class, "samples_per_class");
    positive(drift_samples_per_class, "drift_samples_per_class");
    if (train_per_class < 2) throw InvalidArgument("train_per_class must be >= 2");
    positive(test_per_class, "test_per_class");
    if (!(sigma > 0.0)) throw InvalidArgument("sigma must be positive");
    if (!(epsilon > 0.0)) throw InvalidArgument("epsilon must be positive");
    if (!(lambda_sara >= 0.0)) throw InvalidArgument("lambda_sara must be >= 0");
    if (!(lambda_acr >= 0.0)) throw InvalidArgument("lambda_acr must be >= 0");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw InvalidArgument("gamma must lie in [0, 1]");
    if (!(learning_rate > 0.0)) throw InvalidArgument("learning_rate must be positive");
    if (expand_start_layer >= layers) throw InvalidArgument("expand_start_layer must be < layers");
    if (!(class_separation >= 0.0)) throw InvalidArgument("class_separation must be >= 0");
    if (!(mean_scale > 0.0)) throw InvalidArgument("mean_scale must be positive");
    if (!(input_noise >= 0.0)) throw InvalidArgument("input_noise must be >= 0");
    if (!(init_std > 0.0)) throw InvalidArgument("init_std must be positive");
  }

  NetworkConfig network_config() const {
    NetworkConfig n;
    n.input_dim = input_dim;
    n.feature_dim = feature_dim;
    n.bottleneck = bottleneck;
    n.layers = layers;
    n.k = k;
    n.expand_start_layer = expand_start_layer;
    n.expert_init_std = init_std;
    return n;
  }
};

// Variant label from the method toggles.
inline std::string variant_name(bool sara_on, bool acr_on) {
  if (sara_on && acr_on) return "full";
  if (sara_on) return "sara_only";
  if (acr_on) return "acr_only";
  return "baseline";
}

// ---------------------------------------------------------------------------
// Synthetic stream.

struct ClassGenerator {
  std::size_t class_id = 0;
  Vector input_mean;
  double input_scale = 1.0;
  std::uint64_t seed_offset = 0;
};

struct Dataset {
  DenseMatrix inputs;
  std::vector<std::size_t> labels;  // classifier column of each row

  std::size_t size() const { return labels.size(); }
};

struct TaskSpec {
  std::size_t task_index = 0;
  std::vector<std::size_t> class_ids;  // generator ids
  std::vector<std::size_t> labels;     // classifier columns, same order
  std::size_t train_count = 0;         // per class
  std::size_t test_count = 0;          // per class
};

struct TaskData {
  TaskSpec spec;
  Dataset train;
  Dataset test;
};

class TaskStream {
 public:
  TaskStream(std::vector<ClassGenerator> generators, std::vector<TaskData> tasks)
      : generators_(std::move(generators)), tasks_(std::move(tasks)) {}

  std::size_t task_count() const { return tasks_.size(); }
  const TaskSpec& spec(std::size_t t) const { return tasks_.at(t).spec; }
  const std::vector<ClassGenerator>& generators() const { return generators_; }

  // Training data; every call is logged.
  const Dataset& train(std::size_t t) const {
    std::lock_guard lock(log_mutex_);
    access_log_.push_back(t);
    return tasks_.at(t).train;
  }

  const Dataset& test(std::size_t t) const { return tasks_.at(t).test; }
  const TaskData& task(std::size_t t) const { return tasks_.at(t); }

  std::vector<std::size_t> access_log() const {
    std::lock_guard lock(log_mutex_);
    return access_log_;
  }
  void clear_access_log() const {
    std::lock_guard lock(log_mutex_);
    access_log_.clear();
  }

 private:
  std::vector<ClassGenerator> generators_;
  std::vector<TaskData> tasks_;
  mutable std::mutex log_mutex_;
  mutable std::vector<std::size_t> access_log_;
};

inline std::vector<ClassGenerator> make_class_generators(const RunConfig& cfg) {
  SeededRng rng = SeededRng::derive(cfg.data_seed, 1);
  std::vector<ClassGenerator> gens;
  const std::size_t n = cfg.total_classes();
  constexpr int kMaxAttempts = 10000;
  for (std::size_t c = 0; c < n; ++c) {
    ClassGenerator g;
    g.class_id = c;
    g.input_scale = cfg.input_noise;
    g.seed_offset = 100 + c;
    bool placed = false;
    for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
      g.input_mean.assign(cfg.input_dim, 0.0);
      for (double& v : g.input_mean) v = cfg.mean_scale * rng.normal();
      placed = std::all_of(gens.begin(), gens.end(), [&](const ClassGenerator& o) {
        double d2 = 0.0;
        for (std::size_t i = 0; i < cfg.input_dim; ++i) d2 += std::pow(g.input_mean[i] - o.input_mean[i], 2);
        return std::sqrt(d2) >= cfg.class_separation;
      });
    }
    if (!placed) throw InvalidArgument("generate_stream: cannot place class means at the requested separation");
    gens.push_back(std::move(g));
  }
  return gens;
}

inline Dataset draw_class_samples(const ClassGenerator& g, std::size_t label, std::size_t count, SeededRng& rng) {
  Dataset d;
  d.inputs = DenseMatrix(count, g.input_mean.size());
  for (std::size_t r = 0; r < count; ++r)
    for (std::size_t i = 0; i < g.input_mean.size(); ++i) d.inputs(r, i) = g.input_mean[i] + g.input_scale * rng.normal();
  d.labels.assign(count, label);
  return d;
}

inline void append(Dataset& dst, const Dataset& src) {
  if (dst.inputs.cols() == 0) dst.inputs = DenseMatrix(0, src.inputs.cols());
  std::vector<double> data = std::move(dst.inputs.data());
  data.insert(data.end(), src.inputs.data().begin(), src.inputs.data().end());
  const std::size_t cols = src.inputs.cols();
  const std::size_t rows = data.size() / cols;
  dst.inputs = DenseMatrix(rows, cols, std::move(data));
  dst.labels.insert(dst.labels.end(), src.labels.begin(), src.labels.end());
}

inline TaskStream generate_stream(const RunConfig& cfg) {
  cfg.validate();
  std::vector<ClassGenerator> gens = make_class_generators(cfg);
  std::vector<std::size_t> order(gens.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  SeededRng shuffle_rng = SeededRng::derive(cfg.data_seed, 2);
  shuffle_rng.shuffle(order);

  std::vector<TaskData> tasks;
  for (std::size_t t = 0; t < cfg.tasks; ++t) {
    TaskData td;
    td.spec.task_index = t;
    td.spec.train_count = cfg.train_per_class;
    td.spec.test_count = cfg.test_per_class;
    for (std::size_t c = 0; c < cfg.classes_per_task; ++c) {
      const std::size_t label = t * cfg.classes_per_task + c;
      const ClassGenerator& g = gens[order[label]];
      td.spec.class_ids.push_back(g.class_id);
      td.spec.labels.push_back(label);
      SeededRng rng = SeededRng::derive(cfg.data_seed, g.seed_offset);
      append(td.train, draw_class_samples(g, label, cfg.train_per_class, rng));
      append(td.test, draw_class_samples(g, label, cfg.test_per_class, rng));
    }
    tasks.push_back(std::move(td));
  }
  return TaskStream(std::move(gens), std::move(tasks));
}

// ---------------------------------------------------------------------------
// Evaluation.

// Argmax (ties to the lower class index) over the pooled test sets.
inline double evaluate(const Network& net, std::span<const Dataset* const> test_sets) {
  std::size_t total = 0;
  std::size_t correct = 0;
  for (const Dataset* ds : test_sets) {
    for (std::size_t r = 0; r < ds->size(); ++r) {
      const Vector logits = network_forward(ds->inputs.row(r), net).first;
      detail::require(!logits.empty(), "evaluate: network has no classes");
      const auto best = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
      correct += best == ds->labels[r] ? 1 : 0;
      ++total;
    }
  }
  if (total == 0) throw InvalidArgument("evaluate: empty test set");
  return 100.0 * static_cast<double>(correct) / static_cast<double>(total);
}

inline std::size_t count_learnable_parameters(const Network& net) {
  std::size_t n = 0;
  for (const ParamRef& ref : trainable_parameters(net)) n += resolve(net, ref).size();
  return n;
}

// ---------------------------------------------------------------------------
// Training.

struct StepRecord {
  std::size_t task = 0;
  std::size_t epoch = 0;
  std::size_t step = 0;
  double l_cur = 0.0;
  double l_sara = 0.0;
  double l_acr = 0.0;
  double l_total = 0.0;

  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

struct TaskOutcome {
  SensitivityWeights weights;
  DriftReport drift;
  bool freezing_ok = true;
};

// Owns the network, the per-layer class memory and the RNG streams of one
// run, and executes tasks strictly in order.
class ContinualLearner {
 public:
  explicit ContinualLearner(RunConfig cfg)
      : cfg_(std::move(cfg)),
        init_rng_(SeededRng::derive(cfg_.init_seed, 10)),
        sara_rng_(SeededRng::derive(cfg_.init_seed, 11)) {
    cfg_.validate();
    net_ = make_network(cfg_.network_config(), init_rng_);
    memory_.resize(net_.moe_layer_indices().size());
  }

  const RunConfig& config() const { return cfg_; }
  const Network& network() const { return net_; }
  Network& mutable_network() { return net_; }
  const std::vector<LayerMemory>& memory() const { return memory_; }
  const std::vector<StepRecord>& trace() const { return trace_; }
  std::size_t tasks_done() const { return tasks_done_; }

  TaskOutcome train_task(const TaskStream& stream, std::size_t t) {
    if (t != tasks_done_)
      throw InvalidState("train_task: expected task " + std::to_string(tasks_done_) + ", got " + std::to_string(t));
    const Dataset& data = stream.train(t);
    const TaskSpec& spec = stream.spec(t);
    const FrozenHashes before = frozen_hashes(net_);

    if (t > 0)
      for (MoELayer& layer : net_.layers)
        if (layer.expandable) expand_layer(layer, init_rng_, cfg_.init_std);
    expand_classifier(net_, spec.labels.size(), init_rng_, cfg_.init_std);

    const ColumnRange columns =
        cfg_.mask_old_logits ? ColumnRange{spec.labels.front(), spec.labels.back() + 1} : ColumnRange{0, 0};
    SeededRng order_rng = SeededRng::derive(cfg_.data_seed, 1000 + t);
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    order_rng.shuffle(order);

    TaskOutcome outcome;
    const std::size_t moe_layers = memory_.size();
    {
      const auto [inputs, labels] = gather(data, order, 0);
      if (cfg_.weighting == Weighting::kSensitivity)
        outcome.weights = blend_weights(sensitivity_scores(net_, inputs, labels, columns), cfg_.gamma);
      else
        outcome.weights = uniform_weights(moe_layers);
    }

    reset_optimizer();
    for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
      if (epoch > 0) order_rng.shuffle(order);
      std::size_t step = 0;
      for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size, ++step) {
        const auto [inputs, labels] = gather(data, order, start);
        train_step(t, epoch, step, inputs, labels, columns, outcome.weights);
      }
    }

    std::vector<const Router*> routers;
    for (std::size_t l : net_.moe_layer_indices()) routers.push_back(&net_.layers[l].router);
    SeededRng drift_rng = SeededRng::derive(cfg_.init_seed, 5000 + t);
    outcome.drift = routing_drift(memory_, routers, outcome.weights, cfg_.drift_samples_per_class, drift_rng);

    record_statistics(data, spec);

    const FrozenHashes after = frozen_hashes(net_);
    outcome.freezing_ok = frozen_unchanged(before, after);
    ++tasks_done_;
    return outcome;
  }

 private:
  std::pair<DenseMatrix, std::vector<std::size_t>> gather(const Dataset& data, const std::vector<std::size_t>& order,
                                                          std::size_t start) const {
    const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
    DenseMatrix inputs(end - start, data.inputs.cols());
    std::vector<std::size_t> labels(end - start);
    for (std::size_t i = start; i < end; ++i) {
      std::copy_n(data.inputs.row(order[i]).begin(), data.inputs.cols(), inputs.row(i - start).begin());
      labels[i - start] = data.labels[order[i]];
    }
    return {std::move(inputs), std::move(labels)};
  }

  void train_step(std::size_t t, std::size_t epoch, std::size_t step, const DenseMatrix& inputs,
                  const std::vector<std::size_t>& labels, ColumnRange columns, const SensitivityWeights& weights) {
    Tape tape;
    const NetworkGraph g = build_graph(tape, net_, inputs);
    Var l_cur = ad::cross_entropy(g.logits, labels, columns);
    Var total = l_cur;
    StepRecord rec{t, epoch, step, l_cur.scalar(), 0.0, 0.0, 0.0};
    if (t > 0) {
      const auto moe = net_.moe_layer_indices();
      if (cfg_.sara_on) {
        std::vector<Var> losses;
        for (std::size_t m = 0; m < moe.size(); ++m) {
          const Var w = g.router_weights[moe[m]];
          const AlignmentBatch batch = draw_alignment_batch(memory_[m], w.cols(), cfg_.samples_per_class, sara_rng_);
          losses.push_back(alignment_loss(w, batch));
        }
        Var l_sara = sara_total(weights, losses);
        rec.l_sara = l_sara.scalar();
        total = ad::add(total, ad::scale(l_sara, cfg_.lambda_sara));
      }
      if (cfg_.acr_on) {
        Var l_acr;
        for (std::size_t m = 0; m < moe.size(); ++m) {
          Var loads = batch_load(g.router_inputs[moe[m]], g.router_weights[moe[m]], net_.layers[moe[m]].k, cfg_.sigma);
          Var term = acr_loss(loads, cfg_.epsilon);
          l_acr = m == 0 ? term : ad::add(l_acr, term);
        }
        l_acr = ad::scale(l_acr, 1.0 / static_cast<double>(moe.size()));
        rec.l_acr = l_acr.scalar();
        total = ad::add(total, ad::scale(l_acr, cfg_.lambda_acr));
      }
    }
    rec.l_total = total.scalar();
    tape.backward(total);
    for (std::size_t i = 0; i < g.params.size(); ++i) apply_update(i, g.params[i], tape.grad(g.param_vars[i]));
    trace_.push_back(rec);
  }

  void reset_optimizer() {
    adam_m_.clear();
    adam_v_.clear();
    adam_step_ = 0;
  }

  void apply_update(std::size_t slot, const ParamRef& ref, const DenseMatrix& grad) {
    DenseMatrix& w = resolve(net_, ref);
    if (cfg_.optimizer == OptimizerKind::kSgd) {
      for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] -= cfg_.learning_rate * grad.data()[i];
      return;
    }
    constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
    if (slot == 0) ++adam_step_;
    const std::string key = describe(ref);
    auto& m = adam_m_[key];
    auto& v = adam_v_[key];
    if (m.size() != w.size()) m.assign(w.size(), 0.0);
    if (v.size() != w.size()) v.assign(w.size(), 0.0);
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(adam_step_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(adam_step_));
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = grad.data()[i];
      m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * gi;
      v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * gi * gi;
      w.data()[i] -= cfg_.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + kEps);
    }
  }

  void record_statistics(const Dataset& data, const TaskSpec& spec) {
    const std::vector<DenseMatrix> inputs = router_inputs(net_, data.inputs);
    const auto moe = net_.moe_layer_indices();
    for (std::size_t label : spec.labels) {
      std::vector<std::size_t> rows;
      for (std::size_t r = 0; r < data.size(); ++r)
        if (data.labels[r] == label) rows.push_back(r);
      for (std::size_t m = 0; m < moe.size(); ++m) {
        const DenseMatrix& z = inputs[moe[m]];
        DenseMatrix cls(rows.size(), z.cols());
        for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(z.row(rows[i]).begin(), z.cols(), cls.row(i).begin());
        memory_[m].anchors.push_back(compute_anchor(cls, net_.layers[moe[m]].router, label, moe[m]));
        memory_[m].stats.push_back(fit_router_input_stats(cls, label, moe[m]));
      }
    }
  }

  static bool frozen_unchanged(const FrozenHashes& before, const FrozenHashes& after) {
    if (before.stem != after.stem || before.base_blocks != after.base_blocks) return false;
    for (const auto& [where, hash] : before.frozen_experts) {
      const auto it = std::find_if(after.frozen_experts.begin(), after.frozen_experts.end(),
                                   [&](const auto& e) { return e.first == where; });
      if (it == after.frozen_experts.end() || it->second != hash) return false;
    }
    return true;
  }

  RunConfig cfg_;
  SeededRng init_rng_;
  SeededRng sara_rng_;
  Network net_;
  std::vector<LayerMemory> memory_;
  std::vector<StepRecord> trace_;
  std::size_t tasks_done_ = 0;
  std::map<std::string, std::vector<double>> adam_m_;
  std::map<std::string, std::vector<double>> adam_v_;
  std::size_t adam_step_ = 0;
};

// ---------------------------------------------------------------------------
// Routing mass of old tasks.

// Row i: average dense routing distribution (over MoE layers, classes of
// task i and sampled router inputs) of task i's classes on every expert.
inline DenseMatrix old_task_routing_mass(const Network& net, std::span<const LayerMemory> memory,
                                         std::size_t classes_per_task, std::size_t samples_per_class,
                                         SeededRng& rng) {
  const auto moe = net.moe_layer_indices();
  detail::require(memory.size() == moe.size() && !memory.empty(), "old_task_routing_mass: memory/layer mismatch");
  detail::require(classes_per_task >= 1 && samples_per_class >= 1, "old_task_routing_mass: counts must be >= 1");
  const std::size_t classes = memory.front().class_count();
  detail::require(classes >= 1, "old_task_routing_mass: no completed task");
  const std::size_t tasks = (classes + classes_per_task - 1) / classes_per_task;
  const std::size_t e_total = net.layers[moe.front()].router.e_total();
  DenseMatrix mass(tasks, e_total);
  std::vector<double> counts(tasks, 0.0);
  for (std::size_t m = 0; m < moe.size(); ++m) {
    const Router& router = net.layers[moe[m]].router;
    detail::require(router.e_total() == e_total, "old_task_routing_mass: layers differ in expert count");
    const LayerMemory& mem = memory[m];
    for (std::size_t c = 0; c < mem.class_count(); ++c) {
      const std::size_t task = mem.anchors[c].class_id / classes_per_task;
      for (std::size_t s = 0; s < samples_per_class; ++s) {
        Vector h = vecmat(sample_gaussian_diag(mem.stats[c].mean, mem.stats[c].diag_var, rng), router.w_router);
        detail::softmax_inplace(h);
        for (std::size_t j = 0; j < e_total; ++j) mass(task, j) += h[j];
        counts[task] += 1.0;
      }
    }
  }
  for (std::size_t t = 0; t < tasks; ++t)
    for (std::size_t j = 0; j < e_total; ++j) mass(t, j) /= counts[t];
  return mass;
}

// Sum of mass[i][j] over tasks i < last row and experts j > i, i.e. the
// routing mass old tasks place on experts created after them.
inline double later_expert_mass(const DenseMatrix& mass) {
  double s = 0.0;
  const std::size_t rows = mass.rows() == 0 ? 0 : mass.rows() - 1;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = i + 1; j < mass.cols(); ++j) s += mass(i, j);
  return s;
}

// ---------------------------------------------------------------------------
// Experiments.

struct Metrics {
  std::string variant;
  std::uint64_t seed = 0;
  std::string weighting;
  Vector accuracies;  // A_t, percent
  double average_accuracy = 0.0;
  double last_accuracy = 0.0;
  std::vector<DriftReport> drift;
  bool freezing_ok = true;

  bool bounds_hold() const {
    return std::all_of(drift.begin(), drift.end(), [](const DriftReport& r) { return r.bound_holds; });
  }
};

struct RunResult {
  Metrics metrics;
  Network network;
  std::vector<LayerMemory> memory;
  std::vector<StepRecord> trace;
  DenseMatrix routing_mass;
  std::vector<std::size_t> access_log;
};

inline RunResult run_experiment(const RunConfig& cfg) {
  cfg.validate();
  const TaskStream stream = generate_stream(cfg);
  ContinualLearner learner(cfg);
  RunResult out;
  out.metrics.variant = variant_name(cfg.sara_on, cfg.acr_on);
  out.metrics.seed = cfg.init_seed;
  out.metrics.weighting = to_string(cfg.weighting);
  std::vector<const Dataset*> seen;
  for (std::size_t t = 0; t < cfg.tasks; ++t) {
    TaskOutcome outcome = learner.train_task(stream, t);
    seen.push_back(&stream.test(t));
    out.metrics.accuracies.push_back(evaluate(learner.network(), seen));
    out.metrics.drift.push_back(std::move(outcome.drift));
    out.metrics.freezing_ok = out.metrics.freezing_ok && outcome.freezing_ok;
  }
  out.metrics.average_accuracy = mean(out.metrics.accuracies);
  out.metrics.last_accuracy = out.metrics.accuracies.back();
  SeededRng mass_rng = SeededRng::derive(cfg.init_seed, 9000);
  out.routing_mass = old_task_routing_mass(learner.network(), learner.memory(), cfg.classes_per_task,
                                           cfg.drift_samples_per_class, mass_rng);
  out.network = learner.network();
  out.memory = learner.memory();
  out.trace = learner.trace();
  out.access_log = stream.access_log();
  return out;
}

inline RunConfig with_seed(RunConfig cfg, std::uint64_t seed) {
  cfg.data_seed = seed;
  cfg.init_seed = seed;
  return cfg;
}

// Runs fn(i) for i in [0, n) on up to `workers` threads. Results are
// addressed by index, so completion order does not matter.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

struct AblationVariant {
  std::string name;
  bool sara_on = false;
  bool acr_on = false;
  Weighting weighting = Weighting::kSensitivity;
};

inline AblationVariant ablation_variant(const std::string& name, Weighting weighting = Weighting::kSensitivity) {
  if (name == "baseline") return {name, false, false, weighting};
  if (name == "sara_only") return {name, true, false, weighting};
  if (name == "acr_only") return {name, false, true, weighting};
  if (name == "full") return {name, true, true, weighting};
  throw InvalidArgument("unknown ablation variant '" + name + "' (expected baseline, sara_only, acr_only, full)");
}

inline std::vector<AblationVariant> standard_variants(Weighting weighting = Weighting::kSensitivity) {
  return {ablation_variant("baseline", weighting), ablation_variant("sara_only", weighting),
          ablation_variant("acr_only", weighting), ablation_variant("full", weighting)};
}

struct AblationRow {
  AblationVariant variant;
  std::uint64_t seed = 0;
  Metrics metrics;
};

struct AblationSummary {
  AblationVariant variant;
  double median_average = 0.0;
  double median_last = 0.0;
};

struct AblationTable {
  std::vector<AblationRow> rows;  // variant-major, seeds in the given order
  std::vector<AblationSummary> summaries;

  const AblationSummary& summary(const std::string& name, Weighting w = Weighting::kSensitivity) const {
    for (const auto& s : summaries)
      if (s.variant.name == name && s.variant.weighting == w) return s;
    throw InvalidArgument("AblationTable: no variant " + name);
  }
};

inline AblationTable run_ablation(const RunConfig& base, const std::vector<AblationVariant>& variants,
                                  const std::vector<std::uint64_t>& seeds, std::size_t workers = 1) {
  if (variants.empty()) throw InvalidArgument("run_ablation: empty variant list");
  if (seeds.empty()) throw InvalidArgument("run_ablation: need at least one seed");
  AblationTable table;
  table.rows.resize(variants.size() * seeds.size());
  parallel_for(table.rows.size(), workers, [&](std::size_t i) {
    const AblationVariant& v = variants[i / seeds.size()];
    RunConfig cfg = with_seed(base, seeds[i % seeds.size()]);
    cfg.sara_on = v.sara_on;
    cfg.acr_on = v.acr_on;
    cfg.weighting = v.weighting;
    table.rows[i] = AblationRow{v, seeds[i % seeds.size()], run_experiment(cfg).metrics};
  });
  for (std::size_t v = 0; v < variants.size(); ++v) {
    Vector avg, last;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      avg.push_back(table.rows[v * seeds.size() + s].metrics.average_accuracy);
      last.push_back(table.rows[v * seeds.size() + s].metrics.last_accuracy);
    }
    table.summaries.push_back({variants[v], median(avg), median(last)});
  }
  return table;
}

enum class SweepParameter { kK, kGamma, kLambdaSara, kLambdaAcr, kExpandStartLayer };

inline const std::vector<std::string>& sweep_parameter_names() {
  static const std::vector<std::string> names = {"k", "gamma", "lambda_sara", "lambda_acr", "expand_start_layer"};
  return names;
}

inline SweepParameter parse_sweep_parameter(const std::string& name) {
  if (name == "k") return SweepParameter::kK;
  if (name == "gamma") return SweepParameter::kGamma;
  if (name == "lambda_sara") return SweepParameter::kLambdaSara;
  if (name == "lambda_acr") return SweepParameter::kLambdaAcr;
  if (name == "expand_start_layer") return SweepParameter::kExpandStartLayer;
  std::string valid;
  for (const auto& n : sweep_parameter_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw InvalidArgument("unknown sweep parameter '" + name + "'; valid parameters: " + valid);
}

inline std::string to_string(SweepParameter p) {
  return sweep_parameter_names().at(static_cast<std::size_t>(p));
}

inline RunConfig apply_sweep_value(RunConfig cfg, SweepParameter p, double value) {
  auto as_count = [&](const char* what) {
    if (!(value >= 0.0) || value != std::floor(value))
      throw InvalidArgument(std::string("sweep: ") + what + " needs a non-negative integer, got " +
                            std::to_string(value));
    return static_cast<std::size_t>(value);
  };
  switch (p) {
    case SweepParameter::kK: cfg.k = as_count("k"); break;
    case SweepParameter::kGamma: cfg.gamma = value; break;
    case SweepParameter::kLambdaSara: cfg.lambda_sara = value; break;
    case SweepParameter::kLambdaAcr: cfg.lambda_acr = value; break;
    case SweepParameter::kExpandStartLayer: cfg.expand_start_layer = as_count("expand_start_layer"); break;
  }
  cfg.validate();
  return cfg;
}

struct SweepRow {
  SweepParameter parameter;
  double value = 0.0;
  std::uint64_t seed = 0;
  Metrics metrics;
};

inline std::vector<SweepRow> run_sweep(const RunConfig& base, SweepParameter p, const std::vector<double>& values,
                                       const std::vector<std::uint64_t>& seeds, std::size_t workers = 1) {
  if (values.empty()) throw InvalidArgument("run_sweep: empty value list");
  if (seeds.empty()) throw InvalidArgument("run_sweep: need at least one seed");
  std::vector<RunConfig> configs;
  for (double v : values) configs.push_back(apply_sweep_value(base, p, v));  // validates all up front
  std::vector<SweepRow> rows(values.size() * seeds.size());
  parallel_for(rows.size(), workers, [&](std::size_t i) {
    const std::size_t vi = i / seeds.size();
    const std::uint64_t seed = seeds[i % seeds.size()];
    rows[i] = SweepRow{p, values[vi], seed, run_experiment(with_seed(configs[vi], seed)).metrics};
  });
  return rows;
}

}  // namespace starmoe

#endif  // STARMOE_HARNESS_HPP_
