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

#ifndef STARMOE_CLI_HPP_
#define STARMOE_CLI_HPP_

// Command implementations behind the `starmoe` tool.
//
//   starmoe run      --config C --out D
//   starmoe ablate   --config C --out D [--seeds 1,2,3] [--weightings sensitivity,uniform]
//   starmoe sweep    --config C --out D --param k --values 1,2,4 [--seeds ...]
//   starmoe check    --out D
//   starmoe driftmap --config C --out D [--seeds ...]
//
// Exit status: 0 on success, 1 on usage or configuration errors, 2 when an
// output file exists and --force was not given, 3 when an internal invariant
// (drift bound, frozen parameters, check suite) fails.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "starmoe/checks.hpp"
#include "starmoe/config.hpp"
#include "starmoe/harness.hpp"

namespace starmoe::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitExists = 2;
inline constexpr int kExitInvariant = 3;

inline const char* kMetricsHeader = "variant,seed,task,A_t,delta_total,sara_loss,bound,bound_holds";
inline const char* kAblationHeader = "variant,weighting,seed,A_bar,A_T";
inline const char* kAblationMedianColumns = ",median_A_bar,median_A_T";
inline const char* kSweepHeader = "parameter,value,seed,A_bar,A_T,bounds_hold,freezing_ok";

struct Options {
  std::string config_path;
  std::string out_dir = ".";
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> data_seed;
  std::optional<std::uint64_t> init_seed;
  std::size_t workers = 1;
  bool force = false;
  std::string seeds;  // comma list
  std::string weightings = "sensitivity";
  std::string param;
  std::string values;
};

class ExistingOutput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invariant violations found after a run has completed.
class InvariantFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// Collects files and writes them only once every target is known to be
// writable, so a refused run leaves the directory untouched.
class OutputSet {
 public:
  OutputSet(std::filesystem::path dir, bool force) : dir_(std::move(dir)), force_(force) {}

  void add(const std::string& relative, std::string content) { files_.emplace_back(relative, std::move(content)); }

  void check_writable() const {
    if (force_) return;
    for (const auto& [rel, _] : files_)
      if (std::filesystem::exists(dir_ / rel))
        throw ExistingOutput((dir_ / rel).string() + " exists; pass --force to overwrite");
  }

  void commit() const {
    check_writable();
    for (const auto& [rel, content] : files_) {
      const auto path = dir_ / rel;
      std::filesystem::create_directories(path.parent_path());
      std::ofstream os(path, std::ios::binary);
      if (!os) throw std::runtime_error("cannot write " + path.string());
      os << content;
    }
  }

 private:
  std::filesystem::path dir_;
  bool force_;
  std::vector<std::pair<std::string, std::string>> files_;
};

// Fails early, before the expensive part of a command runs.
inline void refuse_existing(const Options& o, const std::vector<std::string>& names) {
  if (o.force) return;
  for (const auto& n : names)
    if (std::filesystem::exists(std::filesystem::path(o.out_dir) / n))
      throw ExistingOutput((std::filesystem::path(o.out_dir) / n).string() + " exists; pass --force to overwrite");
}

inline RunConfig resolve_config(const Options& o) {
  RunConfig cfg = o.config_path.empty() ? RunConfig{} : load_config(o.config_path);
  if (o.seed) cfg.data_seed = cfg.init_seed = *o.seed;
  if (o.data_seed) cfg.data_seed = *o.data_seed;
  if (o.init_seed) cfg.init_seed = *o.init_seed;
  cfg.validate();
  return cfg;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!detail::trim(item).empty()) out.push_back(detail::trim(item));
  return out;
}

inline std::vector<std::uint64_t> parse_seeds(const Options& o, const RunConfig& cfg,
                                              std::vector<std::uint64_t> fallback) {
  if (o.seeds.empty()) return o.seed ? std::vector<std::uint64_t>{cfg.init_seed} : fallback;
  std::vector<std::uint64_t> seeds;
  for (const auto& s : split_list(o.seeds)) {
    try {
      seeds.push_back(detail::parse_u64(s));
    } catch (const InvalidArgument&) {
      throw InvalidArgument("--seeds: bad seed '" + s + "'");
    }
  }
  if (seeds.empty()) throw InvalidArgument("--seeds: need at least one seed");
  return seeds;
}

inline std::string metrics_rows(const Metrics& m) {
  std::string out;
  for (std::size_t t = 0; t < m.accuracies.size(); ++t) {
    const DriftReport& d = m.drift[t];
    out += m.variant + "," + std::to_string(m.seed) + "," + std::to_string(t + 1) + "," + num(m.accuracies[t]) +
           "," + num(d.total_drift) + "," + num(d.sara_loss) + "," + num(d.bound) + "," +
           (d.bound_holds ? "true" : "false") + "\n";
  }
  return out;
}

inline nlohmann::ordered_json metrics_json(const Metrics& m) {
  nlohmann::ordered_json j;
  j["variant"] = m.variant;
  j["weighting"] = m.weighting;
  j["seed"] = m.seed;
  j["A_bar"] = m.average_accuracy;
  j["A_T"] = m.last_accuracy;
  j["accuracies"] = m.accuracies;
  j["bounds_hold"] = m.bounds_hold();
  j["freezing_ok"] = m.freezing_ok;
  return j;
}

inline std::string invariant_problems(const Metrics& m) {
  std::string out;
  if (!m.bounds_hold()) out += m.variant + " seed " + std::to_string(m.seed) + ": drift bound violated\n";
  if (!m.freezing_ok) out += m.variant + " seed " + std::to_string(m.seed) + ": frozen parameters changed\n";
  return out;
}

// ---------------------------------------------------------------------------

inline int cmd_run(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  std::vector<std::string> names = {"metrics.csv", "summary.json"};
  for (std::size_t t = 1; t <= cfg.tasks; ++t) names.push_back("drift/task_" + std::to_string(t) + ".json");
  refuse_existing(o, names);

  const RunResult r = run_experiment(cfg);
  const Metrics& m = r.metrics;
  OutputSet files(o.out_dir, o.force);
  files.add("metrics.csv", std::string(kMetricsHeader) + "\n" + metrics_rows(m));
  nlohmann::ordered_json summary;
  summary["runs"] = nlohmann::ordered_json::array({metrics_json(m)});
  summary["medians"][m.variant] = {{"A_bar", m.average_accuracy}, {"A_T", m.last_accuracy}};
  summary["config"] = format_config(cfg);
  files.add("summary.json", summary.dump(2) + "\n");
  for (std::size_t t = 0; t < m.drift.size(); ++t)
    files.add("drift/task_" + std::to_string(t + 1) + ".json", drift_report_json(m.drift[t]) + "\n");
  files.commit();

  out << m.variant << " seed " << m.seed << ": A_bar " << fixed(m.average_accuracy) << " A_T "
      << fixed(m.last_accuracy) << "\n";
  if (const std::string p = invariant_problems(m); !p.empty()) throw InvariantFailure(p);
  return kExitOk;
}

struct OrderingVerdict {
  bool ordering = false;
  bool gap = false;
  std::string line;
};

// Median A_bar ordering full >= sara_only >= baseline and the A_T gap of
// full over baseline (>= 5 points).
inline OrderingVerdict ordering_verdict(const AblationTable& table, Weighting w) {
  const auto& base = table.summary("baseline", w);
  const auto& sara = table.summary("sara_only", w);
  const auto& full = table.summary("full", w);
  OrderingVerdict v;
  v.ordering = full.median_average >= sara.median_average && sara.median_average >= base.median_average;
  v.gap = full.median_last - base.median_last >= 5.0;
  v.line = std::string(v.ordering && v.gap ? "PASS" : "FAIL") + " [" + to_string(w) +
           "] median A_bar full " + fixed(full.median_average) + " >= sara_only " + fixed(sara.median_average) +
           " >= baseline " + fixed(base.median_average) + " (" + (v.ordering ? "holds" : "violated") +
           "); median A_T full - baseline = " + fixed(full.median_last - base.median_last) + " (>= 5: " +
           (v.gap ? "yes" : "no") + ")";
  return v;
}

inline std::vector<Weighting> parse_weightings(const std::string& s) {
  std::vector<Weighting> out;
  for (const auto& w : split_list(s)) {
    if (w == "sensitivity") out.push_back(Weighting::kSensitivity);
    else if (w == "uniform") out.push_back(Weighting::kUniform);
    else throw InvalidArgument("--weightings: unknown weighting '" + w + "' (expected sensitivity, uniform)");
  }
  if (out.empty()) throw InvalidArgument("--weightings: need at least one weighting");
  return out;
}

inline int cmd_ablate(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  const auto seeds = parse_seeds(o, cfg, {1, 2, 3, 4, 5});
  const auto weightings = parse_weightings(o.weightings);
  refuse_existing(o, {"ablation.csv", "summary.json"});

  std::vector<AblationVariant> variants;
  for (Weighting w : weightings)
    for (const auto& v : standard_variants(w)) variants.push_back(v);
  const AblationTable table = run_ablation(cfg, variants, seeds, o.workers);

  const bool medians = seeds.size() >= 3;
  std::string csv = std::string(kAblationHeader) + (medians ? kAblationMedianColumns : "") + "\n";
  std::string problems;
  nlohmann::ordered_json summary;
  summary["runs"] = nlohmann::ordered_json::array();
  for (const AblationRow& row : table.rows) {
    const AblationSummary& s = table.summary(row.variant.name, row.variant.weighting);
    csv += row.variant.name + "," + to_string(row.variant.weighting) + "," + std::to_string(row.seed) + "," +
           num(row.metrics.average_accuracy) + "," + num(row.metrics.last_accuracy);
    if (medians) csv += "," + num(s.median_average) + "," + num(s.median_last);
    csv += "\n";
    summary["runs"].push_back(metrics_json(row.metrics));
    problems += invariant_problems(row.metrics);
  }
  summary["medians"] = nlohmann::ordered_json::array();
  for (const AblationSummary& s : table.summaries)
    summary["medians"].push_back({{"variant", s.variant.name},
                                  {"weighting", to_string(s.variant.weighting)},
                                  {"A_bar", s.median_average},
                                  {"A_T", s.median_last}});
  summary["ordering"] = nlohmann::ordered_json::array();
  for (Weighting w : weightings) {
    const OrderingVerdict v = ordering_verdict(table, w);
    summary["ordering"].push_back(v.line);
    out << v.line << "\n";
  }
  OutputSet files(o.out_dir, o.force);
  files.add("ablation.csv", csv);
  files.add("summary.json", summary.dump(2) + "\n");
  files.commit();
  if (!problems.empty()) throw InvariantFailure(problems);
  return kExitOk;
}

inline int cmd_sweep(const Options& o, std::ostream& out) {
  if (o.param.empty()) throw InvalidArgument("sweep: --param is required");
  const SweepParameter p = parse_sweep_parameter(o.param);
  const RunConfig cfg = resolve_config(o);
  std::vector<double> values;
  for (const auto& v : split_list(o.values)) values.push_back(detail::parse_real(v));
  if (values.empty()) throw InvalidArgument("sweep: --values needs at least one value");
  const auto seeds = parse_seeds(o, cfg, {cfg.init_seed});
  refuse_existing(o, {"sweep.csv"});

  const std::vector<SweepRow> rows = run_sweep(cfg, p, values, seeds, o.workers);
  std::string csv = std::string(kSweepHeader) + "\n";
  std::string problems;
  for (const SweepRow& r : rows) {
    csv += to_string(r.parameter) + "," + num(r.value) + "," + std::to_string(r.seed) + "," +
           num(r.metrics.average_accuracy) + "," + num(r.metrics.last_accuracy) + "," +
           (r.metrics.bounds_hold() ? "true" : "false") + "," + (r.metrics.freezing_ok ? "true" : "false") + "\n";
    problems += invariant_problems(r.metrics);
  }
  OutputSet files(o.out_dir, o.force);
  files.add("sweep.csv", csv);
  files.commit();
  out << rows.size() << " sweep rows written\n";
  if (!problems.empty()) throw InvariantFailure(problems);
  return kExitOk;
}

inline int cmd_check(const Options& o, std::ostream& out, CheckOptions opt = {}) {
  if (o.seed) opt.seed = *o.seed;
  refuse_existing(o, {"check_report.txt"});
  const std::vector<SuiteResult> results = run_all_checks(opt);
  const std::string report = format_check_report(results);
  OutputSet files(o.out_dir, o.force);
  files.add("check_report.txt", report);
  files.commit();
  out << report;
  for (const SuiteResult& r : results)
    if (!r.passed()) throw InvariantFailure("check suite failed: " + r.name + " (seed " + std::to_string(opt.seed) + ")");
  return kExitOk;
}

inline std::string heatmap_csv(const DenseMatrix& mass) {
  std::string csv = "task";
  for (std::size_t j = 0; j < mass.cols(); ++j) csv += ",expert_" + std::to_string(j + 1);
  csv += "\n";
  for (std::size_t i = 0; i < mass.rows(); ++i) {
    csv += std::to_string(i + 1);
    for (std::size_t j = 0; j < mass.cols(); ++j) csv += "," + num(mass(i, j));
    csv += "\n";
  }
  return csv;
}

struct DriftMapResult {
  DenseMatrix heatmap_on, heatmap_off;  // seed-averaged
  Vector later_on, later_off;           // per seed
  double median_on = 0.0, median_off = 0.0;
  std::vector<Metrics> metrics;
};

inline DriftMapResult drift_map(const RunConfig& cfg, const std::vector<std::uint64_t>& seeds, std::size_t workers) {
  std::vector<RunResult> runs(2 * seeds.size());
  parallel_for(runs.size(), workers, [&](std::size_t i) {
    RunConfig c = with_seed(cfg, seeds[i % seeds.size()]);
    c.sara_on = i < seeds.size();
    runs[i] = run_experiment(c);
  });
  DriftMapResult r;
  auto average = [&](std::size_t first) {
    DenseMatrix acc = runs[first].routing_mass;
    for (std::size_t s = 1; s < seeds.size(); ++s)
      for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += runs[first + s].routing_mass.data()[i];
    for (double& v : acc.data()) v /= static_cast<double>(seeds.size());
    return acc;
  };
  r.heatmap_on = average(0);
  r.heatmap_off = average(seeds.size());
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    r.later_on.push_back(later_expert_mass(runs[s].routing_mass));
    r.later_off.push_back(later_expert_mass(runs[seeds.size() + s].routing_mass));
  }
  r.median_on = median(r.later_on);
  r.median_off = median(r.later_off);
  for (const RunResult& run : runs) r.metrics.push_back(run.metrics);
  return r;
}

inline int cmd_driftmap(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  const auto seeds = parse_seeds(o, cfg, {1, 2, 3, 4, 5});
  refuse_existing(o, {"heatmap_on.csv", "heatmap_off.csv", "driftmap.txt"});
  const DriftMapResult r = drift_map(cfg, seeds, o.workers);
  const std::string lower = r.median_on < r.median_off ? "sara_on" : (r.median_on > r.median_off ? "sara_off" : "tie");
  std::string line = "old-task mass on later experts (median over " + std::to_string(seeds.size()) +
                     " seeds): sara_on " + num(r.median_on) + ", sara_off " + num(r.median_off) + "; lower: " + lower;
  if (r.median_on > 0.0) line += "; ratio off/on " + fixed(r.median_off / r.median_on, 3);
  line += "\n";
  std::string problems;
  for (const Metrics& m : r.metrics) problems += invariant_problems(m);
  OutputSet files(o.out_dir, o.force);
  files.add("heatmap_on.csv", heatmap_csv(r.heatmap_on));
  files.add("heatmap_off.csv", heatmap_csv(r.heatmap_off));
  files.add("driftmap.txt", line);
  files.commit();
  out << line;
  if (!problems.empty()) throw InvariantFailure(problems);
  return kExitOk;
}

// ---------------------------------------------------------------------------

// Parses argv and dispatches. `check_options` is forwarded to `check`.
inline int main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr,
                const CheckOptions& check_options = {}) {
  CLI::App app{"Expandable mixture-of-experts continual learning experiments"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  Options o;
  std::uint64_t seed = 0, data_seed = 0, init_seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "Seed for data and initialisation");
  auto* data_opt = app.add_option("--data-seed", data_seed, "Data seed (overrides --seed)");
  auto* init_opt = app.add_option("--init-seed", init_seed, "Initialisation seed (overrides --seed)");
  app.add_option("--config", o.config_path, "key=value config file");
  app.add_option("--out", o.out_dir, "Output directory")->capture_default_str();
  app.add_option("--workers", o.workers, "Concurrent runs")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_flag("--force", o.force, "Overwrite existing output files");

  auto* run = app.add_subcommand("run", "Train one configuration over the task stream");
  auto* ablate = app.add_subcommand("ablate", "Run baseline, sara_only, acr_only and full over seeds");
  ablate->add_option("--seeds", o.seeds, "Comma-separated seeds (default 1,2,3,4,5)");
  ablate->add_option("--weightings", o.weightings, "sensitivity, uniform or both")->capture_default_str();
  auto* sweep = app.add_subcommand("sweep", "Vary one parameter");
  sweep->add_option("--param", o.param, "k, gamma, lambda_sara, lambda_acr or expand_start_layer")->required();
  sweep->add_option("--values", o.values, "Comma-separated values")->required();
  sweep->add_option("--seeds", o.seeds, "Comma-separated seeds (default: the config seed)");
  auto* check = app.add_subcommand("check", "Run the property suites");
  auto* driftmap = app.add_subcommand("driftmap", "Routing-mass heatmaps with and without alignment");
  driftmap->add_option("--seeds", o.seeds, "Comma-separated seeds (default 1,2,3,4,5)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }
  if (*seed_opt) o.seed = seed;
  if (*data_opt) o.data_seed = data_seed;
  if (*init_opt) o.init_seed = init_seed;

  try {
    if (run->parsed()) return cmd_run(o, out);
    if (ablate->parsed()) return cmd_ablate(o, out);
    if (sweep->parsed()) return cmd_sweep(o, out);
    if (check->parsed()) return cmd_check(o, out, check_options);
    if (driftmap->parsed()) return cmd_driftmap(o, out);
  } catch (const ExistingOutput& e) {
    err << "error: " << e.what() << "\n";
    return kExitExists;
  } catch (const InvariantFailure& e) {
    err << "internal invariant failure: " << e.what() << "\n";
    return kExitInvariant;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace starmoe::cli

#endif  // STARMOE_CLI_HPP_
