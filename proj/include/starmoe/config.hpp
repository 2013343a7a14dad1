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

#ifndef STARMOE_CONFIG_HPP_
#define STARMOE_CONFIG_HPP_

// Flat key=value run configuration.
//
//   # comment
//   tasks = 5
//   optimizer = adam   # trailing comments are allowed
//
// Every key is optional and defaults to the RunConfig member of the same
// name. Unknown keys, repeated keys and malformed values are rejected with
// "<source>:<line>: <message>".

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "starmoe/errors.hpp"
#include "starmoe/harness.hpp"

namespace starmoe {

class ConfigError : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string format_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::size_t parse_count(const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
    throw InvalidArgument("expected a non-negative integer, got '" + v + "'");
  errno = 0;
  const unsigned long long n = std::strtoull(v.c_str(), nullptr, 10);
  if (errno == ERANGE) throw InvalidArgument("integer out of range: '" + v + "'");
  return static_cast<std::size_t>(n);
}

inline std::uint64_t parse_u64(const std::string& v) { return parse_count(v); }

inline double parse_real(const std::string& v) {
  char* end = nullptr;
  errno = 0;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE || !std::isfinite(d))
    throw InvalidArgument("expected a finite number, got '" + v + "'");
  return d;
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw InvalidArgument("expected true/false, got '" + v + "'");
}

struct ConfigKey {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define STARMOE_COUNT_KEY(field) \
  {#field, [](RunConfig& c, const std::string& v) { c.field = parse_count(v); }, \
   [](const RunConfig& c) { return std::to_string(c.field); }}
#define STARMOE_REAL_KEY(field) \
  {#field, [](RunConfig& c, const std::string& v) { c.field = parse_real(v); }, \
   [](const RunConfig& c) { return format_real(c.field); }}
#define STARMOE_BOOL_KEY(field) \
  {#field, [](RunConfig& c, const std::string& v) { c.field = parse_bool(v); }, \
   [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); }}

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      STARMOE_COUNT_KEY(tasks),
      STARMOE_COUNT_KEY(classes_per_task),
      STARMOE_COUNT_KEY(input_dim),
      STARMOE_COUNT_KEY(feature_dim),
      STARMOE_COUNT_KEY(bottleneck),
      STARMOE_COUNT_KEY(layers),
      STARMOE_COUNT_KEY(k),
      STARMOE_REAL_KEY(sigma),
      STARMOE_REAL_KEY(epsilon),
      STARMOE_REAL_KEY(lambda_sara),
      STARMOE_REAL_KEY(lambda_acr),
      STARMOE_REAL_KEY(gamma),
      STARMOE_REAL_KEY(learning_rate),
      STARMOE_COUNT_KEY(epochs),
      STARMOE_COUNT_KEY(batch_size),
      STARMOE_COUNT_KEY(samples_per_class),
      STARMOE_COUNT_KEY(drift_samples_per_class),
      STARMOE_COUNT_KEY(train_per_class),
      STARMOE_COUNT_KEY(test_per_class),
      {"data_seed", [](RunConfig& c, const std::string& v) { c.data_seed = parse_u64(v); },
       [](const RunConfig& c) { return std::to_string(c.data_seed); }},
      {"init_seed", [](RunConfig& c, const std::string& v) { c.init_seed = parse_u64(v); },
       [](const RunConfig& c) { return std::to_string(c.init_seed); }},
      STARMOE_BOOL_KEY(sara_on),
      STARMOE_BOOL_KEY(acr_on),
      {"weighting",
       [](RunConfig& c, const std::string& v) {
         if (v == "sensitivity") c.weighting = Weighting::kSensitivity;
         else if (v == "uniform") c.weighting = Weighting::kUniform;
         else throw InvalidArgument("weighting must be sensitivity or uniform, got '" + v + "'");
       },
       [](const RunConfig& c) { return to_string(c.weighting); }},
      {"optimizer",
       [](RunConfig& c, const std::string& v) {
         if (v == "sgd") c.optimizer = OptimizerKind::kSgd;
         else if (v == "adam") c.optimizer = OptimizerKind::kAdam;
         else throw InvalidArgument("optimizer must be sgd or adam, got '" + v + "'");
       },
       [](const RunConfig& c) { return to_string(c.optimizer); }},
      STARMOE_COUNT_KEY(expand_start_layer),
      STARMOE_BOOL_KEY(mask_old_logits),
      STARMOE_REAL_KEY(class_separation),
      STARMOE_REAL_KEY(mean_scale),
      STARMOE_REAL_KEY(input_noise),
      STARMOE_REAL_KEY(init_std),
  };
  return keys;
}

#undef STARMOE_COUNT_KEY
#undef STARMOE_REAL_KEY
#undef STARMOE_BOOL_KEY

}  // namespace detail

inline std::vector<std::string> config_key_names() {
  std::vector<std::string> names;
  for (const auto& k : detail::config_keys()) names.push_back(k.name);
  return names;
}

// Parses config text on top of the defaults and validates the result.
inline RunConfig parse_config(std::istream& in, const std::string& source = "<config>") {
  RunConfig cfg;
  std::vector<std::pair<std::string, std::size_t>> seen;  // key, line
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const auto& keys = detail::config_keys();
    const auto it = std::find_if(keys.begin(), keys.end(), [&](const auto& k) { return k.name == key; });
    if (it == keys.end()) throw ConfigError(where + "unknown key '" + key + "'");
    if (std::any_of(seen.begin(), seen.end(), [&](const auto& s) { return s.first == key; }))
      throw ConfigError(where + "duplicate key '" + key + "'");
    seen.emplace_back(key, lineno);
    try {
      it->set(cfg, value);
    } catch (const InvalidArgument& e) {
      throw ConfigError(where + key + ": " + e.what());
    }
  }
  try {
    cfg.validate();
  } catch (const InvalidArgument& e) {
    // Messages start with the offending key; point at the line that set it.
    const std::string msg = e.what();
    const std::string key = msg.substr(0, msg.find(' '));
    for (const auto& [name, lineno] : seen)
      if (name == key) throw ConfigError(source + ":" + std::to_string(lineno) + ": " + msg);
    throw ConfigError(source + ": " + msg);
  }
  return cfg;
}

inline RunConfig parse_config_string(const std::string& text, const std::string& source = "<config>") {
  std::istringstream in(text);
  return parse_config(in, source);
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config file");
  return parse_config(in, path);
}

// Every key with its value, one per line; parse_config reads it back
// to an equal config.
inline std::string format_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : detail::config_keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

}  // namespace starmoe

#endif  // STARMOE_CONFIG_HPP_
