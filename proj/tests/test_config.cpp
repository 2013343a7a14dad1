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

#include <fstream>

#include <gtest/gtest.h>

#include "starmoe/config.hpp"

namespace starmoe {
namespace {

std::string error_of(const std::string& text) {
  try {
    parse_config_string(text, "x.cfg");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

TEST(ParseConfig, EmptyGivesDefaults) {
  EXPECT_EQ(format_config(parse_config_string("")), format_config(RunConfig{}));
  EXPECT_EQ(format_config(parse_config_string("# only a comment\n\n   \n")), format_config(RunConfig{}));
}

TEST(ParseConfig, ReadsValues) {
  const RunConfig cfg = parse_config_string(
      "tasks = 3\n"
      "  gamma=0.25   # trailing comment\n"
      "weighting = uniform\n"
      "optimizer = sgd\n"
      "acr_on = off\n"
      "data_seed = 18446744073709551615\n");
  EXPECT_EQ(cfg.tasks, 3u);
  EXPECT_EQ(cfg.gamma, 0.25);
  EXPECT_EQ(cfg.weighting, Weighting::kUniform);
  EXPECT_EQ(cfg.optimizer, OptimizerKind::kSgd);
  EXPECT_FALSE(cfg.acr_on);
  EXPECT_EQ(cfg.data_seed, 18446744073709551615ull);
  EXPECT_EQ(cfg.init_seed, RunConfig{}.init_seed);
}

TEST(ParseConfig, ErrorsNameFileAndLine) {
  EXPECT_EQ(error_of("tasks = 3\nbogus = 1\n"), "x.cfg:2: unknown key 'bogus'");
  EXPECT_EQ(error_of("k = 1\n\nk = 2\n"), "x.cfg:3: duplicate key 'k'");
  EXPECT_EQ(error_of("just words\n"), "x.cfg:1: expected key = value");
  EXPECT_NE(error_of("\n\ntasks = many\n").find("x.cfg:3: tasks"), std::string::npos);
  EXPECT_NE(error_of("sara_on = maybe\n").find("x.cfg:1:"), std::string::npos);
  EXPECT_NE(error_of("weighting = loud\n").find("x.cfg:1:"), std::string::npos);
}

TEST(ParseConfig, ValidationPointsAtOffendingLine) {
  EXPECT_EQ(error_of("tasks = 2\n\ngamma = 2\n"), "x.cfg:3: gamma must lie in [0, 1]");
  EXPECT_EQ(error_of("layers = 2\nexpand_start_layer = 2\n"), "x.cfg:2: expand_start_layer must be < layers");
  EXPECT_EQ(error_of("sigma = 0\n"), "x.cfg:1: sigma must be positive");
  EXPECT_EQ(error_of("epsilon = -1\n"), "x.cfg:1: epsilon must be positive");
  EXPECT_EQ(error_of("lambda_acr = -0.5\n"), "x.cfg:1: lambda_acr must be >= 0");
  // The rule involves a key left at its default: no line to point at.
  EXPECT_EQ(error_of("tasks = 2\nlayers = 1\nexpand_start_layer = 0\nk = 0\n"), "x.cfg:4: k must be >= 1");
}

TEST(FormatConfig, RoundTrips) {
  RunConfig cfg;
  cfg.gamma = 1.0 / 3.0;
  cfg.learning_rate = 0.1 + 0.2;
  cfg.init_seed = 99;
  cfg.weighting = Weighting::kUniform;
  cfg.mask_old_logits = false;
  const std::string text = format_config(cfg);
  const RunConfig back = parse_config_string(text);
  EXPECT_EQ(back.gamma, cfg.gamma);
  EXPECT_EQ(back.learning_rate, cfg.learning_rate);
  EXPECT_EQ(format_config(back), text);
  EXPECT_EQ(config_key_names().size(), 31u);
}

TEST(LoadConfig, MissingFileNamesPath) {
  try {
    load_config("/nonexistent/dir/run.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/run.cfg"), std::string::npos);
  }
}

TEST(LoadConfig, ShippedDefaultsMatchBuiltIn) {
  const RunConfig cfg = load_config(std::string(STARMOE_SOURCE_DIR) + "/configs/default.cfg");
  EXPECT_EQ(format_config(cfg), format_config(RunConfig{}));
  std::ifstream in(std::string(STARMOE_SOURCE_DIR) + "/configs/default.cfg");
  std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  for (const auto& key : config_key_names()) EXPECT_NE(all.find(key + " ="), std::string::npos) << key;
}

}  // namespace
}  // namespace starmoe
