// Copyright 2026 The ib3dseg Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <map>
#include <string>
#include <vector>

#include "ib3dseg/model.hpp"
#include "ib3dseg/pipeline.hpp"
#include "ib3dseg/training.hpp"
#include "json.hpp"

namespace ib3dseg {

/// Dataset, network, training and evaluation settings from one JSON file:
///   {"schema_version": 1, "manifest": "data/manifest.json" | "dataset": {...},
///    "network": {...}, "train": {...}, "conditions": ["none", "blur:2"]}
/// Relative manifest paths resolve against the config file's directory.
struct ExperimentConfig {
  DatasetSpec dataset;
  NetworkConfig network;
  TrainConfig train;
  std::vector<std::string> conditions{"none"};

  std::vector<CorruptionSpec> parsed_conditions() const;
};

/// Environment overrides: IB3DSEG_NETWORK_<KEY> and IB3DSEG_TRAIN_<KEY> set
/// keys of those sections, IB3DSEG_<KEY> sets a top-level key. Values are
/// parsed as JSON when possible, otherwise taken as strings. Variables in
/// `reserved` (without the prefix) are skipped.
void apply_env_overrides(nlohmann::json& config, const std::map<std::string, std::string>& env);

/// IB3DSEG_* variables from the process environment, minus the ones the
/// library reads itself (IB3DSEG_ISA).
std::map<std::string, std::string> config_environment();

/// Validates the whole document before returning; unknown keys anywhere are
/// ConfigErrors.
ExperimentConfig parse_experiment(nlohmann::json j, const std::string& base_dir, const std::string& origin,
                                  const std::map<std::string, std::string>& env = {});
ExperimentConfig load_experiment(const std::string& path, const std::map<std::string, std::string>& env = {});

}  // namespace ib3dseg
