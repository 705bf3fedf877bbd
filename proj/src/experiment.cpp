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

#include "ib3dseg/experiment.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include "ib3dseg/error.hpp"

extern char** environ;

namespace ib3dseg {
namespace fs = std::filesystem;

namespace {

constexpr const char* kPrefix = "IB3DSEG_";

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

nlohmann::json parse_value(const std::string& text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    return text;
  }
}

}  // namespace

std::vector<CorruptionSpec> ExperimentConfig::parsed_conditions() const {
  std::vector<CorruptionSpec> out;
  for (const auto& c : conditions) out.push_back(CorruptionSpec::parse(c));
  return out;
}

void apply_env_overrides(nlohmann::json& config, const std::map<std::string, std::string>& env) {
  for (const auto& [name, value] : env) {
    if (name.rfind(kPrefix, 0) != 0) continue;
    const std::string key = lower(name.substr(std::char_traits<char>::length(kPrefix)));
    bool placed = false;
    for (const char* section : {"network", "train"}) {
      const std::string head = std::string(section) + "_";
      if (key.rfind(head, 0) == 0) {
        if (!config.contains(section)) config[section] = nlohmann::json::object();
        config[section][key.substr(head.size())] = parse_value(value);
        placed = true;
        break;
      }
    }
    if (!placed) config[key] = parse_value(value);
  }
}

std::map<std::string, std::string> config_environment() {
  static const std::set<std::string> reserved{"IB3DSEG_ISA"};
  std::map<std::string, std::string> out;
  for (char** e = environ; e && *e; ++e) {
    const std::string entry(*e);
    const auto eq = entry.find('=');
    if (eq == std::string::npos) continue;
    const std::string name = entry.substr(0, eq);
    if (name.rfind(kPrefix, 0) == 0 && !reserved.count(name)) out[name] = entry.substr(eq + 1);
  }
  return out;
}

ExperimentConfig parse_experiment(nlohmann::json j, const std::string& base_dir, const std::string& origin,
                                  const std::map<std::string, std::string>& env) {
  if (!j.is_object()) throw ConfigError(origin + ": experiment config must be a JSON object");
  apply_env_overrides(j, env);
  static const std::set<std::string> keys{"schema_version", "manifest", "dataset", "network", "train", "conditions"};
  for (const auto& [key, _] : j.items())
    if (!keys.count(key)) throw ConfigError(origin + ": unknown key '" + key + "'");

  ExperimentConfig c;
  try {
    const int version = j.value("schema_version", IB3DSEG_CONFIG_SCHEMA_VERSION);
    if (version != IB3DSEG_CONFIG_SCHEMA_VERSION)
      throw ConfigError(origin + ": schema_version " + std::to_string(version) + " is not supported (expected " +
                        std::to_string(IB3DSEG_CONFIG_SCHEMA_VERSION) + ")");
    if (j.contains("manifest") == j.contains("dataset"))
      throw ConfigError(origin + ": give exactly one of 'manifest' and 'dataset'");
    if (j.contains("manifest")) {
      fs::path path = j.at("manifest").get<std::string>();
      if (path.is_relative()) path = fs::path(base_dir) / path;
      c.dataset = load_manifest(path.string());
    } else {
      c.dataset = manifest_from_json(j.at("dataset"), base_dir, origin + ": dataset");
    }
    if (j.contains("network")) c.network = NetworkConfig::from_json(j.at("network"));
    if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
    if (j.contains("conditions")) c.conditions = j.at("conditions").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  c.dataset.validate();
  c.network.validate();
  try {
    c.network.validate_patch(c.dataset.patch_size);
  } catch (const ShapeError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  c.train.validate();
  if (c.conditions.empty()) throw ConfigError(origin + ": conditions must not be empty");
  try {
    c.parsed_conditions();
  } catch (const Error& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return c;
}

ExperimentConfig load_experiment(const std::string& path, const std::map<std::string, std::string>& env) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open experiment config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid JSON in '" + path + "': " + e.what());
  }
  const fs::path parent = fs::path(path).parent_path();
  return parse_experiment(std::move(j), parent.empty() ? "." : parent.string(), path, env);
}

}  // namespace ib3dseg
