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

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ib3dseg/evaluation.hpp"
#include "ib3dseg/model.hpp"
#include "ib3dseg/pipeline.hpp"
#include "json.hpp"

namespace ib3dseg {

struct TrainConfig {
  int epochs = 500;
  int batches_per_epoch = 50;
  int batch_size = 2;
  double lr0 = 1e-4;
  double weight_decay = 1e-5;
  double poly_power = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int folds = 5;  // 1 trains and validates on every case
  std::uint64_t seed = 0;
  bool augment = true;
  int validate_every = 1;  // epochs; the final epoch is always validated

  void validate() const;
  nlohmann::ordered_json to_json() const;
  /// Unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& j);
  bool operator==(const TrainConfig&) const = default;
};

/// BCE (probabilities clamped to [1e-7, 1 - 1e-7]) plus soft Dice
/// 1 - 2 sum(pg) / (sum(p^2) + sum(g^2)), both over every element of the
/// batch. Throws ParameterError unless the target is binary.
template <typename T>
Tensor<T> bce_dice_loss(const Tensor<T>& logits, const Tensor<T>& target);

/// The two terms separately (no gradient), for diagnostics.
struct LossTerms {
  double bce = 0.0;
  double dice = 0.0;
};
template <typename T>
LossTerms bce_dice_terms(const Tensor<T>& logits, const Tensor<T>& target);

/// lr0 * (1 - epoch / epochs)^poly_power for epoch in [0, epochs].
double poly_lr(int epoch, const TrainConfig& config);

struct AdamMoments {
  std::vector<float> m;
  std::vector<float> v;
  bool operator==(const AdamMoments&) const = default;
};

struct AdamState {
  std::int64_t step = 0;
  std::map<std::string, AdamMoments> moments;  // by parameter name
  bool operator==(const AdamState&) const = default;
};

/// One bias-corrected Adam update of every trainable parameter from its
/// gradient (absent gradients count as zero). Weight decay is added to the
/// gradient of conv weights only. Fixed kernels and buffers are untouched.
void adam_step(Network& net, AdamState& state, double lr, const TrainConfig& config);

/// Fold index per case: seeded shuffle, then contiguous near-equal folds.
std::vector<int> kfold_split(int n_cases, int k, std::uint64_t seed);

struct Checkpoint {
  Network network;
  AdamState adam;
  TrainConfig train;
  PredictSettings predict;
  int fold = 0;
  int epoch = 0;       // epochs completed
  int best_epoch = 0;  // epoch of the best validation score
  double best_dsc = 0.0;
  std::string dataset_hash;
};

/// Binary format: "IB3DCKPT", u32 version, u64 length + JSON metadata, then
/// named little-endian float32 tensors (parameters, buffers, fixed kernels
/// and Adam moments).
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Stable fingerprint of the dataset description (ids, paths, preprocessing).
std::string dataset_hash(const DatasetSpec& spec);

struct EpochLog {
  int epoch = 0;  // 1-based
  double loss = 0.0;
  double lr = 0.0;
  std::optional<double> val_dsc;
};

struct FoldResult {
  int fold = 0;
  std::vector<std::string> validation_ids;
  double best_dsc = 0.0;
  int best_epoch = 0;
  std::vector<EpochLog> log;
};

struct TrainResult {
  std::vector<FoldResult> folds;
  double mean_best_dsc = 0.0;
};

struct TrainOptions {
  std::vector<int> only_folds;  // empty runs every fold
  std::function<void(int fold, const EpochLog&)> on_epoch;
};

/// k-fold training. Writes <out>/fold_<i>/{best.ckpt,last.ckpt,log.csv},
/// <out>/manifest.json and <out>/summary.json. Throws TrainingError on a
/// non-finite loss or gradient.
TrainResult train(const DatasetSpec& data, const NetworkConfig& net_config, const TrainConfig& config,
                  const std::string& out_dir, const TrainOptions& options = {});

}  // namespace ib3dseg
