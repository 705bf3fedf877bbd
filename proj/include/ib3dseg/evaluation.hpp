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
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "ib3dseg/model.hpp"
#include "ib3dseg/pipeline.hpp"
#include "ib3dseg/volume.hpp"

namespace ib3dseg {

/// Window origins along one axis: 0, p/2, 2(p/2), ... with the last window
/// clamped to end at n. Requires n >= p.
std::vector<std::int64_t> window_starts(std::int64_t n, std::int64_t p);

enum class WindowWeighting { Uniform, Gaussian };

/// Mean of sigmoid(logits) over all covering windows of size `patch` at a
/// stride of patch/2. Axes shorter than the patch are zero-padded at the end
/// and cropped again. Runs without recording gradients. Gaussian weighting
/// (sigma = patch/8 per axis) downweights window borders.
Volume sliding_window_predict(Network& net, const Volume& image, const Dims3& patch,
                              WindowWeighting weighting = WindowWeighting::Uniform);

/// Keep the largest 6-connected foreground component. Ties go to the
/// component whose first voxel in scan order comes first. An empty mask is
/// returned unchanged with a warning.
Volume largest_cc(const Volume& mask);

/// (2 sum(pg) + eps) / (sum(p^2) + sum(g^2) + eps) with eps = 1e-6 over binary masks.
double dsc(const Volume& p, const Volume& g);

/// Foreground voxels with at least one background 6-neighbour; voxels outside
/// the grid count as background.
std::vector<std::int64_t> surface_voxels(const Volume& mask);

/// Symmetric 95th-percentile surface distance in mm. Returns +infinity when
/// either mask is empty.
double hd95(const Volume& p, const Volume& g);

/// Everything needed to turn a raw image into a mask with a trained network.
struct PredictSettings {
  Modality modality = Modality::MR;
  Vec3 target_spacing{1.0, 1.0, 1.0};
  Dims3 patch_size{32, 32, 32};
  std::optional<CtStats> ct_stats;
  double threshold = 0.5;
  bool keep_largest_component = true;
  WindowWeighting weighting = WindowWeighting::Uniform;
};

/// Preprocess, sliding-window predict, threshold, keep the largest component
/// and resample (nearest) back onto the raw grid.
Volume predict_mask(Network& net, const Volume& raw_image, const PredictSettings& settings);

// ---------------------------------------------------------------------------
// Run evaluation and reports

struct CaseResult {
  std::string run;  // run directory name
  std::string model;
  int fold = 0;
  std::string case_id;
  std::string condition;
  double dsc = 0.0;
  double hd95 = 0.0;  // mm; meaningless when hd95_infinite
  bool hd95_infinite = false;
};

/// One model x condition cell. HD95 statistics skip infinite cases, which are
/// counted in hd95_excluded. Standard deviations are sample (n - 1) values.
struct SummaryRow {
  std::string model;
  std::string condition;
  int n = 0;
  double dsc_mean = 0.0;
  double dsc_std = 0.0;
  double hd95_mean = 0.0;
  double hd95_std = 0.0;
  int hd95_excluded = 0;
};

struct RunReport {
  std::vector<CaseResult> cases;
  std::vector<SummaryRow> summary;
};

struct EvalOptions {
  std::uint64_t seed = 0;                   // corruption noise streams
  std::optional<DatasetSpec> dataset;       // defaults to the run's manifest
  std::string prediction_dir;               // when set, masks are written here as raw volumes
};

/// Every case of a training run, predicted by the fold that held it out,
/// under every condition. Metrics are computed on the original grid.
/// Corruption noise depends on the case id and condition only, so different
/// models see identical inputs.
RunReport evaluate_run(const std::string& run_dir, const std::vector<CorruptionSpec>& conditions,
                       const EvalOptions& options = {});

/// Group rows by model and condition, in first-seen order.
std::vector<SummaryRow> summarize(const std::vector<CaseResult>& cases);

/// Concatenate the cases of several runs and re-summarize.
RunReport merge_reports(const std::vector<RunReport>& reports);

/// Writes cases.csv, summary.md and summary.json into out_dir.
void write_report(const RunReport& report, const std::string& out_dir);

}  // namespace ib3dseg
