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
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ib3dseg/random.hpp"
#include "json.hpp"
#include "ib3dseg/volume.hpp"

namespace ib3dseg {

enum class Interp { Trilinear, Nearest };
enum class Modality { MR, CT };

std::string_view to_string(Modality m);
Modality parse_modality(std::string_view s);

// ---------------------------------------------------------------------------
// Resampling

/// Grid size after resampling: round(dims * spacing / target), at least 1.
Dims3 resampled_dims(const Dims3& dims, const Vec3& spacing, const Vec3& target);

/// Resample a row-major grid so that voxel centers map linearly between the
/// grids: src = (i + 0.5) * n_src / n_dst - 0.5, clamped to the edges.
std::vector<float> resize_grid(const std::vector<float>& src, const Dims3& src_dims, const Dims3& dst_dims,
                               Interp mode);

/// Resample to a target spacing. Labels should use Nearest.
Volume resample(const Volume& v, const Vec3& target_spacing, Interp mode);

/// Resample onto an explicit grid covering the same physical extent.
Volume resample_to_dims(const Volume& v, const Dims3& dims, Interp mode);

// ---------------------------------------------------------------------------
// Intensity normalization

/// Linear interpolation between order statistics; q in [0, 100].
double percentile(std::vector<double> values, double q);

/// z-score over the whole volume. Throws DegenerateInputError on zero variance.
Volume normalize_mr(const Volume& v);

struct CtStats {
  double clip_lo = 0.0;  // 0.5th percentile of pooled foreground
  double clip_hi = 0.0;  // 99.5th percentile
  double mean = 0.0;
  double std = 1.0;
};

/// Statistics of the foreground (label > 0) voxels pooled over the given
/// (image, label) pairs. Throws DegenerateInputError on an empty foreground
/// or zero spread.
CtStats compute_ct_stats(const std::vector<std::pair<const Volume*, const Volume*>>& cases);

/// Clip to [clip_lo, clip_hi], then (x - mean) / std.
Volume normalize_ct(const Volume& v, const CtStats& stats);

// ---------------------------------------------------------------------------
// Dataset description

struct DatasetCase {
  std::string id;
  std::string image;  // path, relative to the manifest directory unless absolute
  std::string label;
};

struct DatasetSpec {
  std::vector<DatasetCase> cases;
  Modality modality = Modality::MR;
  Vec3 target_spacing{1.0, 1.0, 1.0};
  Dims3 patch_size{32, 32, 32};
  std::optional<CtStats> ct_stats;
  std::string base_dir;  // directory the case paths are relative to

  std::string image_path(std::size_t i) const;
  std::string label_path(std::size_t i) const;
  void validate() const;
};

/// Manifest JSON: {cases:[{id,image,label}], modality, target_spacing, patch_size[, ct_stats]}.
DatasetSpec load_manifest(const std::string& path);
/// With absolute_paths, case paths are resolved against base_dir first.
void save_manifest(const DatasetSpec& spec, const std::string& path, bool absolute_paths = false);
/// `origin` names the source in error messages.
DatasetSpec manifest_from_json(const nlohmann::json& j, const std::string& base_dir, const std::string& origin);
nlohmann::ordered_json manifest_to_json(const DatasetSpec& spec, bool absolute_paths = false);

/// Resample to the target spacing (trilinear) and normalize for the modality.
/// CT requires stats.
Volume preprocess_image(const Volume& raw, Modality modality, const Vec3& target_spacing,
                        const std::optional<CtStats>& ct_stats);
/// Resample a label to the target spacing (nearest).
Volume preprocess_label(const Volume& raw, const Vec3& target_spacing);

// ---------------------------------------------------------------------------
// Patch sampling and augmentation

/// Linear indices of foreground and background voxels of a label volume.
struct SamplingIndex {
  std::vector<std::int64_t> foreground;
  std::vector<std::int64_t> background;
};
SamplingIndex build_sampling_index(const Volume& label);

struct Patch {
  Volume image;
  Volume label;
  bool foreground_centered = false;
  Dims3 center{0, 0, 0};  // chosen voxel in volume coordinates
};

/// With probability 1/2 center on a uniformly drawn foreground voxel, else on
/// a background voxel (the other class is used when one is empty). The window
/// is clamped to fit; axes shorter than the patch are zero-padded
/// symmetrically.
Patch sample_patch(const Volume& image, const Volume& label, const Dims3& patch_size, Rng& rng,
                   const SamplingIndex* index = nullptr);

struct AugmentConfig {
  double p_rotate = 0.2;          // 90-degree in-plane (y, x) rotation
  double p_flip = 0.5;            // per axis
  double p_scale = 0.2;
  double scale_range = 0.15;      // factor in [1 - r, 1 + r]
  double p_noise = 0.15;
  double noise_sigma_max = 0.1;   // normalized units
  double p_blur = 0.2;
  double blur_sigma_lo = 0.5;     // voxels
  double blur_sigma_hi = 1.0;
  double p_gamma = 0.15;
  double gamma_lo = 0.7;
  double gamma_hi = 1.5;

  static AugmentConfig none();
};

/// Geometric transforms are applied to both volumes (nearest for the label);
/// intensity transforms to the image only.
void augment(Volume& image, Volume& label, Rng& rng, const AugmentConfig& config);

void flip_axis(Volume& v, int axis);
/// Rotate by quarter turns in the (y, x) plane; requires H == W for odd turns.
void rotate90(Volume& v, int quarter_turns);

// ---------------------------------------------------------------------------
// Corruption

enum class CorruptionKind { None, GaussianBlur, RandomGaussianNoise };

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::None;
  double sigma = 0.0;       // mm for blur, raw intensity units for noise
  std::uint64_t seed = 0;

  /// "none", "blur:2", "noise:45".
  std::string name() const;
  static CorruptionSpec parse(std::string_view text, std::uint64_t seed = 0);
  bool operator==(const CorruptionSpec&) const = default;
};

/// Separable Gaussian with per-axis sigma in voxels, normalized kernel
/// truncated at 4 sigma, replicated edges. Axes with sigma 0 are untouched.
Volume gaussian_blur(const Volume& v, const Vec3& sigma_voxels);

/// Applied to raw volumes before any normalization. Blur converts sigma from
/// mm to voxels per axis; noise adds seeded i.i.d. N(0, sigma).
Volume corrupt(const Volume& v, const CorruptionSpec& spec);

// ---------------------------------------------------------------------------
// Synthetic data

struct PhantomConfig {
  Dims3 dims{64, 64, 64};
  Vec3 spacing{1.0, 1.0, 1.0};
  double min_fraction = 0.02;       // organ volume fraction bounds
  double max_fraction = 0.20;
  double background = 300.0;        // mean background intensity
  double contrast = 200.0;          // minimum organ minus background mean
  double texture = 25.0;            // amplitude of smooth background texture
  double bias = 0.15;               // relative amplitude of the bias field
  double noise_sigma = 15.0;
  int distractors = 1;              // small bright blobs outside the organ
};

/// Random rotated ellipsoid organ with bias field, texture and noise. The
/// label is the ellipsoid mask. Deterministic per seed.
std::pair<Volume, Volume> phantom(std::uint64_t seed, const PhantomConfig& config = {});

}  // namespace ib3dseg
