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

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace ib3dseg {

using Dims3 = std::array<std::int64_t, 3>;   // (D, H, W) = (z, y, x)
using Vec3 = std::array<double, 3>;          // per-axis values in (z, y, x) order

enum class VolumeKind { Image, Label };

std::string_view to_string(VolumeKind kind);
VolumeKind parse_volume_kind(std::string_view s);

/// 3D scalar image on a regular grid, row-major over (z, y, x). Label volumes
/// hold small non-negative integers (0/1 for binary tasks) in the same buffer.
struct Volume {
  Dims3 dims{0, 0, 0};
  Vec3 spacing{1.0, 1.0, 1.0};  // mm
  Vec3 origin{0.0, 0.0, 0.0};   // mm
  VolumeKind kind = VolumeKind::Image;
  std::vector<float> data;

  Volume() = default;
  Volume(Dims3 dims, Vec3 spacing, VolumeKind kind = VolumeKind::Image, float fill = 0.0f);

  std::int64_t size() const { return dims[0] * dims[1] * dims[2]; }
  std::int64_t index(std::int64_t z, std::int64_t y, std::int64_t x) const { return (z * dims[1] + y) * dims[2] + x; }
  float& at(std::int64_t z, std::int64_t y, std::int64_t x) { return data[static_cast<std::size_t>(index(z, y, x))]; }
  float at(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return data[static_cast<std::size_t>(index(z, y, x))];
  }

  /// Throws unless dims are positive, data matches dims, spacing is positive
  /// and, for labels, every value is an integer in [0, 255].
  void validate() const;

  /// True when every value is 0 or 1.
  bool is_binary() const;

  bool operator==(const Volume&) const = default;
};

/// Uncompressed single-file NIfTI-1 (.nii) with datatype uint8, int16 or
/// float32 and three spatial dimensions. Spacing comes from pixdim[1..3];
/// scl_slope/scl_inter are applied when the slope is nonzero. Orientation
/// matrices are not applied (a warning is logged when they are not axis-aligned).
Volume read_nifti1(const std::string& path, VolumeKind kind = VolumeKind::Image);

/// Writes float32 images or uint8 labels, axis-aligned qform with the origin.
void write_nifti1(const Volume& volume, const std::string& path);

/// Native format: a little-endian blob (float32 images, uint8 labels) plus a
/// JSON sidecar {dims, spacing, origin, dtype, kind, byte_order}. `path` may
/// name either file; the other is found by swapping the .raw/.json extension.
void write_raw(const Volume& volume, const std::string& path);
Volume read_raw(const std::string& path);

/// Dispatch on extension: .nii uses NIfTI-1, .raw/.json the native format.
Volume read_volume(const std::string& path, VolumeKind kind = VolumeKind::Image);
void write_volume(const Volume& volume, const std::string& path);

std::string raw_blob_path(const std::string& path);
std::string raw_sidecar_path(const std::string& path);

}  // namespace ib3dseg
