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

#include <string>
#include <string_view>
#include <vector>

namespace ib3dseg {

enum class Polarity { On, Off };
enum class KernelGeometry { Spherical, Cylindrical };

std::string_view to_string(Polarity p);
std::string_view to_string(KernelGeometry g);
Polarity parse_polarity(std::string_view s);
KernelGeometry parse_geometry(std::string_view s);

/// Center-surround kernel parameters. `sigma` is derived from (r, gamma).
struct DoGParams {
  int k = 5;             // odd edge length, voxels
  double r = 2.0;        // center radius, voxels
  double gamma = 2.0 / 3.0;  // center-to-surround radius ratio
  double c = 1.0;        // absolute sum of each sign part
  Polarity polarity = Polarity::On;
  KernelGeometry geometry = KernelGeometry::Spherical;

  double sigma() const;

  /// Throws ParameterError unless k in {3,5,7,9}, 0<gamma<1, r>=1, c>=1.
  void validate() const;

  bool operator==(const DoGParams&) const = default;
};

/// Gaussian spread for a center of radius r:
///   sigma = (r / gamma) * sqrt((1 - gamma^2) / (-6 ln gamma)).
double sigma_for(double r, double gamma);

/// Unnormalized 3D difference of Gaussians with A_c = A_s = 1.
double dog_raw(double x, double y, double z, double sigma, double gamma);

/// Unnormalized 2D difference of Gaussians with A_c = A_s = 1.
double dog_raw_2d(double x, double y, double sigma, double gamma);

/// Fixed k*k*k weight cube, row-major over (z, y, x); index i maps to the
/// coordinate i - (k-1)/2 on each axis.
class Kernel3D {
 public:
  Kernel3D(DoGParams params, std::vector<double> weights);

  const DoGParams& params() const noexcept { return params_; }
  int size() const noexcept { return params_.k; }
  const std::vector<double>& weights() const noexcept { return weights_; }

  double at(int z, int y, int x) const {
    const int k = params_.k;
    return weights_[(static_cast<std::size_t>(z) * k + y) * k + x];
  }

  double positive_sum() const;
  double negative_sum() const;
  double total_sum() const;

  /// Element-wise negation with the opposite polarity.
  Kernel3D negated() const;

 private:
  DoGParams params_;
  std::vector<double> weights_;
};

/// Evaluate the DoG on the integer grid and rescale the positive and negative
/// parts independently to +c and -c. Off polarity negates the On kernel.
/// Cylindrical geometry repeats one balanced 2D slice along z, so its totals
/// are +-(k*c).
/// Throws DegenerateInputError when the raw grid lacks one of the two signs.
Kernel3D synthesize(const DoGParams& params);

}  // namespace ib3dseg
