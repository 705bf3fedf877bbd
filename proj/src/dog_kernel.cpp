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

#include "ib3dseg/dog_kernel.hpp"

#include <cmath>
#include <string>

#include "ib3dseg/error.hpp"

namespace ib3dseg {

std::string_view to_string(Polarity p) { return p == Polarity::On ? "on" : "off"; }

std::string_view to_string(KernelGeometry g) {
  return g == KernelGeometry::Spherical ? "spherical" : "cylindrical";
}

Polarity parse_polarity(std::string_view s) {
  if (s == "on") return Polarity::On;
  if (s == "off") return Polarity::Off;
  throw ParameterError("unknown polarity '" + std::string(s) + "' (expected on|off)");
}

KernelGeometry parse_geometry(std::string_view s) {
  if (s == "spherical") return KernelGeometry::Spherical;
  if (s == "cylindrical") return KernelGeometry::Cylindrical;
  throw ParameterError("unknown geometry '" + std::string(s) + "' (expected spherical|cylindrical)");
}

double DoGParams::sigma() const { return sigma_for(r, gamma); }

void DoGParams::validate() const {
  if (k != 3 && k != 5 && k != 7 && k != 9)
    throw ParameterError("kernel size k must be one of 3, 5, 7, 9; got " + std::to_string(k));
  if (!(gamma > 0.0 && gamma < 1.0))
    throw ParameterError("gamma must lie in (0, 1); got " + std::to_string(gamma));
  if (!(r >= 1.0)) throw ParameterError("center radius r must be >= 1; got " + std::to_string(r));
  if (!(c >= 1.0)) throw ParameterError("balance constant c must be >= 1; got " + std::to_string(c));
}

double sigma_for(double r, double gamma) {
  if (!(gamma > 0.0 && gamma < 1.0))
    throw ParameterError("gamma must lie in (0, 1); got " + std::to_string(gamma));
  if (!(r > 0.0)) throw ParameterError("radius must be positive; got " + std::to_string(r));
  // Numerator and denominator both vanish as gamma -> 1 but stay nonzero for gamma < 1.
  const double num = 1.0 - gamma * gamma;
  const double den = -6.0 * std::log(gamma);
  return (r / gamma) * std::sqrt(num / den);
}

double dog_raw(double x, double y, double z, double sigma, double gamma) {
  const double r2 = x * x + y * y + z * z;
  const double s2 = sigma * sigma;
  return std::exp(-r2 / (2.0 * gamma * gamma * s2)) / (gamma * gamma * gamma) -
         std::exp(-r2 / (2.0 * s2));
}

double dog_raw_2d(double x, double y, double sigma, double gamma) {
  const double r2 = x * x + y * y;
  const double s2 = sigma * sigma;
  return std::exp(-r2 / (2.0 * gamma * gamma * s2)) / (gamma * gamma) - std::exp(-r2 / (2.0 * s2));
}

Kernel3D::Kernel3D(DoGParams params, std::vector<double> weights)
    : params_(params), weights_(std::move(weights)) {
  const auto k = static_cast<std::size_t>(params_.k);
  if (weights_.size() != k * k * k)
    throw ShapeError("kernel weight count does not match k^3");
}

double Kernel3D::positive_sum() const {
  double s = 0.0;
  for (double w : weights_)
    if (w > 0.0) s += w;
  return s;
}

double Kernel3D::negative_sum() const {
  double s = 0.0;
  for (double w : weights_)
    if (w < 0.0) s += w;
  return s;
}

double Kernel3D::total_sum() const {
  double s = 0.0;
  for (double w : weights_) s += w;
  return s;
}

Kernel3D Kernel3D::negated() const {
  DoGParams p = params_;
  p.polarity = p.polarity == Polarity::On ? Polarity::Off : Polarity::On;
  std::vector<double> w(weights_.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = -weights_[i];
  return Kernel3D(p, std::move(w));
}

namespace {

// Rescale the positive and negative entries of `w` to +c and -c.
void balance(std::vector<double>& w, double c) {
  double pos = 0.0, neg = 0.0;
  for (double v : w) {
    if (v > 0.0) pos += v;
    else if (v < 0.0) neg += v;
  }
  if (!(pos > 0.0) || !(neg < 0.0))
    throw DegenerateInputError(
        "DoG grid has no positive or no negative samples; kernel cannot be balanced");
  const double pos_scale = c / pos;
  const double neg_scale = c / -neg;
  for (double& v : w) v *= v > 0.0 ? pos_scale : neg_scale;
}

}  // namespace

Kernel3D synthesize(const DoGParams& params) {
  params.validate();
  const int k = params.k;
  const int half = (k - 1) / 2;
  const double sigma = params.sigma();
  std::vector<double> w(static_cast<std::size_t>(k) * k * k);

  if (params.geometry == KernelGeometry::Spherical) {
    for (int z = 0; z < k; ++z)
      for (int y = 0; y < k; ++y)
        for (int x = 0; x < k; ++x)
          w[(static_cast<std::size_t>(z) * k + y) * k + x] =
              dog_raw(x - half, y - half, z - half, sigma, params.gamma);
    balance(w, params.c);
  } else {
    std::vector<double> slice(static_cast<std::size_t>(k) * k);
    for (int y = 0; y < k; ++y)
      for (int x = 0; x < k; ++x)
        slice[static_cast<std::size_t>(y) * k + x] = dog_raw_2d(x - half, y - half, sigma, params.gamma);
    balance(slice, params.c);
    for (int z = 0; z < k; ++z)
      for (std::size_t i = 0; i < slice.size(); ++i) w[static_cast<std::size_t>(z) * k * k + i] = slice[i];
  }

  if (params.polarity == Polarity::Off)
    for (double& v : w) v = -v;
  return Kernel3D(params, std::move(w));
}

}  // namespace ib3dseg
