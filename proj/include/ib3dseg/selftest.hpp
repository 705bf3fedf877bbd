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
#include <string>
#include <vector>

namespace ib3dseg {

/// One verification check: `value` is compared against `threshold`
/// (value <= threshold passes unless `at_least` is set).
struct CheckResult {
  std::string suite;
  std::string name;
  double value = 0.0;
  double threshold = 0.0;
  bool at_least = false;
  bool passed = false;
};

/// Balance, zero sum, octahedral symmetry and Off = -On for the four
/// (k, r, gamma) settings used by the IB blocks, plus sigma against its closed form.
std::vector<CheckResult> kernel_suite();

/// DSC against direct evaluation on every pair of 2x2x2 masks, HD95 against
/// an all-pairs surface distance oracle on random 8^3 masks, metric symmetry
/// and largest_cc idempotence.
std::vector<CheckResult> metric_suite(std::uint64_t seed, int hd95_trials = 20);

/// Finite-difference gradient checks in 64-bit mode for every differentiable
/// op, the loss and a tiny IB network, over `seeds` seeds starting at `seed`.
std::vector<CheckResult> gradient_suite(std::uint64_t seed, int seeds = 5);

/// Fixed-width PASS/FAIL table.
std::string format_checks(const std::vector<CheckResult>& checks);

bool all_passed(const std::vector<CheckResult>& checks);

}  // namespace ib3dseg
