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

#include <string_view>
#include <vector>

namespace ib3dseg::simd {

/// Instruction-set tiers with a dedicated GEMM micro-kernel.
enum class Isa { Scalar, Avx2, Avx512 };

std::string_view to_string(Isa isa);
Isa parse_isa(std::string_view name);

/// True when the tier was compiled in and the running CPU supports it.
bool isa_available(Isa isa);

/// Every tier usable on this machine, scalar first.
std::vector<Isa> available_isas();

/// The tier used by default dispatch. Initialised to the best available one,
/// or to IB3DSEG_ISA when that environment variable names an available tier.
Isa active_isa();

/// Override the dispatch tier; throws ParameterError if unavailable.
void set_active_isa(Isa isa);

}  // namespace ib3dseg::simd
