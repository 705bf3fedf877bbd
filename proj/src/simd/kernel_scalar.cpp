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

#include <cmath>

#include "ib3dseg/simd/gemm.hpp"

namespace ib3dseg::simd::detail {
namespace {

template <typename T, int MR, int NR>
void scalar_microkernel(Index kc, const T* a, const T* b, T* c, Index ldc, bool load_c) {
  T acc[MR][NR];
  for (int i = 0; i < MR; ++i)
    for (int j = 0; j < NR; ++j) acc[i][j] = load_c ? c[i * ldc + j] : T(0);
  for (Index p = 0; p < kc; ++p) {
    const T* ap = a + p * MR;
    const T* bp = b + p * NR;
    for (int i = 0; i < MR; ++i)
      for (int j = 0; j < NR; ++j) acc[i][j] = std::fma(ap[i], bp[j], acc[i][j]);
  }
  for (int i = 0; i < MR; ++i)
    for (int j = 0; j < NR; ++j) c[i * ldc + j] = acc[i][j];
}

}  // namespace

KernelDesc<float> scalar_kernel_f32() { return {4, 8, &scalar_microkernel<float, 4, 8>}; }
KernelDesc<double> scalar_kernel_f64() { return {4, 8, &scalar_microkernel<double, 4, 8>}; }

}  // namespace ib3dseg::simd::detail
