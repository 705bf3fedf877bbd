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

#include "ib3dseg/simd/isa.hpp"

namespace ib3dseg::simd {

using Index = std::int64_t;

enum class Trans { No, Yes };

/// Supplies the right-hand operand of a GEMM panel by panel, so that operands
/// such as convolution patch matrices never need to be materialised.
template <typename T>
class PanelPacker {
 public:
  virtual ~PanelPacker() = default;
  /// Write rows [p0, p0 + kc) and columns [j0, j0 + cols) of op(B) into dst
  /// as kc consecutive rows of nr values; columns >= cols must be zero.
  virtual void pack(Index p0, Index kc, Index j0, Index cols, int nr, T* dst) const = 0;
};

/// Row-major matrix operand, optionally transposed.
template <typename T>
class MatrixPacker final : public PanelPacker<T> {
 public:
  MatrixPacker(Trans trans, const T* data, Index ld) : trans_(trans), data_(data), ld_(ld) {}
  void pack(Index p0, Index kc, Index j0, Index cols, int nr, T* dst) const override;

 private:
  Trans trans_;
  const T* data_;
  Index ld_;
};

/// C = (accumulate ? C : 0) + op(A) * B, with op(A) of size m x k and B of
/// size k x n, all row-major.
///
/// Every output element is one fused multiply-add chain over p = 0..k-1 in
/// increasing order, starting from its prior value (or +0). Each tier (and
/// gemm_reference) therefore produces bit-identical results, and results do
/// not depend on the thread count.
void gemm(Isa isa, Trans ta, Index m, Index n, Index k, const float* a, Index lda,
          const PanelPacker<float>& b, float* c, Index ldc, bool accumulate);
void gemm(Trans ta, Index m, Index n, Index k, const float* a, Index lda, const PanelPacker<float>& b,
          float* c, Index ldc, bool accumulate);
/// Double precision always runs the blocked scalar path.
void gemm(Trans ta, Index m, Index n, Index k, const double* a, Index lda, const PanelPacker<double>& b,
          double* c, Index ldc, bool accumulate);

/// Plain matrix-matrix forms of the above.
void gemm(Isa isa, Trans ta, Trans tb, Index m, Index n, Index k, const float* a, Index lda,
          const float* b, Index ldb, float* c, Index ldc, bool accumulate);
void gemm(Trans ta, Trans tb, Index m, Index n, Index k, const float* a, Index lda, const float* b,
          Index ldb, float* c, Index ldc, bool accumulate);
void gemm(Trans ta, Trans tb, Index m, Index n, Index k, const double* a, Index lda,
          const double* b, Index ldb, double* c, Index ldc, bool accumulate);

/// Unblocked triple loop; the oracle the blocked paths are checked against.
template <typename T>
void gemm_reference(Trans ta, Trans tb, Index m, Index n, Index k, const T* a, Index lda,
                    const T* b, Index ldb, T* c, Index ldc, bool accumulate);

namespace detail {

/// Micro-kernel over packed panels: a is kc x MR (k-major), b is kc x NR
/// (k-major); c is an MR x NR tile with leading dimension ldc.
template <typename T>
using MicroKernel = void (*)(Index kc, const T* a, const T* b, T* c, Index ldc, bool load_c);

template <typename T>
struct KernelDesc {
  int mr;
  int nr;
  MicroKernel<T> fn;
};

KernelDesc<float> scalar_kernel_f32();
KernelDesc<double> scalar_kernel_f64();
#if defined(IB3DSEG_HAVE_AVX2)
KernelDesc<float> avx2_kernel_f32();
#endif
#if defined(IB3DSEG_HAVE_AVX512)
KernelDesc<float> avx512_kernel_f32();
#endif

}  // namespace detail

}  // namespace ib3dseg::simd
