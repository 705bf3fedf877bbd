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

#include "ib3dseg/simd/gemm.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "ib3dseg/error.hpp"

namespace ib3dseg::simd {
namespace {

constexpr Index kKC = 256;
constexpr Index kMCTarget = 128;
constexpr int kNCPanels = 16;
constexpr Index kParallelFlops = Index{1} << 18;

template <typename T>
void pack_a(Trans ta, const T* a, Index lda, Index i0, Index rows, Index p0, Index kc, int mr, T* dst) {
  for (Index r = 0; r < mr; ++r) {
    if (r < rows) {
      const Index i = i0 + r;
      if (ta == Trans::No) {
        const T* src = a + i * lda + p0;
        for (Index p = 0; p < kc; ++p) dst[p * mr + r] = src[p];
      } else {
        for (Index p = 0; p < kc; ++p) dst[p * mr + r] = a[(p0 + p) * lda + i];
      }
    } else {
      for (Index p = 0; p < kc; ++p) dst[p * mr + r] = T(0);
    }
  }
}

template <typename T>
void run_tile(const detail::KernelDesc<T>& kd, Index kc, const T* ap, const T* bp, T* c, Index ldc,
              Index rows, Index cols, bool load_c) {
  if (rows == kd.mr && cols == kd.nr) {
    kd.fn(kc, ap, bp, c, ldc, load_c);
    return;
  }
  T tile[8 * 32];
  for (Index i = 0; i < kd.mr; ++i)
    for (Index j = 0; j < kd.nr; ++j)
      tile[i * kd.nr + j] = (load_c && i < rows && j < cols) ? c[i * ldc + j] : T(0);
  kd.fn(kc, ap, bp, tile, kd.nr, load_c);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) c[i * ldc + j] = tile[i * kd.nr + j];
}

template <typename T>
std::vector<T>& panel_buffer() {
  thread_local std::vector<T> buf;
  return buf;
}

template <typename T>
void gemm_blocked(const detail::KernelDesc<T>& kd, Trans ta, Index m, Index n, Index k, const T* a, Index lda,
                  const PanelPacker<T>& b, T* c, Index ldc, bool accumulate) {
  if (m < 0 || n < 0 || k < 0) throw ShapeError("gemm: negative dimension");
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate)
      for (Index i = 0; i < m; ++i) std::fill_n(c + i * ldc, n, T(0));
    return;
  }

  const int mr = kd.mr;
  const int nr = kd.nr;
  const Index mc_max = std::max<Index>(mr, (kMCTarget / mr) * mr);
  const Index nc_max = static_cast<Index>(nr) * kNCPanels;
  const bool parallel = m * n * k >= kParallelFlops;

  if (m <= mc_max) {
    // All of op(A) fits one block: pack each B panel right before its use.
    const Index mpanels = (m + mr - 1) / mr;
    const Index npanels = (n + nr - 1) / nr;
    std::vector<T> apack(static_cast<std::size_t>(mpanels * mr * kKC));
    for (Index pc = 0; pc < k; pc += kKC) {
      const Index kc = std::min(kKC, k - pc);
      const bool load_c = accumulate || pc > 0;
      for (Index ip = 0; ip < mpanels; ++ip) {
        const Index i0 = ip * mr;
        pack_a(ta, a, lda, i0, std::min<Index>(mr, m - i0), pc, kc, mr, apack.data() + ip * mr * kc);
      }
#pragma omp parallel for schedule(static) if (parallel)
      for (Index jp = 0; jp < npanels; ++jp) {
        auto& panel = panel_buffer<T>();
        panel.resize(static_cast<std::size_t>(nr * kc));
        const Index j0 = jp * nr;
        const Index cols = std::min<Index>(nr, n - j0);
        b.pack(pc, kc, j0, cols, nr, panel.data());
        for (Index ip = 0; ip < mpanels; ++ip) {
          const Index i0 = ip * mr;
          run_tile(kd, kc, apack.data() + ip * mr * kc, panel.data(), c + i0 * ldc + j0, ldc,
                   std::min<Index>(mr, m - i0), cols, load_c);
        }
      }
    }
    return;
  }

  std::vector<T> apack(static_cast<std::size_t>(mc_max * kKC));
  std::vector<T> bpack(static_cast<std::size_t>(nc_max * kKC));
  for (Index jc = 0; jc < n; jc += nc_max) {
    const Index nc = std::min(nc_max, n - jc);
    const Index npanels = (nc + nr - 1) / nr;
    for (Index pc = 0; pc < k; pc += kKC) {
      const Index kc = std::min(kKC, k - pc);
      const bool load_c = accumulate || pc > 0;

#pragma omp parallel for schedule(static) if (parallel)
      for (Index jp = 0; jp < npanels; ++jp) {
        const Index j0 = jc + jp * nr;
        b.pack(pc, kc, j0, std::min<Index>(nr, n - j0), nr, bpack.data() + jp * nr * kc);
      }

      for (Index ic = 0; ic < m; ic += mc_max) {
        const Index mc = std::min(mc_max, m - ic);
        const Index mpanels = (mc + mr - 1) / mr;
        for (Index ip = 0; ip < mpanels; ++ip) {
          const Index i0 = ic + ip * mr;
          pack_a(ta, a, lda, i0, std::min<Index>(mr, m - i0), pc, kc, mr, apack.data() + ip * mr * kc);
        }

#pragma omp parallel for schedule(static) if (parallel)
        for (Index jp = 0; jp < npanels; ++jp) {
          const Index j0 = jc + jp * nr;
          const Index cols = std::min<Index>(nr, n - j0);
          const T* bp = bpack.data() + jp * nr * kc;
          for (Index ip = 0; ip < mpanels; ++ip) {
            const Index i0 = ic + ip * mr;
            const Index rows = std::min<Index>(mr, m - i0);
            run_tile(kd, kc, apack.data() + ip * mr * kc, bp, c + i0 * ldc + j0, ldc, rows, cols, load_c);
          }
        }
      }
    }
  }
}

detail::KernelDesc<float> kernel_for(Isa isa) {
  switch (isa) {
    case Isa::Scalar: return detail::scalar_kernel_f32();
    case Isa::Avx2:
#if defined(IB3DSEG_HAVE_AVX2)
      if (isa_available(Isa::Avx2)) return detail::avx2_kernel_f32();
#endif
      break;
    case Isa::Avx512:
#if defined(IB3DSEG_HAVE_AVX512)
      if (isa_available(Isa::Avx512)) return detail::avx512_kernel_f32();
#endif
      break;
  }
  throw ParameterError("gemm: instruction set '" + std::string(to_string(isa)) + "' is not available");
}

}  // namespace

template <typename T>
void MatrixPacker<T>::pack(Index p0, Index kc, Index j0, Index cols, int nr, T* dst) const {
  if (trans_ == Trans::No) {
    for (Index p = 0; p < kc; ++p) {
      const T* src = data_ + (p0 + p) * ld_ + j0;
      T* out = dst + p * nr;
      Index j = 0;
      for (; j < cols; ++j) out[j] = src[j];
      for (; j < nr; ++j) out[j] = T(0);
    }
  } else {
    for (Index j = 0; j < nr; ++j) {
      if (j < cols) {
        const T* src = data_ + (j0 + j) * ld_ + p0;
        for (Index p = 0; p < kc; ++p) dst[p * nr + j] = src[p];
      } else {
        for (Index p = 0; p < kc; ++p) dst[p * nr + j] = T(0);
      }
    }
  }
}

template class MatrixPacker<float>;
template class MatrixPacker<double>;

void gemm(Isa isa, Trans ta, Index m, Index n, Index k, const float* a, Index lda, const PanelPacker<float>& b,
          float* c, Index ldc, bool accumulate) {
  gemm_blocked(kernel_for(isa), ta, m, n, k, a, lda, b, c, ldc, accumulate);
}

void gemm(Trans ta, Index m, Index n, Index k, const float* a, Index lda, const PanelPacker<float>& b, float* c,
          Index ldc, bool accumulate) {
  gemm_blocked(kernel_for(active_isa()), ta, m, n, k, a, lda, b, c, ldc, accumulate);
}

void gemm(Trans ta, Index m, Index n, Index k, const double* a, Index lda, const PanelPacker<double>& b,
          double* c, Index ldc, bool accumulate) {
  gemm_blocked(detail::scalar_kernel_f64(), ta, m, n, k, a, lda, b, c, ldc, accumulate);
}

void gemm(Isa isa, Trans ta, Trans tb, Index m, Index n, Index k, const float* a, Index lda, const float* b,
          Index ldb, float* c, Index ldc, bool accumulate) {
  gemm(isa, ta, m, n, k, a, lda, MatrixPacker<float>(tb, b, ldb), c, ldc, accumulate);
}

void gemm(Trans ta, Trans tb, Index m, Index n, Index k, const float* a, Index lda, const float* b, Index ldb,
          float* c, Index ldc, bool accumulate) {
  gemm(active_isa(), ta, m, n, k, a, lda, MatrixPacker<float>(tb, b, ldb), c, ldc, accumulate);
}

void gemm(Trans ta, Trans tb, Index m, Index n, Index k, const double* a, Index lda, const double* b, Index ldb,
          double* c, Index ldc, bool accumulate) {
  gemm(ta, m, n, k, a, lda, MatrixPacker<double>(tb, b, ldb), c, ldc, accumulate);
}

template <typename T>
void gemm_reference(Trans ta, Trans tb, Index m, Index n, Index k, const T* a, Index lda,
                    const T* b, Index ldb, T* c, Index ldc, bool accumulate) {
  for (Index i = 0; i < m; ++i) {
    for (Index j = 0; j < n; ++j) {
      T acc = accumulate ? c[i * ldc + j] : T(0);
      for (Index p = 0; p < k; ++p) {
        const T av = ta == Trans::No ? a[i * lda + p] : a[p * lda + i];
        const T bv = tb == Trans::No ? b[p * ldb + j] : b[j * ldb + p];
        acc = std::fma(av, bv, acc);
      }
      c[i * ldc + j] = acc;
    }
  }
}

template void gemm_reference<float>(Trans, Trans, Index, Index, Index, const float*, Index,
                                    const float*, Index, float*, Index, bool);
template void gemm_reference<double>(Trans, Trans, Index, Index, Index, const double*, Index,
                                     const double*, Index, double*, Index, bool);

}  // namespace ib3dseg::simd
