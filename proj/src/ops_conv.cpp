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

#include <algorithm>
#include <string>
#include <vector>

#include "ib3dseg/error.hpp"
#include "ib3dseg/ops.hpp"
#include "ib3dseg/simd/gemm.hpp"

namespace ib3dseg::ops {

using simd::Trans;

Index conv_output_size(Index in, int kernel, int stride, int padding) {
  if (stride < 1) throw ShapeError("stride must be >= 1");
  const Index span = in + 2 * padding - kernel;
  if (span < 0)
    throw ShapeError("window of size " + std::to_string(kernel) + " does not fit input extent " +
                     std::to_string(in) + " with padding " + std::to_string(padding));
  return span / stride + 1;
}

namespace {

struct Geometry {
  Index channels, d, h, w;   // image side
  int k, stride, pad;
  Index od, oh, ow;          // window-grid side
  Index rows() const { return channels * k * k * k; }
  Index cols() const { return od * oh * ow; }
  Index image_size() const { return d * h * w; }
};

// Patch matrix of one sample: row ((c*k + kz)*k + ky)*k + kx, column
// (oz*oh + oy)*ow + ox. The packers below hand it to the GEMM panel by panel
// without materialising it.

constexpr int kMaxSegments = 600;

struct RowSegment {
  Index offset;  // position within the panel
  Index oz, oy, ox;
  Index len;
};

// Split columns [j0, j0 + cols) of the window grid into runs along x.
inline int split_segments(const Geometry& g, Index j0, Index cols, RowSegment* out, int max_segments) {
  int n = 0;
  Index j = j0;
  const Index end = j0 + cols;
  while (j < end && n < max_segments) {
    const Index ox = j % g.ow;
    const Index oy = (j / g.ow) % g.oh;
    const Index oz = j / (g.ow * g.oh);
    const Index len = std::min(g.ow - ox, end - j);
    out[n++] = {j - j0, oz, oy, ox, len};
    j += len;
  }
  return n;
}

// Fill dst[0..len) (with element stride `step`) from one image row for the
// window-grid run starting at ox0.
template <typename T>
inline void gather_run(const Geometry& g, const T* row, Index ox0, Index len, Index kx, T* dst, Index step) {
  if (g.stride == 1) {
    const Index lo = std::clamp<Index>(g.pad - kx - ox0, 0, len);
    const Index hi = std::clamp<Index>(g.w + g.pad - kx - ox0, lo, len);
    const T* src = row + ox0 - g.pad + kx;
    if (step == 1) {
      std::fill_n(dst, lo, T(0));
      std::copy(src + lo, src + hi, dst + lo);
      std::fill(dst + hi, dst + len, T(0));
    } else {
      for (Index i = 0; i < lo; ++i) dst[i * step] = T(0);
      for (Index i = lo; i < hi; ++i) dst[i * step] = src[i];
      for (Index i = hi; i < len; ++i) dst[i * step] = T(0);
    }
    return;
  }
  for (Index i = 0; i < len; ++i) {
    const Index ix = (ox0 + i) * g.stride - g.pad + kx;
    dst[i * step] = (ix >= 0 && ix < g.w) ? row[ix] : T(0);
  }
}

// op(B) = patch matrix (rows = taps, columns = window positions).
template <typename T>
class PatchPacker final : public simd::PanelPacker<T> {
 public:
  PatchPacker(const Geometry& g, const T* image) : g_(g), image_(image) {}

  void pack(Index p0, Index kc, Index j0, Index cols, int nr, T* dst) const override {
    RowSegment segs[40];
    const int nseg = split_segments(g_, j0, cols, segs, 40);
    const Index k = g_.k;
    for (Index p = 0; p < kc; ++p) {
      const Index row = p0 + p;
      const Index kx = row % k;
      const Index ky = (row / k) % k;
      const Index kz = (row / (k * k)) % k;
      const Index c = row / (k * k * k);
      const T* xc = image_ + c * g_.image_size();
      T* out = dst + p * nr;
      for (int si = 0; si < nseg; ++si) {
        const RowSegment& sg = segs[si];
        const Index iz = sg.oz * g_.stride - g_.pad + kz;
        const Index iy = sg.oy * g_.stride - g_.pad + ky;
        if (iz < 0 || iz >= g_.d || iy < 0 || iy >= g_.h) {
          std::fill_n(out + sg.offset, sg.len, T(0));
          continue;
        }
        gather_run(g_, xc + (iz * g_.h + iy) * g_.w, sg.ox, sg.len, kx, out + sg.offset, 1);
      }
      std::fill(out + cols, out + nr, T(0));
    }
  }

 private:
  Geometry g_;
  const T* image_;
};

// op(B) = transposed patch matrix (rows = window positions, columns = taps).
template <typename T>
class PatchTransposedPacker final : public simd::PanelPacker<T> {
 public:
  PatchTransposedPacker(const Geometry& g, const T* image) : g_(g), image_(image) {}

  void pack(Index p0, Index kc, Index j0, Index cols, int nr, T* dst) const override {
    RowSegment segs[kMaxSegments];
    if (kc > kMaxSegments - 2) throw ShapeError("patch packer: k-block too large");
    const int nseg = split_segments(g_, p0, kc, segs, kMaxSegments);
    const Index k = g_.k;
    for (Index jj = 0; jj < nr; ++jj) {
      if (jj >= cols) {
        for (Index p = 0; p < kc; ++p) dst[p * nr + jj] = T(0);
        continue;
      }
      const Index tap = j0 + jj;
      const Index kx = tap % k;
      const Index ky = (tap / k) % k;
      const Index kz = (tap / (k * k)) % k;
      const Index c = tap / (k * k * k);
      const T* xc = image_ + c * g_.image_size();
      for (int si = 0; si < nseg; ++si) {
        const RowSegment& sg = segs[si];
        T* out = dst + sg.offset * nr + jj;
        const Index iz = sg.oz * g_.stride - g_.pad + kz;
        const Index iy = sg.oy * g_.stride - g_.pad + ky;
        if (iz < 0 || iz >= g_.d || iy < 0 || iy >= g_.h) {
          for (Index i = 0; i < sg.len; ++i) out[i * nr] = T(0);
          continue;
        }
        gather_run(g_, xc + (iz * g_.h + iy) * g_.w, sg.ox, sg.len, kx, out, nr);
      }
    }
  }

 private:
  Geometry g_;
  const T* image_;
};

// Scatter-add of a patch matrix back onto the image (adjoint of im2col).
template <typename T>
void col2im(const Geometry& g, const T* col, T* x) {
  const Index k = g.k;
  const Index k3 = k * k * k;
#pragma omp parallel for schedule(static) if (g.rows() * g.cols() > (1 << 16))
  for (Index c = 0; c < g.channels; ++c) {
    T* xc = x + c * g.image_size();
    for (Index r = 0; r < k3; ++r) {
      const Index kx = r % k;
      const Index ky = (r / k) % k;
      const Index kz = r / (k * k);
      const T* src = col + (c * k3 + r) * g.cols();
      for (Index oz = 0; oz < g.od; ++oz) {
        const Index iz = oz * g.stride - g.pad + kz;
        if (iz < 0 || iz >= g.d) continue;
        for (Index oy = 0; oy < g.oh; ++oy) {
          const Index iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          const T* s = src + (oz * g.oh + oy) * g.ow;
          T* dst = xc + (iz * g.h + iy) * g.w;
          for (Index ox = 0; ox < g.ow; ++ox) {
            const Index ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) dst[ix] += s[ox];
          }
        }
      }
    }
  }
}

bool is_pointwise(const Geometry& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

void require_rank5(const Shape& s, const char* what) {
  if (s.size() != 5) throw ShapeError(std::string(what) + " must be rank 5, got " + shape_str(s));
}

template <typename T>
void gemm(Trans ta, Index m, Index n, Index k, const T* a, Index lda, const simd::PanelPacker<T>& b, T* c,
          Index ldc, bool accumulate) {
  simd::gemm(ta, m, n, k, a, lda, b, c, ldc, accumulate);
}

// Input gradient of a stride-1 convolution, computed as the forward
// convolution of dy with the spatially flipped, channel-transposed kernel.
template <typename T>
void conv_input_grad_stride1(const Geometry& g, Index cout, const T* weight, const T* dy, T* dx) {
  const Index k = g.k;
  const Index k3 = k * k * k;
  std::vector<T> flipped(static_cast<std::size_t>(g.channels * cout * k3));
  for (Index co = 0; co < cout; ++co)
    for (Index ci = 0; ci < g.channels; ++ci)
      for (Index t = 0; t < k3; ++t)
        flipped[static_cast<std::size_t>((ci * cout + co) * k3 + t)] = weight[(co * g.channels + ci) * k3 + (k3 - 1 - t)];
  const Geometry back{cout, g.od, g.oh, g.ow, g.k, 1, g.k - 1 - g.pad, g.d, g.h, g.w};
  gemm(Trans::No, g.channels, g.image_size(), cout * k3, flipped.data(), cout * k3, PatchPacker<T>(back, dy), dx,
       g.image_size(), true);
}

}  // namespace

template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                 int padding) {
  require_rank5(input.shape(), "conv3d input");
  require_rank5(weight.shape(), "conv3d weight");
  const Index n = input.dim(0), cin = input.dim(1);
  const Index cout = weight.dim(0);
  const int k = static_cast<int>(weight.dim(2));
  if (weight.dim(1) != cin || weight.dim(3) != k || weight.dim(4) != k)
    throw ShapeError("conv3d weight " + shape_str(weight.shape()) + " incompatible with input " +
                     shape_str(input.shape()));
  if (padding < 0) throw ShapeError("conv3d padding must be >= 0");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout))
    throw ShapeError("conv3d bias " + shape_str(bias.shape()) + " does not match " + std::to_string(cout) +
                     " output channels");

  const Geometry g{cin,
                   input.dim(2),
                   input.dim(3),
                   input.dim(4),
                   k,
                   stride,
                   padding,
                   conv_output_size(input.dim(2), k, stride, padding),
                   conv_output_size(input.dim(3), k, stride, padding),
                   conv_output_size(input.dim(4), k, stride, padding)};
  const Index kdim = g.rows();
  const Index p = g.cols();
  const Index in_sample = cin * g.image_size();

  Tensor<T> out({n, cout, g.od, g.oh, g.ow});
  for (Index s = 0; s < n; ++s) {
    T* o = out.mutable_data() + s * cout * p;
    if (bias.defined())
      for (Index co = 0; co < cout; ++co) std::fill_n(o + co * p, p, bias.data()[co]);
    const T* x = input.data() + s * in_sample;
    if (is_pointwise(g))
      gemm(Trans::No, cout, p, kdim, weight.data(), kdim, simd::MatrixPacker<T>(Trans::No, x, p), o, p,
           bias.defined());
    else
      gemm(Trans::No, cout, p, kdim, weight.data(), kdim, PatchPacker<T>(g, x), o, p, bias.defined());
  }

  if (Tape<T>* tape = detail::recording_tape<T>({&input, &weight, &bias})) {
    out.set_requires_grad(true);
    tape->record([xn = input.node(), wn = weight.node(), bn = bias.node(), on = out.node(), g, n, cout]() {
      if (on->grad.empty()) return;
      const Index kdim = g.rows();
      const Index p = g.cols();
      const Index in_sample = g.channels * g.image_size();
      const T* dy = on->grad.data();

      if (bn && bn->requires_grad) {
        auto& db = detail::grad_of<T>(*bn);
        for (Index s = 0; s < n; ++s)
          for (Index co = 0; co < cout; ++co) {
            const T* row = dy + (s * cout + co) * p;
            T acc = db[co];
            for (Index i = 0; i < p; ++i) acc += row[i];
            db[co] = acc;
          }
      }
      if (wn->requires_grad) {
        auto& dw = detail::grad_of<T>(*wn);
        for (Index s = 0; s < n; ++s) {
          const T* x = xn->data.data() + s * in_sample;
          if (is_pointwise(g))
            gemm(Trans::No, cout, kdim, p, dy + s * cout * p, p, simd::MatrixPacker<T>(Trans::Yes, x, p), dw.data(),
                 kdim, true);
          else
            gemm(Trans::No, cout, kdim, p, dy + s * cout * p, p, PatchTransposedPacker<T>(g, x), dw.data(), kdim,
                 true);
        }
      }
      if (xn->requires_grad) {
        auto& dx = detail::grad_of<T>(*xn);
        std::vector<T> col;
        for (Index s = 0; s < n; ++s) {
          T* dxs = dx.data() + s * in_sample;
          const T* dys = dy + s * cout * p;
          if (is_pointwise(g)) {
            gemm(Trans::Yes, kdim, p, cout, wn->data.data(), kdim, simd::MatrixPacker<T>(Trans::No, dys, p), dxs, p,
                 true);
          } else if (g.stride == 1 && g.pad <= g.k - 1) {
            conv_input_grad_stride1(g, cout, wn->data.data(), dys, dxs);
          } else {
            col.resize(static_cast<std::size_t>(kdim * p));
            gemm(Trans::Yes, kdim, p, cout, wn->data.data(), kdim, simd::MatrixPacker<T>(Trans::No, dys, p),
                 col.data(), p, false);
            col2im(g, col.data(), dxs);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> transposed_conv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                            int stride) {
  require_rank5(input.shape(), "transposed_conv3d input");
  require_rank5(weight.shape(), "transposed_conv3d weight");
  const Index n = input.dim(0), cin = input.dim(1);
  const Index cout = weight.dim(1);
  const int k = static_cast<int>(weight.dim(2));
  if (weight.dim(0) != cin || weight.dim(3) != k || weight.dim(4) != k)
    throw ShapeError("transposed_conv3d weight " + shape_str(weight.shape()) + " incompatible with input " +
                     shape_str(input.shape()));
  if (stride < 1) throw ShapeError("transposed_conv3d stride must be >= 1");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout))
    throw ShapeError("transposed_conv3d bias does not match output channels");

  // Geometry of the equivalent forward convolution: the transposed output is
  // its image side, the transposed input its window grid.
  const Geometry g{cout,
                   (input.dim(2) - 1) * stride + k,
                   (input.dim(3) - 1) * stride + k,
                   (input.dim(4) - 1) * stride + k,
                   k,
                   stride,
                   0,
                   input.dim(2),
                   input.dim(3),
                   input.dim(4)};
  const Index kdim = g.rows();  // cout * k^3
  const Index p = g.cols();     // input voxels
  const Index out_sample = cout * g.image_size();

  Tensor<T> out({n, cout, g.d, g.h, g.w});
  std::vector<T> col(static_cast<std::size_t>(kdim * p));
  for (Index s = 0; s < n; ++s) {
    T* o = out.mutable_data() + s * out_sample;
    if (bias.defined())
      for (Index co = 0; co < cout; ++co) std::fill_n(o + co * g.image_size(), g.image_size(), bias.data()[co]);
    gemm(Trans::Yes, kdim, p, cin, weight.data(), kdim,
         simd::MatrixPacker<T>(Trans::No, input.data() + s * cin * p, p), col.data(), p, false);
    col2im(g, col.data(), o);
  }

  if (Tape<T>* tape = detail::recording_tape<T>({&input, &weight, &bias})) {
    out.set_requires_grad(true);
    tape->record([xn = input.node(), wn = weight.node(), bn = bias.node(), on = out.node(), g, n, cin]() {
      if (on->grad.empty()) return;
      const Index kdim = g.rows();
      const Index p = g.cols();
      const Index out_sample = g.channels * g.image_size();
      const T* dy = on->grad.data();
      if (bn && bn->requires_grad) {
        auto& db = detail::grad_of<T>(*bn);
        for (Index s = 0; s < n; ++s)
          for (Index co = 0; co < g.channels; ++co) {
            const T* plane = dy + s * out_sample + co * g.image_size();
            T acc = db[co];
            for (Index i = 0; i < g.image_size(); ++i) acc += plane[i];
            db[co] = acc;
          }
      }
      for (Index s = 0; s < n; ++s) {
        const PatchPacker<T> patches(g, dy + s * out_sample);
        if (wn->requires_grad) {
          auto& dw = detail::grad_of<T>(*wn);
          gemm(Trans::No, cin, kdim, p, xn->data.data() + s * cin * p, p,
               PatchTransposedPacker<T>(g, dy + s * out_sample), dw.data(), kdim, true);
        }
        if (xn->requires_grad) {
          auto& dx = detail::grad_of<T>(*xn);
          gemm(Trans::No, cin, p, kdim, wn->data.data(), kdim, patches, dx.data() + s * cin * p, p, true);
        }
      }
    });
  }
  return out;
}

template Tensor<float> conv3d(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, int, int);
template Tensor<double> conv3d(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&, int, int);
template Tensor<float> transposed_conv3d(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, int);
template Tensor<double> transposed_conv3d(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                                          int);

}  // namespace ib3dseg::ops
