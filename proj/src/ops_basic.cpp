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
#include <cmath>
#include <string>
#include <vector>

#include "ib3dseg/error.hpp"
#include "ib3dseg/ops.hpp"

namespace ib3dseg::ops {
namespace {

void require_rank5(const Shape& s, const char* what) {
  if (s.size() != 5) throw ShapeError(std::string(what) + " must be rank 5, got " + shape_str(s));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

}  // namespace

template <typename T>
Tensor<T> maxpool3d(const Tensor<T>& input, int window, int stride) {
  require_rank5(input.shape(), "maxpool3d input");
  if (window < 1) throw ShapeError("maxpool3d window must be >= 1");
  const Index n = input.dim(0), c = input.dim(1);
  const Index d = input.dim(2), h = input.dim(3), w = input.dim(4);
  if (window > d || window > h || window > w)
    throw ShapeError("maxpool3d window " + std::to_string(window) + " larger than spatial dims of " +
                     shape_str(input.shape()));
  const Index od = conv_output_size(d, window, stride, 0);
  const Index oh = conv_output_size(h, window, stride, 0);
  const Index ow = conv_output_size(w, window, stride, 0);

  Tensor<T> out({n, c, od, oh, ow});
  std::vector<Index> argmax(static_cast<std::size_t>(out.numel()));
  const T* x = input.data();
  T* y = out.mutable_data();
#pragma omp parallel for schedule(static) if (out.numel() > (1 << 15))
  for (Index plane = 0; plane < n * c; ++plane) {
    const Index in_base = plane * d * h * w;
    const Index out_base = plane * od * oh * ow;
    for (Index oz = 0; oz < od; ++oz)
      for (Index oy = 0; oy < oh; ++oy)
        for (Index ox = 0; ox < ow; ++ox) {
          Index best = in_base + ((oz * stride) * h + oy * stride) * w + ox * stride;
          T best_v = x[best];
          for (Index z = oz * stride; z < oz * stride + window; ++z)
            for (Index yy = oy * stride; yy < oy * stride + window; ++yy)
              for (Index xx = ox * stride; xx < ox * stride + window; ++xx) {
                const Index idx = in_base + (z * h + yy) * w + xx;
                if (x[idx] > best_v) {
                  best_v = x[idx];
                  best = idx;
                }
              }
          const Index o = out_base + (oz * oh + oy) * ow + ox;
          y[o] = best_v;
          argmax[static_cast<std::size_t>(o)] = best;
        }
  }

  if (Tape<T>* tape = detail::recording_tape<T>({&input})) {
    out.set_requires_grad(true);
    tape->record([xn = input.node(), on = out.node(), argmax = std::move(argmax)]() {
      if (on->grad.empty()) return;
      auto& dx = detail::grad_of<T>(*xn);
      for (std::size_t o = 0; o < argmax.size(); ++o) dx[static_cast<std::size_t>(argmax[o])] += on->grad[o];
    });
  }
  return out;
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& input, int factor) {
  require_rank5(input.shape(), "upsample_nearest input");
  if (factor < 1) throw ShapeError("upsample factor must be >= 1");
  const Index n = input.dim(0), c = input.dim(1);
  const Index d = input.dim(2), h = input.dim(3), w = input.dim(4);
  const Index od = d * factor, oh = h * factor, ow = w * factor;
  Tensor<T> out({n, c, od, oh, ow});
  const T* x = input.data();
  T* y = out.mutable_data();
  for (Index plane = 0; plane < n * c; ++plane)
    for (Index z = 0; z < od; ++z)
      for (Index yy = 0; yy < oh; ++yy)
        for (Index xx = 0; xx < ow; ++xx)
          y[((plane * od + z) * oh + yy) * ow + xx] = x[((plane * d + z / factor) * h + yy / factor) * w + xx / factor];

  if (Tape<T>* tape = detail::recording_tape<T>({&input})) {
    out.set_requires_grad(true);
    tape->record([xn = input.node(), on = out.node(), n, c, d, h, w, factor]() {
      if (on->grad.empty()) return;
      auto& dx = detail::grad_of<T>(*xn);
      const Index od = d * factor, oh = h * factor, ow = w * factor;
      for (Index plane = 0; plane < n * c; ++plane)
        for (Index z = 0; z < od; ++z)
          for (Index yy = 0; yy < oh; ++yy)
            for (Index xx = 0; xx < ow; ++xx)
              dx[static_cast<std::size_t>(((plane * d + z / factor) * h + yy / factor) * w + xx / factor)] +=
                  on->grad[static_cast<std::size_t>(((plane * od + z) * oh + yy) * ow + xx)];
    });
  }
  return out;
}

template <typename T>
Tensor<T> pad_replicate(const Tensor<T>& input, int pad) {
  require_rank5(input.shape(), "pad_replicate input");
  if (pad < 0) throw ShapeError("padding must be >= 0");
  const Index n = input.dim(0), c = input.dim(1);
  const Index d = input.dim(2), h = input.dim(3), w = input.dim(4);
  const Index od = d + 2 * pad, oh = h + 2 * pad, ow = w + 2 * pad;
  auto src = [=](Index plane, Index z, Index y, Index x) {
    z = std::clamp<Index>(z - pad, 0, d - 1);
    y = std::clamp<Index>(y - pad, 0, h - 1);
    x = std::clamp<Index>(x - pad, 0, w - 1);
    return ((plane * d + z) * h + y) * w + x;
  };
  Tensor<T> out({n, c, od, oh, ow});
  const T* xs = input.data();
  T* ys = out.mutable_data();
  for (Index plane = 0; plane < n * c; ++plane)
    for (Index z = 0; z < od; ++z)
      for (Index y = 0; y < oh; ++y)
        for (Index x = 0; x < ow; ++x) ys[((plane * od + z) * oh + y) * ow + x] = xs[src(plane, z, y, x)];

  if (Tape<T>* tape = detail::recording_tape<T>({&input})) {
    out.set_requires_grad(true);
    tape->record([xn = input.node(), on = out.node(), n, c, od, oh, ow, src]() {
      if (on->grad.empty()) return;
      auto& dx = detail::grad_of<T>(*xn);
      for (Index plane = 0; plane < n * c; ++plane)
        for (Index z = 0; z < od; ++z)
          for (Index y = 0; y < oh; ++y)
            for (Index x = 0; x < ow; ++x)
              dx[static_cast<std::size_t>(src(plane, z, y, x))] +=
                  on->grad[static_cast<std::size_t>(((plane * od + z) * oh + y) * ow + x)];
    });
  }
  return out;
}

namespace {

// Statistics saved by instance norm (one group per (sample, channel)) and
// batch norm (one group per channel).
template <typename T>
struct NormSaved {
  Index n, c, spatial;
  bool per_sample;  // instance norm: groups are (n, c); batch norm: groups are c
  std::vector<double> mean, inv_std;
};

template <typename T>
void norm_backward(const NormSaved<T>& s, typename Tensor<T>::Node& xn, typename Tensor<T>::Node& gn,
                   typename Tensor<T>::Node& bn, const std::vector<T>& dy, bool batch_stats) {
  const T* x = xn.data.data();
  const T* gamma = gn.data.data();
  const Index groups = s.per_sample ? s.n * s.c : s.c;
  const Index per_group = s.per_sample ? s.spatial : s.n * s.spatial;

  // Per-group sums of dy and dy * xhat.
  std::vector<double> sum_dy(static_cast<std::size_t>(groups), 0.0), sum_dy_xhat(static_cast<std::size_t>(groups), 0.0);
  for (Index sample = 0; sample < s.n; ++sample)
    for (Index ch = 0; ch < s.c; ++ch) {
      const Index gi = s.per_sample ? sample * s.c + ch : ch;
      const Index base = (sample * s.c + ch) * s.spatial;
      double a = 0.0, b = 0.0;
      for (Index i = 0; i < s.spatial; ++i) {
        const double xhat = (x[base + i] - s.mean[gi]) * s.inv_std[gi];
        a += dy[static_cast<std::size_t>(base + i)];
        b += dy[static_cast<std::size_t>(base + i)] * xhat;
      }
      sum_dy[gi] += a;
      sum_dy_xhat[gi] += b;
    }

  if (gn.requires_grad || bn.requires_grad) {
    std::vector<double> dgamma(static_cast<std::size_t>(s.c), 0.0), dbeta(static_cast<std::size_t>(s.c), 0.0);
    for (Index gi = 0; gi < groups; ++gi) {
      const Index ch = s.per_sample ? gi % s.c : gi;
      dgamma[ch] += sum_dy_xhat[gi];
      dbeta[ch] += sum_dy[gi];
    }
    if (gn.requires_grad) {
      auto& g = detail::grad_of<T>(gn);
      for (Index ch = 0; ch < s.c; ++ch) g[ch] += static_cast<T>(dgamma[ch]);
    }
    if (bn.requires_grad) {
      auto& g = detail::grad_of<T>(bn);
      for (Index ch = 0; ch < s.c; ++ch) g[ch] += static_cast<T>(dbeta[ch]);
    }
  }

  if (xn.requires_grad) {
    auto& dx = detail::grad_of<T>(xn);
    const double m = static_cast<double>(per_group);
    for (Index sample = 0; sample < s.n; ++sample)
      for (Index ch = 0; ch < s.c; ++ch) {
        const Index gi = s.per_sample ? sample * s.c + ch : ch;
        const Index base = (sample * s.c + ch) * s.spatial;
        const double inv = s.inv_std[gi];
        const double gam = gamma[ch];
        if (batch_stats) {
          const double mdy = sum_dy[gi] / m;
          const double mdyx = sum_dy_xhat[gi] / m;
          for (Index i = 0; i < s.spatial; ++i) {
            const double xhat = (x[base + i] - s.mean[gi]) * inv;
            dx[static_cast<std::size_t>(base + i)] +=
                static_cast<T>(gam * inv * (dy[static_cast<std::size_t>(base + i)] - mdy - xhat * mdyx));
          }
        } else {
          for (Index i = 0; i < s.spatial; ++i)
            dx[static_cast<std::size_t>(base + i)] += static_cast<T>(gam * inv * dy[static_cast<std::size_t>(base + i)]);
        }
      }
  }
}

template <typename T>
void check_affine(const Tensor<T>& input, const Tensor<T>& scale, const Tensor<T>& shift, const char* what) {
  require_rank5(input.shape(), what);
  const Index c = input.dim(1);
  if (scale.shape() != Shape{c} || shift.shape() != Shape{c})
    throw ShapeError(std::string(what) + ": affine parameters must have shape [" + std::to_string(c) + "]");
}

template <typename T>
Tensor<T> apply_norm(const Tensor<T>& input, const Tensor<T>& scale, const Tensor<T>& shift, NormSaved<T> saved,
                     bool batch_stats) {
  const T* x = input.data();
  Tensor<T> out(input.shape());
  T* y = out.mutable_data();
  for (Index sample = 0; sample < saved.n; ++sample)
    for (Index ch = 0; ch < saved.c; ++ch) {
      const Index gi = saved.per_sample ? sample * saved.c + ch : ch;
      const Index base = (sample * saved.c + ch) * saved.spatial;
      const double mu = saved.mean[gi], inv = saved.inv_std[gi];
      const double g = scale.data()[ch], b = shift.data()[ch];
      for (Index i = 0; i < saved.spatial; ++i) y[base + i] = static_cast<T>((x[base + i] - mu) * inv * g + b);
    }

  if (Tape<T>* tape = detail::recording_tape<T>({&input, &scale, &shift})) {
    out.set_requires_grad(true);
    tape->record([xn = input.node(), gn = scale.node(), bn = shift.node(), on = out.node(),
                  saved = std::move(saved), batch_stats]() {
      if (on->grad.empty()) return;
      norm_backward<T>(saved, *xn, *gn, *bn, on->grad, batch_stats);
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& input, const Tensor<T>& scale, const Tensor<T>& shift, double eps) {
  check_affine(input, scale, shift, "instance_norm input");
  NormSaved<T> s{input.dim(0), input.dim(1), input.dim(2) * input.dim(3) * input.dim(4), true, {}, {}};
  if (s.spatial < 2) throw ShapeError("instance_norm needs at least 2 voxels per channel");
  s.mean.resize(static_cast<std::size_t>(s.n * s.c));
  s.inv_std.resize(s.mean.size());
  const T* x = input.data();
  for (Index gi = 0; gi < s.n * s.c; ++gi) {
    const T* p = x + gi * s.spatial;
    double mu = 0.0;
    for (Index i = 0; i < s.spatial; ++i) mu += p[i];
    mu /= static_cast<double>(s.spatial);
    double var = 0.0;
    for (Index i = 0; i < s.spatial; ++i) var += (p[i] - mu) * (p[i] - mu);
    var /= static_cast<double>(s.spatial);
    s.mean[gi] = mu;
    s.inv_std[gi] = 1.0 / std::sqrt(var + eps);
  }
  return apply_norm(input, scale, shift, std::move(s), true);
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& scale, const Tensor<T>& shift,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training, double momentum, double eps) {
  check_affine(input, scale, shift, "batch_norm input");
  NormSaved<T> s{input.dim(0), input.dim(1), input.dim(2) * input.dim(3) * input.dim(4), false, {}, {}};
  if (running_mean.shape() != Shape{s.c} || running_var.shape() != Shape{s.c})
    throw ShapeError("batch_norm running statistics must have shape [C]");
  s.mean.resize(static_cast<std::size_t>(s.c));
  s.inv_std.resize(s.mean.size());
  const T* x = input.data();
  if (training) {
    const Index m = s.n * s.spatial;
    if (m < 2) throw ShapeError("batch_norm needs at least 2 values per channel in training mode");
    for (Index ch = 0; ch < s.c; ++ch) {
      double mu = 0.0;
      for (Index sample = 0; sample < s.n; ++sample) {
        const T* p = x + (sample * s.c + ch) * s.spatial;
        for (Index i = 0; i < s.spatial; ++i) mu += p[i];
      }
      mu /= static_cast<double>(m);
      double var = 0.0;
      for (Index sample = 0; sample < s.n; ++sample) {
        const T* p = x + (sample * s.c + ch) * s.spatial;
        for (Index i = 0; i < s.spatial; ++i) var += (p[i] - mu) * (p[i] - mu);
      }
      const double unbiased = var / static_cast<double>(m - 1);
      var /= static_cast<double>(m);
      s.mean[ch] = mu;
      s.inv_std[ch] = 1.0 / std::sqrt(var + eps);
      T* rm = running_mean.mutable_data();
      T* rv = running_var.mutable_data();
      rm[ch] = static_cast<T>((1.0 - momentum) * rm[ch] + momentum * mu);
      rv[ch] = static_cast<T>((1.0 - momentum) * rv[ch] + momentum * unbiased);
    }
  } else {
    for (Index ch = 0; ch < s.c; ++ch) {
      s.mean[ch] = running_mean.data()[ch];
      s.inv_std[ch] = 1.0 / std::sqrt(static_cast<double>(running_var.data()[ch]) + eps);
    }
  }
  return apply_norm(input, scale, shift, std::move(s), training);
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, double slope) {
  Tensor<T> out(x.shape());
  const T* a = x.data();
  T* y = out.mutable_data();
  const T sl = static_cast<T>(slope);
  for (Index i = 0; i < x.numel(); ++i) y[i] = a[i] > T(0) ? a[i] : a[i] * sl;
  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    out.set_requires_grad(true);
    tape->record([xn = x.node(), on = out.node(), sl]() {
      if (on->grad.empty()) return;
      auto& dx = detail::grad_of<T>(*xn);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += xn->data[i] > T(0) ? on->grad[i] : on->grad[i] * sl;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* a = x.data();
  T* y = out.mutable_data();
  for (Index i = 0; i < x.numel(); ++i) y[i] = T(1) / (T(1) + std::exp(-a[i]));
  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    out.set_requires_grad(true);
    tape->record([xn = x.node(), on = out.node()]() {
      if (on->grad.empty()) return;
      auto& dx = detail::grad_of<T>(*xn);
      for (std::size_t i = 0; i < dx.size(); ++i) {
        const T s = on->data[i];
        dx[i] += on->grad[i] * s * (T(1) - s);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  T* y = out.mutable_data();
  for (Index i = 0; i < a.numel(); ++i) y[i] = a.data()[i] + b.data()[i];
  if (Tape<T>* tape = detail::recording_tape<T>({&a, &b})) {
    out.set_requires_grad(true);
    tape->record([an = a.node(), bn = b.node(), on = out.node()]() {
      if (on->grad.empty()) return;
      for (const auto& n : {an, bn}) {
        if (!n->requires_grad) continue;
        auto& d = detail::grad_of<T>(*n);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += on->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double s) {
  Tensor<T> out(x.shape());
  const T f = static_cast<T>(s);
  for (Index i = 0; i < x.numel(); ++i) out.mutable_data()[i] = x.data()[i] * f;
  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    out.set_requires_grad(true);
    tape->record([xn = x.node(), on = out.node(), f]() {
      if (on->grad.empty()) return;
      auto& dx = detail::grad_of<T>(*xn);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += on->grad[i] * f;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  for (Index i = 0; i < a.numel(); ++i) out.mutable_data()[i] = a.data()[i] * b.data()[i];
  if (Tape<T>* tape = detail::recording_tape<T>({&a, &b})) {
    out.set_requires_grad(true);
    tape->record([an = a.node(), bn = b.node(), on = out.node()]() {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        auto& d = detail::grad_of<T>(*an);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += on->grad[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        auto& d = detail::grad_of<T>(*bn);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += on->grad[i] * an->data[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0.0;
  for (T v : x.values()) acc += v;
  Tensor<T> out(Shape{1}, static_cast<T>(acc));
  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    out.set_requires_grad(true);
    tape->record([xn = x.node(), on = out.node()]() {
      if (on->grad.empty()) return;
      auto& dx = detail::grad_of<T>(*xn);
      const T g = on->grad[0];
      for (T& v : dx) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || a.rank() != b.rank())
    throw ShapeError("concat_channels: rank mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (i != 1 && a.dim(i) != b.dim(i))
      throw ShapeError("concat_channels: non-channel dims differ " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
  const Index n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  Index spatial = 1;
  for (std::size_t i = 2; i < a.rank(); ++i) spatial *= a.dim(i);
  Shape shape = a.shape();
  shape[1] = ca + cb;
  Tensor<T> out(shape);
  T* y = out.mutable_data();
  for (Index s = 0; s < n; ++s) {
    std::copy_n(a.data() + s * ca * spatial, ca * spatial, y + s * (ca + cb) * spatial);
    std::copy_n(b.data() + s * cb * spatial, cb * spatial, y + (s * (ca + cb) + ca) * spatial);
  }
  if (Tape<T>* tape = detail::recording_tape<T>({&a, &b})) {
    out.set_requires_grad(true);
    tape->record([an = a.node(), bn = b.node(), on = out.node(), n, ca, cb, spatial]() {
      if (on->grad.empty()) return;
      const T* g = on->grad.data();
      if (an->requires_grad) {
        auto& d = detail::grad_of<T>(*an);
        for (Index s = 0; s < n; ++s)
          for (Index i = 0; i < ca * spatial; ++i) d[s * ca * spatial + i] += g[s * (ca + cb) * spatial + i];
      }
      if (bn->requires_grad) {
        auto& d = detail::grad_of<T>(*bn);
        for (Index s = 0; s < n; ++s)
          for (Index i = 0; i < cb * spatial; ++i) d[s * cb * spatial + i] += g[(s * (ca + cb) + ca) * spatial + i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, Index start, Index count) {
  if (x.rank() < 2) throw ShapeError("slice_channels needs rank >= 2");
  const Index n = x.dim(0), c = x.dim(1);
  if (start < 0 || count < 0 || start + count > c)
    throw ShapeError("slice_channels: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") outside " + std::to_string(c) + " channels");
  Index spatial = 1;
  for (std::size_t i = 2; i < x.rank(); ++i) spatial *= x.dim(i);
  Shape shape = x.shape();
  shape[1] = count;
  Tensor<T> out(shape);
  for (Index s = 0; s < n; ++s)
    std::copy_n(x.data() + (s * c + start) * spatial, count * spatial, out.mutable_data() + s * count * spatial);
  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    out.set_requires_grad(true);
    tape->record([xn = x.node(), on = out.node(), n, c, start, count, spatial]() {
      if (on->grad.empty()) return;
      auto& d = detail::grad_of<T>(*xn);
      for (Index s = 0; s < n; ++s)
        for (Index i = 0; i < count * spatial; ++i)
          d[(s * c + start) * spatial + i] += on->grad[s * count * spatial + i];
    });
  }
  return out;
}

double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, const Tensor<double>& x,
                  double h) {
  Tensor<double> probe = x.clone();
  probe.set_requires_grad(true);
  std::vector<double> analytic;
  {
    Tape<double> tape;
    TapeScope<double> scope(&tape);
    Tensor<double> y = f(probe);
    if (y.numel() != 1) throw ShapeError("grad_check: f must be scalar-valued, got " + shape_str(y.shape()));
    tape.backward(y);
    analytic.assign(probe.grad().begin(), probe.grad().end());
    if (analytic.empty()) analytic.assign(static_cast<std::size_t>(probe.numel()), 0.0);
  }

  TapeScope<double> no_grad(nullptr);
  double worst = 0.0;
  Tensor<double> moved = x.clone();
  for (Index i = 0; i < moved.numel(); ++i) {
    const double orig = moved.data()[i];
    moved.mutable_data()[i] = orig + h;
    const double fp = f(moved).item();
    moved.mutable_data()[i] = orig - h;
    const double fm = f(moved).item();
    moved.mutable_data()[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double g = analytic[static_cast<std::size_t>(i)];
    const double err = std::abs(g - numeric) / std::max(1e-8, std::abs(g) + std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

#define IB3DSEG_INSTANTIATE(T)                                                                              \
  template Tensor<T> maxpool3d(const Tensor<T>&, int, int);                                                 \
  template Tensor<T> upsample_nearest(const Tensor<T>&, int);                                               \
  template Tensor<T> pad_replicate(const Tensor<T>&, int);                                                  \
  template Tensor<T> instance_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);           \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&, Tensor<T>&, \
                                bool, double, double);                                                      \
  template Tensor<T> leaky_relu(const Tensor<T>&, double);                                                  \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                             \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                               \
  template Tensor<T> scale(const Tensor<T>&, double);                                                       \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                               \
  template Tensor<T> sum(const Tensor<T>&);                                                                 \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> slice_channels(const Tensor<T>&, Index, Index);

IB3DSEG_INSTANTIATE(float)
IB3DSEG_INSTANTIATE(double)

#undef IB3DSEG_INSTANTIATE

}  // namespace ib3dseg::ops
