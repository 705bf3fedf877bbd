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

#include <functional>

#include "ib3dseg/tensor.hpp"

namespace ib3dseg::ops {

/// Dense 3D cross-correlation. input [N,Cin,D,H,W], weight [Cout,Cin,k,k,k],
/// optional bias [Cout]. Output spatial size floor((D + 2*padding - k)/stride) + 1.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride = 1, int padding = 0);

/// Adjoint of conv3d with zero padding. input [N,Cin,D,H,W], weight
/// [Cin,Cout,k,k,k] (same memory layout as the conv weight it transposes),
/// output spatial size (D-1)*stride + k.
template <typename T>
Tensor<T> transposed_conv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                            int stride = 2);

/// Edge-replicating padding of the three spatial axes by `pad` voxels.
template <typename T>
Tensor<T> pad_replicate(const Tensor<T>& input, int pad);

/// Per-window maximum; the gradient goes to the first (lowest index) argmax.
template <typename T>
Tensor<T> maxpool3d(const Tensor<T>& input, int window = 2, int stride = 2);

/// Nearest-neighbour upsampling by an integer factor on every spatial axis.
template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& input, int factor = 2);

/// Per (sample, channel) standardisation followed by a per-channel affine map.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& input, const Tensor<T>& scale, const Tensor<T>& shift,
                        double eps = 1e-5);

/// Batch normalisation over (N, D, H, W). In training mode batch statistics
/// are used and the running buffers are updated with `momentum`; otherwise the
/// running buffers are used.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& scale, const Tensor<T>& shift,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                     double momentum = 0.1, double eps = 1e-5);

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, double slope = 0.01);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double s);

/// Element-wise product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

/// Sum of all elements, shape [1].
template <typename T>
Tensor<T> sum(const Tensor<T>& x);

/// Stack along the channel axis (axis 1), a first.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

/// Channels [start, start + count) of x.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, Index start, Index count);

/// Maximum relative error between the tape gradient of scalar f at x and
/// central finite differences with step h:
///   max_i |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                  const Tensor<double>& x, double h = 1e-3);

/// Output spatial size of a strided window sweep; throws ShapeError if < 1.
Index conv_output_size(Index in, int kernel, int stride, int padding);

}  // namespace ib3dseg::ops
