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
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "ib3dseg/dog_kernel.hpp"
#include "ib3dseg/tensor.hpp"
#include "ib3dseg/volume.hpp"
#include "json.hpp"

namespace ib3dseg {

enum class NormKind { Instance, Batch };
enum class IbPlacement { SecondEncoder, AllEncoders, SecondDecoder };
enum class IbMerge { PostAct, PreAct };
enum class IbMapping { ChannelMean, Depthwise };
enum class Upsampling { Transposed, Nearest };

std::string_view to_string(NormKind v);
std::string_view to_string(IbPlacement v);
std::string_view to_string(IbMerge v);
std::string_view to_string(IbMapping v);
std::string_view to_string(Upsampling v);

struct NetworkConfig {
  int depth = 4;           // encoder stages; the bottleneck sits at 1/2^depth resolution
  int base_channels = 16;  // stage 1 width, doubled per stage
  int in_channels = 1;
  int out_channels = 1;
  bool ib_enabled = false;
  DoGParams ib_params{};
  IbPlacement ib_placement = IbPlacement::SecondEncoder;
  IbMerge ib_merge = IbMerge::PostAct;
  IbMapping ib_mapping = IbMapping::ChannelMean;
  NormKind norm = NormKind::Instance;
  double leaky_slope = 0.01;
  Upsampling upsampling = Upsampling::Transposed;

  /// Throws ConfigError on invalid topology.
  void validate() const;
  /// Throws ShapeError unless every spatial dim is a positive multiple of 2^depth.
  void validate_patch(const Dims3& patch) const;

  int channels_at(int stage) const { return base_channels << (stage - 1); }

  nlohmann::ordered_json to_json() const;
  /// Strict: unknown keys are rejected. Missing keys keep their defaults.
  static NetworkConfig from_json(const nlohmann::json& j);

  bool operator==(const NetworkConfig&) const = default;
};

enum class ParamKind { ConvWeight, Bias, NormScale, NormShift, FixedKernel, Buffer };
std::string_view to_string(ParamKind k);

/// True for parameters updated by the optimizer.
inline bool is_trainable(ParamKind k) { return k != ParamKind::FixedKernel && k != ParamKind::Buffer; }

template <typename T>
struct Param {
  std::string name;
  ParamKind kind;
  Tensor<T> value;
};

/// Named intermediate outputs captured during forward().
template <typename T>
using ActivationMap = std::map<std::string, Tensor<T>>;

/// U-Net with optional On/Off center-surround blocks. Parameters are held in
/// construction order; names are stable and used by checkpoints.
template <typename T>
class BasicNetwork {
 public:
  BasicNetwork() = default;
  BasicNetwork(NetworkConfig config, std::vector<Param<T>> params);

  const NetworkConfig& config() const noexcept { return config_; }
  std::vector<Param<T>>& params() noexcept { return params_; }
  const std::vector<Param<T>>& params() const noexcept { return params_; }

  Tensor<T>& param(const std::string& name);
  const Tensor<T>& param(const std::string& name) const;
  bool has_param(const std::string& name) const { return index_.count(name) != 0; }

  /// Logits [N, out_channels, D, H, W] for input [N, in_channels, D, H, W].
  /// `training` selects batch statistics for batch norm. When `taps` is given,
  /// block outputs are stored under "enc1".."encD", "bottleneck", "dec1".."decD".
  Tensor<T> forward(const Tensor<T>& x, bool training = false, ActivationMap<T>* taps = nullptr);

  /// Stage-2 block as a standalone function of its input (stage-1 output).
  /// IB networks return the concatenated pathways, baselines the plain block.
  Tensor<T> second_block(const Tensor<T>& x, bool training = false);

  /// IB residual s_P for one pathway of the named IB block.
  Tensor<T> ib_residual(const Tensor<T>& x, Polarity polarity, const std::string& block = "enc2") const;

  /// Mark trainable parameters as requiring grad (fixed kernels and buffers never do).
  void enable_grad();
  void zero_grad();

  std::int64_t count(bool trainable_only) const;

  template <typename U>
  BasicNetwork<U> cast() const {
    std::vector<Param<U>> out;
    for (const auto& p : params_) out.push_back({p.name, p.kind, p.value.template cast<U>()});
    return BasicNetwork<U>(config_, std::move(out));
  }

 private:
  Tensor<T> conv_block(const std::string& prefix, const Tensor<T>& x, bool training);
  Tensor<T> conv_norm_act(const std::string& prefix, const Tensor<T>& x, bool training, bool activate = true);
  Tensor<T> norm(const std::string& prefix, const Tensor<T>& x, bool training);
  Tensor<T> act(const Tensor<T>& x) const;
  Tensor<T> ib_block(const std::string& prefix, const Tensor<T>& x, bool pooled, bool training);
  Tensor<T> upsample(const std::string& prefix, const Tensor<T>& x);

  NetworkConfig config_;
  std::vector<Param<T>> params_;
  std::map<std::string, std::size_t> index_;
};

using Network = BasicNetwork<float>;

/// Deterministic construction: He-normal conv weights (std sqrt(2 / fan_in)),
/// zero biases, unit norm scales, zero shifts, DoG kernels for IB blocks.
Network build(const NetworkConfig& config, std::uint64_t seed);

/// "ib-unet" or "unet", used to label runs in reports.
std::string model_label(const NetworkConfig& config);

/// Fixed IB conv weight [cout, cin, k, k, k]. Channel-mean: every output
/// channel applies kernel / cin to every input channel. Depthwise (grouped):
/// output channel j applies kernel / g to its group of g = cin / cout inputs.
Tensor<float> ib_weight(const Kernel3D& kernel, int cin, int cout, IbMapping mapping);

struct LayerInfo {
  std::string name;
  std::string op;
  Shape output;             // [C, D, H, W] for the describe patch
  std::int64_t params = 0;  // trainable
  std::int64_t fixed = 0;   // fixed kernel weights
  int receptive_field = 1;  // voxels along one axis, input resolution
};

/// Layer table for a given patch size.
std::vector<LayerInfo> describe(const NetworkConfig& config, const Dims3& patch);
std::string describe_text(const NetworkConfig& config, const Dims3& patch);

/// Mean absolute activation over the channels of a named block output,
/// trilinearly resized to the input grid. The input is zero-padded at the far
/// end to a multiple of 2^depth and the padding is cropped afterwards.
Volume dump_activations(Network& net, const Volume& image, const std::string& stage = "enc2");

}  // namespace ib3dseg
