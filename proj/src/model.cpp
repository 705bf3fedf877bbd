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

#include "ib3dseg/model.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>

#include "ib3dseg/error.hpp"
#include "ib3dseg/ops.hpp"
#include "ib3dseg/pipeline.hpp"
#include "ib3dseg/random.hpp"

namespace ib3dseg {
namespace {

template <typename E, std::size_t N>
E parse_enum(const nlohmann::json& j, const char* key, const std::array<E, N>& values) {
  const std::string s = j.get<std::string>();
  for (E v : values)
    if (to_string(v) == s) return v;
  std::string options;
  for (E v : values) options += (options.empty() ? "" : ", ") + std::string(to_string(v));
  throw ConfigError(std::string("network config: invalid ") + key + " '" + s + "' (expected one of " + options + ")");
}

// Collects parameters in construction order with deterministic per-name init.
class ParamBuilder {
 public:
  explicit ParamBuilder(std::uint64_t seed) : seed_(seed) {}

  void conv(const std::string& prefix, int cout, int cin, int k, bool bias = true) {
    const double std = std::sqrt(2.0 / (static_cast<double>(cin) * k * k * k));
    add_normal(prefix + ".weight", ParamKind::ConvWeight, {cout, cin, k, k, k}, std);
    if (bias) params_.push_back({prefix + ".bias", ParamKind::Bias, Tensor<float>({cout}, 0.0f)});
  }

  void transposed(const std::string& prefix, int cin, int cout) {
    add_normal(prefix + ".weight", ParamKind::ConvWeight, {cin, cout, 2, 2, 2}, std::sqrt(2.0 / cin));
    params_.push_back({prefix + ".bias", ParamKind::Bias, Tensor<float>({cout}, 0.0f)});
  }

  void norm(const std::string& prefix, int c, NormKind kind) {
    params_.push_back({prefix + ".scale", ParamKind::NormScale, Tensor<float>({c}, 1.0f)});
    params_.push_back({prefix + ".shift", ParamKind::NormShift, Tensor<float>({c}, 0.0f)});
    if (kind == NormKind::Batch) {
      params_.push_back({prefix + ".running_mean", ParamKind::Buffer, Tensor<float>({c}, 0.0f)});
      params_.push_back({prefix + ".running_var", ParamKind::Buffer, Tensor<float>({c}, 1.0f)});
    }
  }

  void conv_norm(const std::string& prefix, int idx, int cout, int cin, NormKind kind) {
    conv(prefix + ".conv" + std::to_string(idx), cout, cin, 3);
    norm(prefix + ".norm" + std::to_string(idx), cout, kind);
  }

  void fixed(const std::string& name, Tensor<float> w) { params_.push_back({name, ParamKind::FixedKernel, std::move(w)}); }

  std::vector<Param<float>> take() { return std::move(params_); }

 private:
  void add_normal(const std::string& name, ParamKind kind, Shape shape, double std) {
    Rng rng(derive_seed(seed_, {fnv1a64(name)}));
    Tensor<float> t(std::move(shape));
    for (float& v : t.mutable_values()) v = static_cast<float>(rng.normal(0.0, std));
    params_.push_back({name, kind, std::move(t)});
  }

  std::uint64_t seed_;
  std::vector<Param<float>> params_;
};

bool ib_encoder_stage(const NetworkConfig& c, int stage) {
  if (!c.ib_enabled || stage < 2) return false;
  if (c.ib_placement == IbPlacement::SecondEncoder) return stage == 2;
  if (c.ib_placement == IbPlacement::AllEncoders) return true;
  return false;
}

bool ib_decoder_stage(const NetworkConfig& c, int j) {
  return c.ib_enabled && c.ib_placement == IbPlacement::SecondDecoder && j == 2;
}

// Input channel count of decoder j (1-based from the bottleneck) and its output width.
int decoder_level(const NetworkConfig& c, int j) { return c.depth + 1 - j; }

}  // namespace

std::string_view to_string(NormKind v) { return v == NormKind::Instance ? "instance" : "batch"; }
std::string_view to_string(IbPlacement v) {
  switch (v) {
    case IbPlacement::SecondEncoder: return "second_encoder";
    case IbPlacement::AllEncoders: return "all_encoders";
    case IbPlacement::SecondDecoder: return "second_decoder";
  }
  return "?";
}
std::string_view to_string(IbMerge v) { return v == IbMerge::PostAct ? "post_act" : "pre_act"; }
std::string_view to_string(IbMapping v) { return v == IbMapping::ChannelMean ? "channel_mean" : "depthwise"; }
std::string_view to_string(Upsampling v) { return v == Upsampling::Transposed ? "transposed" : "nearest"; }
std::string_view to_string(ParamKind k) {
  switch (k) {
    case ParamKind::ConvWeight: return "conv_weight";
    case ParamKind::Bias: return "bias";
    case ParamKind::NormScale: return "norm_scale";
    case ParamKind::NormShift: return "norm_shift";
    case ParamKind::FixedKernel: return "fixed_kernel";
    case ParamKind::Buffer: return "buffer";
  }
  return "?";
}

void NetworkConfig::validate() const {
  if (depth < 3 || depth > 6) throw ConfigError("network depth must lie in [3, 6]; got " + std::to_string(depth));
  if (base_channels < 2 || base_channels % 2 != 0)
    throw ConfigError("base_channels must be even and >= 2; got " + std::to_string(base_channels));
  if (in_channels < 1 || out_channels < 1) throw ConfigError("in_channels and out_channels must be >= 1");
  if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) throw ConfigError("leaky_slope must lie in [0, 1)");
  if (ib_enabled) {
    try {
      ib_params.validate();
    } catch (const ParameterError& e) {
      throw ConfigError(std::string("ib parameters: ") + e.what());
    }
    if (ib_params.polarity != Polarity::On)
      throw ConfigError("ib polarity is implied by the pathways; leave it as 'on'");
  }
}

void NetworkConfig::validate_patch(const Dims3& patch) const {
  const std::int64_t m = std::int64_t{1} << depth;
  for (auto d : patch)
    if (d < m || d % m != 0)
      throw ShapeError("patch dims must be positive multiples of 2^depth = " + std::to_string(m) + "; got " +
                       std::to_string(d));
}

nlohmann::ordered_json NetworkConfig::to_json() const {
  nlohmann::ordered_json j;
  j["depth"] = depth;
  j["base_channels"] = base_channels;
  j["in_channels"] = in_channels;
  j["out_channels"] = out_channels;
  j["ib_enabled"] = ib_enabled;
  j["ib_k"] = ib_params.k;
  j["ib_r"] = ib_params.r;
  j["ib_gamma"] = ib_params.gamma;
  j["ib_c"] = ib_params.c;
  j["ib_geometry"] = to_string(ib_params.geometry);
  j["ib_placement"] = to_string(ib_placement);
  j["ib_merge"] = to_string(ib_merge);
  j["ib_mapping"] = to_string(ib_mapping);
  j["norm"] = to_string(norm);
  j["leaky_slope"] = leaky_slope;
  j["upsampling"] = to_string(upsampling);
  return j;
}

NetworkConfig NetworkConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("network config must be a JSON object");
  NetworkConfig c;
  static const std::set<std::string> keys{"depth",       "base_channels", "in_channels", "out_channels",
                                          "ib_enabled",  "ib_k",          "ib_r",        "ib_gamma",
                                          "ib_c",        "ib_geometry",   "ib_placement", "ib_merge",
                                          "ib_mapping",  "norm",          "leaky_slope", "upsampling"};
  for (const auto& [key, _] : j.items())
    if (!keys.count(key)) throw ConfigError("network config: unknown key '" + key + "'");
  try {
    if (j.contains("depth")) c.depth = j.at("depth").get<int>();
    if (j.contains("base_channels")) c.base_channels = j.at("base_channels").get<int>();
    if (j.contains("in_channels")) c.in_channels = j.at("in_channels").get<int>();
    if (j.contains("out_channels")) c.out_channels = j.at("out_channels").get<int>();
    if (j.contains("ib_enabled")) c.ib_enabled = j.at("ib_enabled").get<bool>();
    if (j.contains("ib_k")) c.ib_params.k = j.at("ib_k").get<int>();
    if (j.contains("ib_r")) c.ib_params.r = j.at("ib_r").get<double>();
    if (j.contains("ib_gamma")) c.ib_params.gamma = j.at("ib_gamma").get<double>();
    if (j.contains("ib_c")) c.ib_params.c = j.at("ib_c").get<double>();
    if (j.contains("ib_geometry"))
      c.ib_params.geometry = parse_enum(j.at("ib_geometry"), "ib_geometry",
                                        std::array{KernelGeometry::Spherical, KernelGeometry::Cylindrical});
    if (j.contains("ib_placement"))
      c.ib_placement = parse_enum(j.at("ib_placement"), "ib_placement",
                                  std::array{IbPlacement::SecondEncoder, IbPlacement::AllEncoders,
                                             IbPlacement::SecondDecoder});
    if (j.contains("ib_merge"))
      c.ib_merge = parse_enum(j.at("ib_merge"), "ib_merge", std::array{IbMerge::PostAct, IbMerge::PreAct});
    if (j.contains("ib_mapping"))
      c.ib_mapping =
          parse_enum(j.at("ib_mapping"), "ib_mapping", std::array{IbMapping::ChannelMean, IbMapping::Depthwise});
    if (j.contains("norm")) c.norm = parse_enum(j.at("norm"), "norm", std::array{NormKind::Instance, NormKind::Batch});
    if (j.contains("leaky_slope")) c.leaky_slope = j.at("leaky_slope").get<double>();
    if (j.contains("upsampling"))
      c.upsampling =
          parse_enum(j.at("upsampling"), "upsampling", std::array{Upsampling::Transposed, Upsampling::Nearest});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("network config: ") + e.what());
  }
  c.validate();
  return c;
}

Tensor<float> ib_weight(const Kernel3D& kernel, int cin, int cout, IbMapping mapping) {
  const int k = kernel.size();
  const std::int64_t k3 = static_cast<std::int64_t>(k) * k * k;
  Tensor<float> w({cout, cin, k, k, k}, 0.0f);
  int group = cin;
  if (mapping == IbMapping::Depthwise) {
    if (cin % cout != 0)
      throw ConfigError("depthwise IB mapping needs input channels (" + std::to_string(cin) +
                        ") divisible by pathway width (" + std::to_string(cout) + ")");
    group = cin / cout;
  }
  for (int co = 0; co < cout; ++co)
    for (int ci = 0; ci < cin; ++ci) {
      if (mapping == IbMapping::Depthwise && ci / group != co) continue;
      float* dst = w.mutable_data() + (static_cast<std::int64_t>(co) * cin + ci) * k3;
      for (std::int64_t t = 0; t < k3; ++t) dst[t] = static_cast<float>(kernel.weights()[t] / group);
    }
  return w;
}

Network build(const NetworkConfig& config, std::uint64_t seed) {
  config.validate();
  ParamBuilder b(seed);
  const auto& c = config;
  std::optional<Kernel3D> on, off;
  if (c.ib_enabled) {
    on = synthesize(c.ib_params);
    off = on->negated();
  }
  auto ib_fixed = [&](const std::string& prefix, int cin, int cout) {
    b.fixed(prefix + ".on.ib.weight", ib_weight(*on, cin, cout, c.ib_mapping));
    b.fixed(prefix + ".off.ib.weight", ib_weight(*off, cin, cout, c.ib_mapping));
  };

  for (int s = 1; s <= c.depth; ++s) {
    const std::string p = "enc" + std::to_string(s);
    const int cin = s == 1 ? c.in_channels : c.channels_at(s - 1);
    const int cout = c.channels_at(s);
    if (ib_encoder_stage(c, s)) {
      const int half = cout / 2;
      for (const char* path : {".on", ".off"}) {
        b.conv_norm(p + path, 1, half, cin, c.norm);
        b.conv_norm(p + path, 2, half, half, c.norm);
      }
      ib_fixed(p, cin, half);
    } else {
      b.conv_norm(p, 1, cout, cin, c.norm);
      b.conv_norm(p, 2, cout, cout, c.norm);
    }
  }
  const int bottom = c.channels_at(c.depth + 1);
  b.conv_norm("bottleneck", 1, bottom, c.channels_at(c.depth), c.norm);
  b.conv_norm("bottleneck", 2, bottom, bottom, c.norm);

  for (int j = 1; j <= c.depth; ++j) {
    const std::string p = "dec" + std::to_string(j);
    const int level = decoder_level(c, j);
    const int cin = c.channels_at(level + 1);
    const int cout = c.channels_at(level);
    if (c.upsampling == Upsampling::Transposed)
      b.transposed(p + ".up", cin, cout);
    else
      b.conv(p + ".up", cout, cin, 1);
    if (ib_decoder_stage(c, j)) {
      const int half = cout / 2;
      for (const char* path : {".on", ".off"}) {
        b.conv_norm(p + path, 1, half, 2 * cout, c.norm);
        b.conv_norm(p + path, 2, half, half, c.norm);
      }
      ib_fixed(p, 2 * cout, half);
    } else {
      b.conv_norm(p, 1, cout, 2 * cout, c.norm);
      b.conv_norm(p, 2, cout, cout, c.norm);
    }
  }
  b.conv("head", c.out_channels, c.channels_at(1), 1);
  return Network(config, b.take());
}

template <typename T>
BasicNetwork<T>::BasicNetwork(NetworkConfig config, std::vector<Param<T>> params)
    : config_(std::move(config)), params_(std::move(params)) {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (!index_.emplace(params_[i].name, i).second) throw ConfigError("duplicate parameter '" + params_[i].name + "'");
}

template <typename T>
Tensor<T>& BasicNetwork<T>::param(const std::string& name) {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("network has no parameter '" + name + "'");
  return params_[it->second].value;
}

template <typename T>
const Tensor<T>& BasicNetwork<T>::param(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("network has no parameter '" + name + "'");
  return params_[it->second].value;
}

template <typename T>
void BasicNetwork<T>::enable_grad() {
  for (auto& p : params_) p.value.set_requires_grad(is_trainable(p.kind));
}

template <typename T>
void BasicNetwork<T>::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

template <typename T>
std::int64_t BasicNetwork<T>::count(bool trainable_only) const {
  std::int64_t n = 0;
  for (const auto& p : params_) {
    if (p.kind == ParamKind::Buffer) continue;
    if (trainable_only && !is_trainable(p.kind)) continue;
    n += p.value.numel();
  }
  return n;
}

template <typename T>
Tensor<T> BasicNetwork<T>::act(const Tensor<T>& x) const {
  return ops::leaky_relu(x, config_.leaky_slope);
}

template <typename T>
Tensor<T> BasicNetwork<T>::norm(const std::string& prefix, const Tensor<T>& x, bool training) {
  if (config_.norm == NormKind::Instance) return ops::instance_norm(x, param(prefix + ".scale"), param(prefix + ".shift"));
  return ops::batch_norm(x, param(prefix + ".scale"), param(prefix + ".shift"), param(prefix + ".running_mean"),
                         param(prefix + ".running_var"), training);
}

template <typename T>
Tensor<T> BasicNetwork<T>::conv_norm_act(const std::string& prefix, const Tensor<T>& x, bool training,
                                         bool activate) {
  // prefix is e.g. "enc1.conv1"; the matching norm is "enc1.norm1".
  const auto dot = prefix.rfind(".conv");
  const std::string norm_prefix = prefix.substr(0, dot) + ".norm" + prefix.substr(dot + 5);
  Tensor<T> y = ops::conv3d(x, param(prefix + ".weight"), param(prefix + ".bias"), 1, 1);
  y = norm(norm_prefix, y, training);
  return activate ? act(y) : y;
}

template <typename T>
Tensor<T> BasicNetwork<T>::conv_block(const std::string& prefix, const Tensor<T>& x, bool training) {
  return conv_norm_act(prefix + ".conv2", conv_norm_act(prefix + ".conv1", x, training), training);
}

template <typename T>
Tensor<T> BasicNetwork<T>::ib_residual(const Tensor<T>& x, Polarity polarity, const std::string& block) const {
  const bool encoder = block.rfind("enc", 0) == 0;
  const int k = config_.ib_params.k;
  const std::string name = block + (polarity == Polarity::On ? ".on" : ".off") + ".ib.weight";
  // Replicated edges keep the response to constant regions at exactly zero up to the border.
  return ops::conv3d(ops::pad_replicate(x, (k - 1) / 2), param(name), Tensor<T>(), encoder ? 2 : 1, 0);
}

template <typename T>
Tensor<T> BasicNetwork<T>::ib_block(const std::string& prefix, const Tensor<T>& x, bool pooled, bool training) {
  const Tensor<T> d = pooled ? ops::maxpool3d(x) : x;
  Tensor<T> outs[2];
  for (int i = 0; i < 2; ++i) {
    const Polarity pol = i == 0 ? Polarity::On : Polarity::Off;
    const std::string p = prefix + (i == 0 ? ".on" : ".off");
    const Tensor<T> s = ib_residual(x, pol, prefix);
    if (s.shape() != Shape{d.dim(0), s.dim(1), d.dim(2), d.dim(3), d.dim(4)})
      throw ShapeError("IB residual " + shape_str(s.shape()) + " does not align with pathway input " +
                       shape_str(d.shape()));
    Tensor<T> a;
    if (config_.ib_merge == IbMerge::PostAct)
      a = ops::add(conv_norm_act(p + ".conv1", d, training), s);
    else
      a = act(ops::add(conv_norm_act(p + ".conv1", d, training, false), s));
    outs[i] = conv_norm_act(p + ".conv2", a, training);
  }
  return ops::concat_channels(outs[0], outs[1]);
}

template <typename T>
Tensor<T> BasicNetwork<T>::upsample(const std::string& prefix, const Tensor<T>& x) {
  if (config_.upsampling == Upsampling::Transposed)
    return ops::transposed_conv3d(x, param(prefix + ".weight"), param(prefix + ".bias"), 2);
  return ops::conv3d(ops::upsample_nearest(x, 2), param(prefix + ".weight"), param(prefix + ".bias"));
}

template <typename T>
Tensor<T> BasicNetwork<T>::second_block(const Tensor<T>& x, bool training) {
  if (ib_encoder_stage(config_, 2)) return ib_block("enc2", x, true, training);
  return conv_block("enc2", ops::maxpool3d(x), training);
}

template <typename T>
Tensor<T> BasicNetwork<T>::forward(const Tensor<T>& x, bool training, ActivationMap<T>* taps) {
  const auto& c = config_;
  if (x.rank() != 5 || x.dim(1) != c.in_channels)
    throw ShapeError("network input must be [N, " + std::to_string(c.in_channels) + ", D, H, W]; got " +
                     shape_str(x.shape()));
  c.validate_patch({x.dim(2), x.dim(3), x.dim(4)});

  std::vector<Tensor<T>> skips;
  Tensor<T> h = x;
  for (int s = 1; s <= c.depth; ++s) {
    const std::string p = "enc" + std::to_string(s);
    if (s == 1)
      h = conv_block(p, h, training);
    else if (ib_encoder_stage(c, s))
      h = ib_block(p, h, true, training);
    else
      h = conv_block(p, ops::maxpool3d(h), training);
    if (taps) (*taps)[p] = h;
    skips.push_back(h);
  }
  h = conv_block("bottleneck", ops::maxpool3d(h), training);
  if (taps) (*taps)["bottleneck"] = h;

  for (int j = 1; j <= c.depth; ++j) {
    const std::string p = "dec" + std::to_string(j);
    const Tensor<T> cat = ops::concat_channels(skips[decoder_level(c, j) - 1], upsample(p + ".up", h));
    h = ib_decoder_stage(c, j) ? ib_block(p, cat, false, training) : conv_block(p, cat, training);
    if (taps) (*taps)[p] = h;
  }
  return ops::conv3d(h, param("head.weight"), param("head.bias"));
}

std::string model_label(const NetworkConfig& config) { return config.ib_enabled ? "ib-unet" : "unet"; }

template class BasicNetwork<float>;
template class BasicNetwork<double>;

std::vector<LayerInfo> describe(const NetworkConfig& config, const Dims3& patch) {
  config.validate();
  config.validate_patch(patch);
  const Network net = build(config, 0);
  const auto& c = config;
  auto block_counts = [&](const std::string& prefix, LayerInfo& row) {
    for (const auto& p : net.params()) {
      if (p.name.rfind(prefix + ".", 0) != 0) continue;
      if (p.kind == ParamKind::FixedKernel)
        row.fixed += p.value.numel();
      else if (is_trainable(p.kind))
        row.params += p.value.numel();
    }
  };
  auto spatial = [&](int level) {
    return Shape{patch[0] >> (level - 1), patch[1] >> (level - 1), patch[2] >> (level - 1)};
  };
  auto with_channels = [](int ch, const Shape& s) { return Shape{ch, s[0], s[1], s[2]}; };

  const int k = c.ib_params.k;
  std::vector<LayerInfo> rows;
  int rf = 1, jump = 1;
  std::vector<int> skip_rf;
  for (int s = 1; s <= c.depth; ++s) {
    LayerInfo row;
    row.name = "enc" + std::to_string(s);
    const bool ib = ib_encoder_stage(c, s);
    if (s == 1) {
      row.op = "conv-norm-act x2";
      rf += 4 * jump;
    } else {
      const int pre_rf = rf, pre_jump = jump;
      rf += jump;
      jump *= 2;
      rf += 2 * jump;  // conv1
      if (ib) rf = std::max(rf, pre_rf + (k - 1) * pre_jump);
      rf += 2 * jump;  // conv2
      row.op = ib ? "IB block: maxpool | conv-norm-act + On/Off DoG k" + std::to_string(k) + " s2, conv-norm-act"
                  : "maxpool, conv-norm-act x2";
    }
    row.output = with_channels(c.channels_at(s), spatial(s));
    row.receptive_field = rf;
    block_counts(row.name, row);
    skip_rf.push_back(rf);
    rows.push_back(row);
  }
  {
    LayerInfo row;
    row.name = "bottleneck";
    row.op = "maxpool, conv-norm-act x2";
    rf += jump;
    jump *= 2;
    rf += 4 * jump;
    row.output = with_channels(c.channels_at(c.depth + 1), spatial(c.depth + 1));
    row.receptive_field = rf;
    block_counts(row.name, row);
    rows.push_back(row);
  }
  for (int j = 1; j <= c.depth; ++j) {
    LayerInfo row;
    row.name = "dec" + std::to_string(j);
    const int level = decoder_level(c, j);
    const bool ib = ib_decoder_stage(c, j);
    jump /= 2;
    rf = std::max(rf, skip_rf[level - 1]);
    const int pre_rf = rf;
    rf += 2 * jump;
    if (ib) rf = std::max(rf, pre_rf + (k - 1) * jump);
    rf += 2 * jump;
    const std::string up = c.upsampling == Upsampling::Transposed ? "transposed conv k2 s2" : "nearest x2 + conv1";
    row.op = up + ", concat, " + (ib ? "IB block: conv-norm-act + On/Off DoG s1, conv-norm-act" : "conv-norm-act x2");
    row.output = with_channels(c.channels_at(level), spatial(level));
    row.receptive_field = rf;
    block_counts(row.name, row);
    rows.push_back(row);
  }
  {
    LayerInfo row;
    row.name = "head";
    row.op = "conv1 to logits";
    row.output = with_channels(c.out_channels, spatial(1));
    row.receptive_field = rf;
    block_counts(row.name, row);
    rows.push_back(row);
  }
  return rows;
}

std::string describe_text(const NetworkConfig& config, const Dims3& patch) {
  const auto rows = describe(config, patch);
  std::ostringstream os;
  os << "network: depth " << config.depth << ", base " << config.base_channels << ", norm " << to_string(config.norm)
     << ", upsampling " << to_string(config.upsampling);
  if (config.ib_enabled)
    os << ", IB " << to_string(config.ib_placement) << " (k=" << config.ib_params.k << ", r=" << config.ib_params.r
       << ", gamma=" << config.ib_params.gamma << ", c=" << config.ib_params.c << ", "
       << to_string(config.ib_params.geometry) << ", " << to_string(config.ib_merge) << ", "
       << to_string(config.ib_mapping) << ")";
  else
    os << ", baseline";
  os << "\npatch " << patch[0] << "x" << patch[1] << "x" << patch[2] << "\n\n";
  os << std::left << std::setw(12) << "block" << std::setw(22) << "output [C,D,H,W]" << std::right << std::setw(12)
     << "params" << std::setw(10) << "fixed" << std::setw(8) << "RF" << "  op\n";
  std::int64_t total = 0, fixed = 0;
  for (const auto& r : rows) {
    os << std::left << std::setw(12) << r.name << std::setw(22) << shape_str(r.output) << std::right << std::setw(12)
       << r.params << std::setw(10) << r.fixed << std::setw(8) << r.receptive_field << "  " << r.op << "\n";
    total += r.params;
    fixed += r.fixed;
  }
  os << "\ntrainable parameters: " << total << "\nfixed kernel weights: " << fixed << "\n";
  return os.str();
}

Volume dump_activations(Network& net, const Volume& image, const std::string& stage) {
  const auto& c = net.config();
  std::set<std::string> names{"bottleneck"};
  for (int s = 1; s <= c.depth; ++s) {
    names.insert("enc" + std::to_string(s));
    names.insert("dec" + std::to_string(s));
  }
  if (!names.count(stage)) {
    std::string list;
    for (const auto& n : names) list += (list.empty() ? "" : ", ") + n;
    throw ConfigError("unknown stage '" + stage + "' (expected one of " + list + ")");
  }
  if (c.in_channels != 1) throw ConfigError("dump_activations expects a single-channel network");
  const std::int64_t m = std::int64_t{1} << c.depth;
  Dims3 padded{};
  for (int a = 0; a < 3; ++a) padded[a] = (image.dims[a] + m - 1) / m * m;
  Tensor<float> x({1, 1, padded[0], padded[1], padded[2]}, 0.0f);
  for (std::int64_t z = 0; z < image.dims[0]; ++z)
    for (std::int64_t y = 0; y < image.dims[1]; ++y)
      std::copy_n(image.data.data() + image.index(z, y, 0), image.dims[2],
                  x.mutable_data() + (z * padded[1] + y) * padded[2]);

  ActivationMap<float> taps;
  {
    TapeScope<float> no_grad(nullptr);
    net.forward(x, false, &taps);
  }
  const Tensor<float>& a = taps.at(stage);
  const Dims3 ad{a.dim(2), a.dim(3), a.dim(4)};
  const std::int64_t plane = ad[0] * ad[1] * ad[2];
  std::vector<float> mean_abs(static_cast<std::size_t>(plane), 0.0f);
  for (std::int64_t ch = 0; ch < a.dim(1); ++ch)
    for (std::int64_t i = 0; i < plane; ++i) mean_abs[i] += std::abs(a.data()[ch * plane + i]);
  for (float& v : mean_abs) v /= static_cast<float>(a.dim(1));

  const std::vector<float> up = resize_grid(mean_abs, ad, padded, Interp::Trilinear);
  Volume out(image.dims, image.spacing, VolumeKind::Image);
  out.origin = image.origin;
  for (std::int64_t z = 0; z < image.dims[0]; ++z)
    for (std::int64_t y = 0; y < image.dims[1]; ++y)
      std::copy_n(up.data() + (z * padded[1] + y) * padded[2], image.dims[2], out.data.data() + out.index(z, y, 0));
  return out;
}

}  // namespace ib3dseg
