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

#include "ib3dseg/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "ib3dseg/error.hpp"
#include "ib3dseg/log.hpp"
#include "ib3dseg/ops.hpp"
#include "ib3dseg/random.hpp"

namespace ib3dseg {
namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kCkptMagic[8] = {'I', 'B', '3', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;
constexpr std::uint8_t kAdamM = 6;
constexpr std::uint8_t kAdamV = 7;
constexpr double kProbClamp = 1e-7;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

template <typename T>
void check_loss_inputs(const Tensor<T>& logits, const Tensor<T>& target) {
  if (logits.shape() != target.shape())
    throw ShapeError("loss: logits " + shape_str(logits.shape()) + " vs target " + shape_str(target.shape()));
  for (T g : target.values())
    if (g != T(0) && g != T(1)) throw ParameterError("loss: target must be binary (0/1)");
}

double sigmoid_d(double z) { return 1.0 / (1.0 + std::exp(-z)); }

struct LossSums {
  double bce = 0, inter = 0, pp = 0, gg = 0;
};

template <typename T>
LossSums loss_sums(const Tensor<T>& logits, const Tensor<T>& target) {
  LossSums s;
  const T* z = logits.data();
  const T* g = target.data();
  for (Index i = 0; i < logits.numel(); ++i) {
    const double p = sigmoid_d(static_cast<double>(z[i]));
    const double pc = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
    const double gi = static_cast<double>(g[i]);
    s.bce -= gi * std::log(pc) + (1.0 - gi) * std::log(1.0 - pc);
    s.inter += p * gi;
    s.pp += p * p;
    s.gg += gi * gi;
  }
  return s;
}

template <typename W>
void put(std::ostream& out, W v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename W>
W get(std::istream& in, const std::string& path) {
  W v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw FormatError("truncated checkpoint '" + path + "'", static_cast<long long>(in.tellg()));
  return v;
}

void write_tensor(std::ostream& out, const std::string& name, std::uint8_t kind, const Shape& shape,
                  const float* data, std::int64_t n) {
  put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint8_t>(out, kind);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(shape.size()));
  for (Index d : shape) put<std::int64_t>(out, d);
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
}

nlohmann::ordered_json predict_to_json(const PredictSettings& s) {
  nlohmann::ordered_json j;
  j["modality"] = to_string(s.modality);
  j["target_spacing"] = s.target_spacing;
  j["patch_size"] = s.patch_size;
  j["threshold"] = s.threshold;
  j["keep_largest_component"] = s.keep_largest_component;
  j["window_weighting"] = s.weighting == WindowWeighting::Gaussian ? "gaussian" : "uniform";
  if (s.ct_stats)
    j["ct_stats"] = {{"clip_lo", s.ct_stats->clip_lo},
                     {"clip_hi", s.ct_stats->clip_hi},
                     {"mean", s.ct_stats->mean},
                     {"std", s.ct_stats->std}};
  return j;
}

PredictSettings predict_from_json(const nlohmann::json& j) {
  PredictSettings s;
  s.modality = parse_modality(j.at("modality").get<std::string>());
  s.target_spacing = j.at("target_spacing").get<Vec3>();
  s.patch_size = j.at("patch_size").get<Dims3>();
  s.threshold = j.at("threshold").get<double>();
  s.keep_largest_component = j.at("keep_largest_component").get<bool>();
  const std::string weighting = j.at("window_weighting").get<std::string>();
  if (weighting != "uniform" && weighting != "gaussian") throw ConfigError("unknown window_weighting '" + weighting + "'");
  s.weighting = weighting == "gaussian" ? WindowWeighting::Gaussian : WindowWeighting::Uniform;
  if (j.contains("ct_stats")) {
    const auto& c = j.at("ct_stats");
    s.ct_stats = CtStats{c.at("clip_lo").get<double>(), c.at("clip_hi").get<double>(), c.at("mean").get<double>(),
                         c.at("std").get<double>()};
  }
  return s;
}

struct Prepared {
  Volume image;
  Volume label;
};

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batches_per_epoch < 1) throw ConfigError("batches_per_epoch must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr0 > 0.0)) throw ConfigError("lr0 must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (!(poly_power >= 0.0)) throw ConfigError("poly_power must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (folds < 1) throw ConfigError("folds must be >= 1");
  if (validate_every < 1) throw ConfigError("validate_every must be >= 1");
}

nlohmann::ordered_json TrainConfig::to_json() const {
  nlohmann::ordered_json j;
  j["epochs"] = epochs;
  j["batches_per_epoch"] = batches_per_epoch;
  j["batch_size"] = batch_size;
  j["lr0"] = lr0;
  j["weight_decay"] = weight_decay;
  j["poly_power"] = poly_power;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["adam_eps"] = adam_eps;
  j["folds"] = folds;
  j["seed"] = seed;
  j["augment"] = augment;
  j["validate_every"] = validate_every;
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  static const std::set<std::string> keys{"epochs", "batches_per_epoch", "batch_size", "lr0",   "weight_decay",
                                          "poly_power", "beta1",       "beta2",      "adam_eps", "folds",
                                          "seed",   "augment",           "validate_every"};
  for (const auto& [key, _] : j.items())
    if (!keys.count(key)) throw ConfigError("train config: unknown key '" + key + "'");
  TrainConfig c;
  try {
    auto read = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    };
    read("epochs", c.epochs);
    read("batches_per_epoch", c.batches_per_epoch);
    read("batch_size", c.batch_size);
    read("lr0", c.lr0);
    read("weight_decay", c.weight_decay);
    read("poly_power", c.poly_power);
    read("beta1", c.beta1);
    read("beta2", c.beta2);
    read("adam_eps", c.adam_eps);
    read("folds", c.folds);
    read("seed", c.seed);
    read("augment", c.augment);
    read("validate_every", c.validate_every);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

template <typename T>
LossTerms bce_dice_terms(const Tensor<T>& logits, const Tensor<T>& target) {
  check_loss_inputs(logits, target);
  const LossSums s = loss_sums(logits, target);
  return {s.bce / static_cast<double>(logits.numel()), 1.0 - 2.0 * s.inter / (s.pp + s.gg)};
}

template <typename T>
Tensor<T> bce_dice_loss(const Tensor<T>& logits, const Tensor<T>& target) {
  check_loss_inputs(logits, target);
  const LossSums s = loss_sums(logits, target);
  const double n = static_cast<double>(logits.numel());
  const double denom = s.pp + s.gg;
  Tensor<T> out(Shape{1}, static_cast<T>(s.bce / n + 1.0 - 2.0 * s.inter / denom));

  if (Tape<T>* tape = detail::recording_tape<T>({&logits})) {
    out.set_requires_grad(true);
    tape->record([zn = logits.node(), gn = target.node(), on = out.node(), s, n, denom]() {
      if (on->grad.empty()) return;
      const double up = static_cast<double>(on->grad[0]);
      auto& dz = detail::grad_of<T>(*zn);
      const T* z = zn->data.data();
      const T* g = gn->data.data();
      for (std::size_t i = 0; i < dz.size(); ++i) {
        const double p = sigmoid_d(static_cast<double>(z[i]));
        const double gi = static_cast<double>(g[i]);
        // The clamp has zero derivative where it is active.
        const double d_bce = (p > kProbClamp && p < 1.0 - kProbClamp) ? (p - gi) / n : 0.0;
        const double d_dice_dp = -2.0 * (gi * denom - 2.0 * p * s.inter) / (denom * denom);
        dz[i] += static_cast<T>(up * (d_bce + d_dice_dp * p * (1.0 - p)));
      }
    });
  }
  return out;
}

template Tensor<float> bce_dice_loss(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> bce_dice_loss(const Tensor<double>&, const Tensor<double>&);
template LossTerms bce_dice_terms(const Tensor<float>&, const Tensor<float>&);
template LossTerms bce_dice_terms(const Tensor<double>&, const Tensor<double>&);

double poly_lr(int epoch, const TrainConfig& c) {
  if (epoch < 0 || epoch > c.epochs)
    throw ParameterError("poly_lr: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(c.epochs) + "]");
  return c.lr0 * std::pow(1.0 - static_cast<double>(epoch) / c.epochs, c.poly_power);
}

void adam_step(Network& net, AdamState& state, double lr, const TrainConfig& c) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (auto& p : net.params()) {
    if (!is_trainable(p.kind)) continue;
    const auto n = static_cast<std::size_t>(p.value.numel());
    AdamMoments& mo = state.moments[p.name];
    if (mo.m.size() != n) {
      mo.m.assign(n, 0.0f);
      mo.v.assign(n, 0.0f);
    }
    float* theta = p.value.mutable_data();
    const bool has_grad = p.value.has_grad();
    const float* grad = has_grad ? p.value.grad().data() : nullptr;
    const double wd = p.kind == ParamKind::ConvWeight ? c.weight_decay : 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double g = (has_grad ? static_cast<double>(grad[i]) : 0.0) + wd * theta[i];
      const double m = c.beta1 * mo.m[i] + (1.0 - c.beta1) * g;
      const double v = c.beta2 * mo.v[i] + (1.0 - c.beta2) * g * g;
      mo.m[i] = static_cast<float>(m);
      mo.v[i] = static_cast<float>(v);
      theta[i] = static_cast<float>(theta[i] - lr * (m / bc1) / (std::sqrt(v / bc2) + c.adam_eps));
    }
  }
}

std::vector<int> kfold_split(int n_cases, int k, std::uint64_t seed) {
  if (n_cases < 1) throw ParameterError("kfold_split: need at least one case");
  if (k < 1 || k > n_cases)
    throw ParameterError("kfold_split: k = " + std::to_string(k) + " must lie in [1, " + std::to_string(n_cases) + "]");
  std::vector<int> order(static_cast<std::size_t>(n_cases));
  for (int i = 0; i < n_cases; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng rng(seed);
  for (int i = n_cases - 1; i > 0; --i)
    std::swap(order[static_cast<std::size_t>(i)], order[rng.uniform_int(static_cast<std::uint64_t>(i) + 1)]);
  std::vector<int> fold(static_cast<std::size_t>(n_cases));
  int pos = 0;
  for (int f = 0; f < k; ++f) {
    const int size = n_cases / k + (f < n_cases % k ? 1 : 0);
    for (int i = 0; i < size; ++i) fold[static_cast<std::size_t>(order[static_cast<std::size_t>(pos++)])] = f;
  }
  return fold;
}

std::string dataset_hash(const DatasetSpec& spec) {
  return hex64(fnv1a64(manifest_to_json(spec, false).dump()));
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  nlohmann::ordered_json meta;
  meta["format"] = "ib3dseg-checkpoint";
  meta["version"] = IB3DSEG_VERSION;
  meta["network"] = ck.network.config().to_json();
  meta["train"] = ck.train.to_json();
  meta["predict"] = predict_to_json(ck.predict);
  meta["fold"] = ck.fold;
  meta["epoch"] = ck.epoch;
  meta["best_epoch"] = ck.best_epoch;
  meta["best_dsc"] = ck.best_dsc;
  meta["adam_step"] = ck.adam.step;
  meta["dataset_hash"] = ck.dataset_hash;
  meta["config_hash"] = hex64(fnv1a64(meta["network"].dump() + meta["train"].dump()));
  const std::string text = meta.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint '" + path + "'");
    out.write(kCkptMagic, sizeof kCkptMagic);
    put<std::uint32_t>(out, kCkptVersion);
    put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    std::uint32_t count = static_cast<std::uint32_t>(ck.network.params().size());
    for (const auto& p : ck.network.params())
      if (is_trainable(p.kind) && ck.adam.moments.count(p.name)) count += 2;
    put<std::uint32_t>(out, count);
    for (const auto& p : ck.network.params())
      write_tensor(out, p.name, static_cast<std::uint8_t>(p.kind), p.value.shape(), p.value.data(), p.value.numel());
    for (const auto& p : ck.network.params()) {
      const auto it = ck.adam.moments.find(p.name);
      if (!is_trainable(p.kind) || it == ck.adam.moments.end()) continue;
      write_tensor(out, p.name, kAdamM, p.value.shape(), it->second.m.data(), p.value.numel());
      write_tensor(out, p.name, kAdamV, p.value.shape(), it->second.v.data(), p.value.numel());
    }
    if (!out) throw Error("failed writing checkpoint '" + path + "'");
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint '" + path + "'");
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCkptMagic, sizeof magic) != 0) throw FormatError("not a checkpoint: '" + path + "'", 0);
  const auto version = get<std::uint32_t>(in, path);
  if (version != kCkptVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " in '" + path + "'", 8);
  const auto meta_len = get<std::uint64_t>(in, path);
  if (meta_len > (std::uint64_t{1} << 26)) throw FormatError("implausible checkpoint metadata size", 12);
  std::string text(static_cast<std::size_t>(meta_len), '\0');
  in.read(text.data(), static_cast<std::streamsize>(meta_len));
  if (!in) throw FormatError("truncated checkpoint metadata in '" + path + "'", 20);

  Checkpoint ck;
  NetworkConfig net_config;
  try {
    const auto meta = nlohmann::json::parse(text);
    net_config = NetworkConfig::from_json(meta.at("network"));
    ck.train = TrainConfig::from_json(meta.at("train"));
    ck.predict = predict_from_json(meta.at("predict"));
    ck.fold = meta.at("fold").get<int>();
    ck.epoch = meta.at("epoch").get<int>();
    ck.best_epoch = meta.at("best_epoch").get<int>();
    ck.best_dsc = meta.at("best_dsc").get<double>();
    ck.adam.step = meta.at("adam_step").get<std::int64_t>();
    ck.dataset_hash = meta.at("dataset_hash").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad checkpoint metadata in '" + path + "': " + e.what(), 20);
  } catch (const ConfigError& e) {
    throw FormatError("bad checkpoint metadata in '" + path + "': " + e.what(), 20);
  }

  // The parameter set is fixed by the config; the file only supplies values.
  Network net = build(net_config, 0);
  std::set<std::string> seen;
  const auto count = get<std::uint32_t>(in, path);
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name_len = get<std::uint16_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto kind = get<std::uint8_t>(in, path);
    const auto rank = get<std::uint8_t>(in, path);
    Shape shape(rank);
    for (auto& d : shape) d = get<std::int64_t>(in, path);
    if (!net.has_param(name)) throw FormatError("checkpoint tensor '" + name + "' does not belong to the network");
    Tensor<float>& target = net.param(name);
    if (target.shape() != shape)
      throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(shape) + ", expected " +
                        shape_str(target.shape()));
    const auto n = static_cast<std::size_t>(target.numel());
    std::vector<float> values(n);
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (!in) throw FormatError("truncated checkpoint tensor '" + name + "' in '" + path + "'");
    if (kind == kAdamM) {
      ck.adam.moments[name].m = std::move(values);
    } else if (kind == kAdamV) {
      ck.adam.moments[name].v = std::move(values);
    } else {
      std::copy(values.begin(), values.end(), target.mutable_data());
      seen.insert(name);
    }
  }
  for (const auto& p : net.params())
    if (!seen.count(p.name)) throw FormatError("checkpoint lacks tensor '" + p.name + "'");
  ck.network = std::move(net);
  return ck;
}

TrainResult train(const DatasetSpec& data, const NetworkConfig& net_config, const TrainConfig& config,
                  const std::string& out_dir, const TrainOptions& options) {
  data.validate();
  net_config.validate();
  config.validate();
  net_config.validate_patch(data.patch_size);
  const int n = static_cast<int>(data.cases.size());
  if (config.folds > n) throw ConfigError("folds = " + std::to_string(config.folds) + " exceeds the case count " + std::to_string(n));
  const std::vector<int> assignment =
      config.folds == 1 ? std::vector<int>(static_cast<std::size_t>(n), 0)
                        : kfold_split(n, config.folds, derive_seed(config.seed, {fnv1a64("kfold")}));

  std::vector<Prepared> raw(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    raw[i].image = read_volume(data.image_path(i), VolumeKind::Image);
    raw[i].label = read_volume(data.label_path(i), VolumeKind::Label);
    if (raw[i].image.dims != raw[i].label.dims)
      throw ShapeError("case '" + data.cases[i].id + "': image and label dims differ");
    if (!raw[i].label.is_binary()) throw ConfigError("case '" + data.cases[i].id + "': label is not binary");
  }

  fs::create_directories(out_dir);
  save_manifest(data, (fs::path(out_dir) / "manifest.json").string(), true);
  const std::string data_hash = dataset_hash(data);
  const AugmentConfig aug = config.augment ? AugmentConfig{} : AugmentConfig::none();
  const Dims3 patch = data.patch_size;
  const Index patch_voxels = patch[0] * patch[1] * patch[2];

  TrainResult result;
  for (int f = 0; f < config.folds; ++f) {
    if (!options.only_folds.empty() &&
        std::find(options.only_folds.begin(), options.only_folds.end(), f) == options.only_folds.end())
      continue;
    std::vector<int> train_idx, val_idx;
    for (int i = 0; i < n; ++i) {
      if (config.folds == 1 || assignment[i] != f) train_idx.push_back(i);
      if (assignment[i] == f) val_idx.push_back(i);
    }

    PredictSettings settings;
    settings.modality = data.modality;
    settings.target_spacing = data.target_spacing;
    settings.patch_size = patch;
    settings.ct_stats = data.ct_stats;
    if (data.modality == Modality::CT && !settings.ct_stats) {
      std::vector<std::pair<const Volume*, const Volume*>> pool;
      for (int i : train_idx) pool.emplace_back(&raw[i].image, &raw[i].label);
      settings.ct_stats = compute_ct_stats(pool);
    }
    std::vector<Prepared> prep(static_cast<std::size_t>(n));
    std::vector<SamplingIndex> index(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      prep[i].image = preprocess_image(raw[i].image, data.modality, data.target_spacing, settings.ct_stats);
      prep[i].label = preprocess_label(raw[i].label, data.target_spacing);
      index[i] = build_sampling_index(prep[i].label);
    }

    const fs::path fold_dir = fs::path(out_dir) / ("fold_" + std::to_string(f));
    fs::create_directories(fold_dir);
    std::ofstream csv(fold_dir / "log.csv");
    csv << "epoch,loss,lr,val_dsc\n";

    Checkpoint ck;
    ck.network = build(net_config, derive_seed(config.seed, {fnv1a64("init"), static_cast<std::uint64_t>(f)}));
    ck.network.enable_grad();
    ck.train = config;
    ck.predict = settings;
    ck.fold = f;
    ck.dataset_hash = data_hash;
    ck.best_dsc = -1.0;
    Network& net = ck.network;

    FoldResult fr;
    fr.fold = f;
    for (int i : val_idx) fr.validation_ids.push_back(data.cases[i].id);
    fr.best_dsc = -1.0;

    Tensor<float> x({config.batch_size, 1, patch[0], patch[1], patch[2]});
    Tensor<float> y({config.batch_size, 1, patch[0], patch[1], patch[2]});
    for (int e = 0; e < config.epochs; ++e) {
      const double lr = poly_lr(e, config);
      double loss_sum = 0.0;
      for (int b = 0; b < config.batches_per_epoch; ++b) {
        Rng rng(derive_seed(config.seed, {static_cast<std::uint64_t>(f), static_cast<std::uint64_t>(e),
                                          static_cast<std::uint64_t>(b)}));
        // Fresh tensors each step: the tape keeps references to the previous ones.
        x = Tensor<float>(x.shape());
        y = Tensor<float>(y.shape());
        for (int s = 0; s < config.batch_size; ++s) {
          const int c = train_idx[rng.uniform_int(train_idx.size())];
          Patch p = sample_patch(prep[c].image, prep[c].label, patch, rng, &index[c]);
          augment(p.image, p.label, rng, aug);
          std::copy(p.image.data.begin(), p.image.data.end(), x.mutable_data() + s * patch_voxels);
          std::copy(p.label.data.begin(), p.label.data.end(), y.mutable_data() + s * patch_voxels);
        }
        Tape<float> tape;
        double loss_value;
        {
          TapeScope<float> scope(&tape);
          const Tensor<float> loss = bce_dice_loss(net.forward(x, true), y);
          loss_value = loss.item();
          tape.backward(loss);
        }
        double max_grad = 0.0;
        for (const auto& p : net.params())
          if (p.value.has_grad())
            for (float g : p.value.grad()) max_grad = std::max(max_grad, static_cast<double>(std::abs(g)));
        if (!std::isfinite(loss_value) || !std::isfinite(max_grad))
          throw TrainingError("non-finite training step in fold " + std::to_string(f) + ", epoch " +
                              std::to_string(e + 1) + ", batch " + std::to_string(b + 1) + ": loss " +
                              fmt(loss_value) + ", max |grad| " + fmt(max_grad));
        adam_step(net, ck.adam, lr, config);
        net.zero_grad();
        loss_sum += loss_value;
      }

      EpochLog row;
      row.epoch = e + 1;
      row.loss = loss_sum / config.batches_per_epoch;
      row.lr = lr;
      ck.epoch = e + 1;
      if ((e + 1) % config.validate_every == 0 || e + 1 == config.epochs) {
        double total = 0.0;
        for (int i : val_idx) {
          const Volume prob = sliding_window_predict(net, prep[i].image, patch);
          Volume mask(prob.dims, prob.spacing, VolumeKind::Label);
          for (std::size_t v = 0; v < prob.data.size(); ++v)
            mask.data[v] = prob.data[v] >= settings.threshold ? 1.0f : 0.0f;
          total += dsc(mask, prep[i].label);
        }
        row.val_dsc = total / static_cast<double>(val_idx.size());
        if (*row.val_dsc > fr.best_dsc) {
          fr.best_dsc = *row.val_dsc;
          fr.best_epoch = e + 1;
          ck.best_dsc = fr.best_dsc;
          ck.best_epoch = fr.best_epoch;
          save_checkpoint(ck, (fold_dir / "best.ckpt").string());
        }
      }
      csv << row.epoch << ',' << fmt(row.loss) << ',' << fmt(row.lr) << ','
          << (row.val_dsc ? fmt(*row.val_dsc) : std::string()) << '\n';
      csv.flush();
      log_info("fold " + std::to_string(f) + " epoch " + std::to_string(row.epoch) + "/" +
               std::to_string(config.epochs) + " loss " + fmt(row.loss) +
               (row.val_dsc ? " val_dsc " + fmt(*row.val_dsc) : std::string()));
      if (options.on_epoch) options.on_epoch(f, row);
      fr.log.push_back(row);
    }
    save_checkpoint(ck, (fold_dir / "last.ckpt").string());
    result.folds.push_back(std::move(fr));
  }

  double sum = 0.0;
  for (const auto& fr : result.folds) sum += fr.best_dsc;
  result.mean_best_dsc = result.folds.empty() ? 0.0 : sum / static_cast<double>(result.folds.size());

  nlohmann::ordered_json summary;
  summary["version"] = IB3DSEG_VERSION;
  summary["model"] = model_label(net_config);
  summary["network"] = net_config.to_json();
  summary["train"] = config.to_json();
  summary["dataset_hash"] = data_hash;
  summary["folds"] = nlohmann::ordered_json::array();
  for (const auto& fr : result.folds)
    summary["folds"].push_back({{"fold", fr.fold},
                                {"validation_cases", fr.validation_ids},
                                {"best_dsc", fr.best_dsc},
                                {"best_epoch", fr.best_epoch},
                                {"checkpoint", "fold_" + std::to_string(fr.fold) + "/best.ckpt"}});
  summary["mean_best_dsc"] = result.mean_best_dsc;
  std::ofstream(fs::path(out_dir) / "summary.json") << summary.dump(2) << '\n';
  return result;
}

}  // namespace ib3dseg
