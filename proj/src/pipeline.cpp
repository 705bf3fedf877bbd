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

#include "ib3dseg/pipeline.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "ib3dseg/error.hpp"
#include "ib3dseg/log.hpp"
#include "json.hpp"

namespace ib3dseg {
namespace {

using I64 = std::int64_t;

// Per-axis sampling table for resize_grid.
struct AxisMap {
  std::vector<I64> lo, hi;
  std::vector<float> frac;
  std::vector<I64> nearest;
};

AxisMap axis_map(I64 n_src, I64 n_dst) {
  AxisMap m;
  m.lo.resize(n_dst);
  m.hi.resize(n_dst);
  m.frac.resize(n_dst);
  m.nearest.resize(n_dst);
  const double ratio = static_cast<double>(n_src) / static_cast<double>(n_dst);
  for (I64 i = 0; i < n_dst; ++i) {
    const double pos = (static_cast<double>(i) + 0.5) * ratio;
    const double src = std::clamp(pos - 0.5, 0.0, static_cast<double>(n_src - 1));
    const I64 lo = static_cast<I64>(std::floor(src));
    m.lo[i] = lo;
    m.hi[i] = std::min(lo + 1, n_src - 1);
    m.frac[i] = static_cast<float>(src - static_cast<double>(lo));
    m.nearest[i] = std::min(static_cast<I64>(std::floor(pos)), n_src - 1);
  }
  return m;
}

std::string format_number(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

double parse_number(std::string_view s, const std::string& what) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ConfigError("invalid number '" + std::string(s) + "' in " + what);
  return v;
}

// Sum of random plane waves, zero mean, unit-ish amplitude.
class SmoothField {
 public:
  SmoothField(Rng& rng, int waves, double min_wavelength, double max_wavelength) {
    for (int i = 0; i < waves; ++i) {
      Wave w;
      const double len = rng.uniform(min_wavelength, max_wavelength);
      double dir[3] = {rng.normal(), rng.normal(), rng.normal()};
      const double norm = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]) + 1e-12;
      for (int a = 0; a < 3; ++a) w.k[a] = 2.0 * std::numbers::pi / len * dir[a] / norm;
      w.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      waves_.push_back(w);
    }
    scale_ = std::sqrt(2.0 / static_cast<double>(std::max(waves, 1)));
  }

  double operator()(double z, double y, double x) const {
    double s = 0.0;
    for (const Wave& w : waves_) s += std::cos(w.k[0] * z + w.k[1] * y + w.k[2] * x + w.phase);
    return s * scale_;
  }

 private:
  struct Wave {
    double k[3];
    double phase;
  };
  std::vector<Wave> waves_;
  double scale_ = 1.0;
};

std::array<std::array<double, 3>, 3> random_rotation(Rng& rng) {
  double q[4];
  double n = 0.0;
  do {
    for (double& c : q) c = rng.normal();
    n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
  } while (n < 1e-9);
  const double w = q[0] / n, x = q[1] / n, y = q[2] / n, z = q[3] / n;
  return {{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
           {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
           {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}}};
}

void blur_axis(std::vector<float>& data, const Dims3& dims, int axis, double sigma) {
  const I64 radius = static_cast<I64>(std::ceil(4.0 * sigma));
  if (radius < 1) return;
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (I64 i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = v;
    total += v;
  }
  for (double& v : kernel) v /= total;

  const I64 n = dims[axis];
  const I64 stride = axis == 0 ? dims[1] * dims[2] : axis == 1 ? dims[2] : 1;
  const I64 lines = dims[0] * dims[1] * dims[2] / n;
  const std::vector<float> src = data;
#pragma omp parallel for schedule(static) if (lines * n > (1 << 16))
  for (I64 line = 0; line < lines; ++line) {
    // Base offset of this line: enumerate the two remaining axes.
    I64 base = 0;
    if (axis == 0)
      base = line;
    else if (axis == 1)
      base = (line / dims[2]) * dims[1] * dims[2] + line % dims[2];
    else
      base = line * dims[2];
    for (I64 i = 0; i < n; ++i) {
      double acc = 0.0;
      for (I64 t = -radius; t <= radius; ++t) {
        const I64 j = std::clamp<I64>(i + t, 0, n - 1);
        acc += kernel[static_cast<std::size_t>(t + radius)] * src[static_cast<std::size_t>(base + j * stride)];
      }
      data[static_cast<std::size_t>(base + i * stride)] = static_cast<float>(acc);
    }
  }
}

std::vector<float> scale_grid(const std::vector<float>& src, const Dims3& d, double factor, Interp mode) {
  std::vector<float> out(src.size());
  std::array<double, 3> c{};
  for (int a = 0; a < 3; ++a) c[a] = 0.5 * static_cast<double>(d[a] - 1);
  auto sample = [&](int axis, I64 i) {
    return std::clamp((static_cast<double>(i) - c[axis]) / factor + c[axis], 0.0, static_cast<double>(d[axis] - 1));
  };
  for (I64 z = 0; z < d[0]; ++z)
    for (I64 y = 0; y < d[1]; ++y)
      for (I64 x = 0; x < d[2]; ++x) {
        const double sz = sample(0, z), sy = sample(1, y), sx = sample(2, x);
        float v = 0.0f;
        if (mode == Interp::Nearest) {
          const I64 iz = static_cast<I64>(std::lround(sz)), iy = static_cast<I64>(std::lround(sy)),
                    ix = static_cast<I64>(std::lround(sx));
          v = src[static_cast<std::size_t>((iz * d[1] + iy) * d[2] + ix)];
        } else {
          const I64 z0 = static_cast<I64>(sz), y0 = static_cast<I64>(sy), x0 = static_cast<I64>(sx);
          const I64 z1 = std::min(z0 + 1, d[0] - 1), y1 = std::min(y0 + 1, d[1] - 1), x1 = std::min(x0 + 1, d[2] - 1);
          const double fz = sz - z0, fy = sy - y0, fx = sx - x0;
          auto at = [&](I64 zz, I64 yy, I64 xx) { return src[static_cast<std::size_t>((zz * d[1] + yy) * d[2] + xx)]; };
          const double c00 = at(z0, y0, x0) * (1 - fx) + at(z0, y0, x1) * fx;
          const double c01 = at(z0, y1, x0) * (1 - fx) + at(z0, y1, x1) * fx;
          const double c10 = at(z1, y0, x0) * (1 - fx) + at(z1, y0, x1) * fx;
          const double c11 = at(z1, y1, x0) * (1 - fx) + at(z1, y1, x1) * fx;
          v = static_cast<float>((c00 * (1 - fy) + c01 * fy) * (1 - fz) + (c10 * (1 - fy) + c11 * fy) * fz);
        }
        out[static_cast<std::size_t>((z * d[1] + y) * d[2] + x)] = v;
      }
  return out;
}

}  // namespace

std::string_view to_string(Modality m) { return m == Modality::MR ? "MR" : "CT"; }

Modality parse_modality(std::string_view s) {
  if (s == "MR" || s == "mr") return Modality::MR;
  if (s == "CT" || s == "ct") return Modality::CT;
  throw ConfigError("unknown modality '" + std::string(s) + "' (expected MR or CT)");
}

Dims3 resampled_dims(const Dims3& dims, const Vec3& spacing, const Vec3& target) {
  Dims3 out{};
  for (int a = 0; a < 3; ++a) {
    if (!(spacing[a] > 0.0) || !(target[a] > 0.0)) throw ParameterError("spacing must be positive");
    out[a] = std::max<I64>(1, std::llround(static_cast<double>(dims[a]) * spacing[a] / target[a]));
  }
  return out;
}

std::vector<float> resize_grid(const std::vector<float>& src, const Dims3& sd, const Dims3& dd, Interp mode) {
  if (static_cast<I64>(src.size()) != sd[0] * sd[1] * sd[2]) throw ShapeError("resize_grid: data/dims mismatch");
  for (int a = 0; a < 3; ++a)
    if (dd[a] < 1) throw ShapeError("resize_grid: target dims must be positive");
  const AxisMap mz = axis_map(sd[0], dd[0]), my = axis_map(sd[1], dd[1]), mx = axis_map(sd[2], dd[2]);
  std::vector<float> out(static_cast<std::size_t>(dd[0] * dd[1] * dd[2]));
  auto at = [&](I64 z, I64 y, I64 x) { return src[static_cast<std::size_t>((z * sd[1] + y) * sd[2] + x)]; };
#pragma omp parallel for schedule(static) if (out.size() > (1u << 16))
  for (I64 z = 0; z < dd[0]; ++z)
    for (I64 y = 0; y < dd[1]; ++y)
      for (I64 x = 0; x < dd[2]; ++x) {
        float v;
        if (mode == Interp::Nearest) {
          v = at(mz.nearest[z], my.nearest[y], mx.nearest[x]);
        } else {
          const float fz = mz.frac[z], fy = my.frac[y], fx = mx.frac[x];
          const I64 z0 = mz.lo[z], z1 = mz.hi[z], y0 = my.lo[y], y1 = my.hi[y], x0 = mx.lo[x], x1 = mx.hi[x];
          const float c00 = at(z0, y0, x0) + fx * (at(z0, y0, x1) - at(z0, y0, x0));
          const float c01 = at(z0, y1, x0) + fx * (at(z0, y1, x1) - at(z0, y1, x0));
          const float c10 = at(z1, y0, x0) + fx * (at(z1, y0, x1) - at(z1, y0, x0));
          const float c11 = at(z1, y1, x0) + fx * (at(z1, y1, x1) - at(z1, y1, x0));
          const float c0 = c00 + fy * (c01 - c00);
          const float c1 = c10 + fy * (c11 - c10);
          v = c0 + fz * (c1 - c0);
        }
        out[static_cast<std::size_t>((z * dd[1] + y) * dd[2] + x)] = v;
      }
  return out;
}

Volume resample(const Volume& v, const Vec3& target_spacing, Interp mode) {
  const Dims3 dims = resampled_dims(v.dims, v.spacing, target_spacing);
  Volume out;
  out.dims = dims;
  out.spacing = target_spacing;
  out.origin = v.origin;
  out.kind = v.kind;
  out.data = resize_grid(v.data, v.dims, dims, mode);
  return out;
}

Volume resample_to_dims(const Volume& v, const Dims3& dims, Interp mode) {
  Volume out;
  out.dims = dims;
  for (int a = 0; a < 3; ++a)
    out.spacing[a] = v.spacing[a] * static_cast<double>(v.dims[a]) / static_cast<double>(dims[a]);
  out.origin = v.origin;
  out.kind = v.kind;
  out.data = resize_grid(v.data, v.dims, dims, mode);
  return out;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw DegenerateInputError("percentile of an empty set");
  if (!(q >= 0.0 && q <= 100.0)) throw ParameterError("percentile q must lie in [0, 100]");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

Volume normalize_mr(const Volume& v) {
  double mean = 0.0;
  for (float x : v.data) mean += x;
  mean /= static_cast<double>(v.data.size());
  double var = 0.0;
  for (float x : v.data) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.data.size());
  if (!(var > 0.0)) throw DegenerateInputError("z-score normalization of a constant volume");
  const double inv = 1.0 / std::sqrt(var);
  Volume out = v;
  for (float& x : out.data) x = static_cast<float>((x - mean) * inv);
  return out;
}

CtStats compute_ct_stats(const std::vector<std::pair<const Volume*, const Volume*>>& cases) {
  std::vector<double> fg;
  for (const auto& [image, label] : cases) {
    if (image->dims != label->dims) throw ShapeError("compute_ct_stats: image/label dims differ");
    for (std::size_t i = 0; i < image->data.size(); ++i)
      if (label->data[i] > 0.0f) fg.push_back(image->data[i]);
  }
  if (fg.empty()) throw DegenerateInputError("CT statistics need a nonempty pooled foreground");
  CtStats s;
  double mean = 0.0;
  for (double v : fg) mean += v;
  mean /= static_cast<double>(fg.size());
  double var = 0.0;
  for (double v : fg) var += (v - mean) * (v - mean);
  var /= static_cast<double>(fg.size());
  if (!(var > 0.0)) throw DegenerateInputError("CT foreground intensities have zero spread");
  s.mean = mean;
  s.std = std::sqrt(var);
  s.clip_lo = percentile(fg, 0.5);
  s.clip_hi = percentile(std::move(fg), 99.5);
  return s;
}

Volume normalize_ct(const Volume& v, const CtStats& stats) {
  if (!(stats.std > 0.0)) throw DegenerateInputError("CT normalization with zero standard deviation");
  Volume out = v;
  for (float& x : out.data) {
    const double c = std::clamp(static_cast<double>(x), stats.clip_lo, stats.clip_hi);
    x = static_cast<float>((c - stats.mean) / stats.std);
  }
  return out;
}

std::string DatasetSpec::image_path(std::size_t i) const {
  const std::filesystem::path p(cases.at(i).image);
  return p.is_absolute() ? p.string() : (std::filesystem::path(base_dir) / p).string();
}

std::string DatasetSpec::label_path(std::size_t i) const {
  const std::filesystem::path p(cases.at(i).label);
  return p.is_absolute() ? p.string() : (std::filesystem::path(base_dir) / p).string();
}

void DatasetSpec::validate() const {
  if (cases.empty()) throw ConfigError("dataset has no cases");
  std::set<std::string> ids;
  for (const auto& c : cases) {
    if (c.id.empty() || c.image.empty() || c.label.empty()) throw ConfigError("dataset case needs id, image, label");
    if (!ids.insert(c.id).second) throw ConfigError("duplicate case id '" + c.id + "'");
  }
  for (int a = 0; a < 3; ++a) {
    if (!(target_spacing[a] > 0.0)) throw ConfigError("target_spacing must be positive");
    if (patch_size[a] < 1) throw ConfigError("patch_size must be positive");
  }
}

DatasetSpec manifest_from_json(const nlohmann::json& j, const std::string& base_dir, const std::string& origin) {
  if (!j.is_object()) throw ConfigError(origin + ": dataset must be a JSON object");
  static const std::set<std::string> allowed{"cases", "modality", "target_spacing", "patch_size", "ct_stats"};
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key)) throw ConfigError(origin + ": unknown key '" + key + "'");
  DatasetSpec spec;
  try {
    for (const auto& c : j.at("cases")) {
      for (const auto& [key, _] : c.items())
        if (key != "id" && key != "image" && key != "label")
          throw ConfigError(origin + ": unknown case key '" + key + "'");
      spec.cases.push_back({c.at("id").get<std::string>(), c.at("image").get<std::string>(),
                            c.at("label").get<std::string>()});
    }
    if (j.contains("modality")) spec.modality = parse_modality(j.at("modality").get<std::string>());
    if (j.contains("target_spacing")) spec.target_spacing = j.at("target_spacing").get<Vec3>();
    if (j.contains("patch_size")) spec.patch_size = j.at("patch_size").get<Dims3>();
    if (j.contains("ct_stats")) {
      const auto& s = j.at("ct_stats");
      spec.ct_stats = CtStats{s.at("clip_lo").get<double>(), s.at("clip_hi").get<double>(), s.at("mean").get<double>(),
                              s.at("std").get<double>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  spec.base_dir = base_dir;
  spec.validate();
  return spec;
}

nlohmann::ordered_json manifest_to_json(const DatasetSpec& spec, bool absolute_paths) {
  nlohmann::ordered_json j;
  j["cases"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < spec.cases.size(); ++i) {
    const auto& c = spec.cases[i];
    if (absolute_paths)
      j["cases"].push_back({{"id", c.id},
                            {"image", std::filesystem::absolute(spec.image_path(i)).lexically_normal().string()},
                            {"label", std::filesystem::absolute(spec.label_path(i)).lexically_normal().string()}});
    else
      j["cases"].push_back({{"id", c.id}, {"image", c.image}, {"label", c.label}});
  }
  j["modality"] = to_string(spec.modality);
  j["target_spacing"] = spec.target_spacing;
  j["patch_size"] = spec.patch_size;
  if (spec.ct_stats)
    j["ct_stats"] = {{"clip_lo", spec.ct_stats->clip_lo},
                     {"clip_hi", spec.ct_stats->clip_hi},
                     {"mean", spec.ct_stats->mean},
                     {"std", spec.ct_stats->std}};
  return j;
}

DatasetSpec load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open manifest '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed manifest '" + path + "': " + e.what());
  }
  return manifest_from_json(j, std::filesystem::path(path).parent_path().string(), "manifest '" + path + "'");
}

void save_manifest(const DatasetSpec& spec, const std::string& path, bool absolute_paths) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write manifest '" + path + "'");
  out << manifest_to_json(spec, absolute_paths).dump(2) << '\n';
}

Volume preprocess_image(const Volume& raw, Modality modality, const Vec3& target_spacing,
                        const std::optional<CtStats>& ct_stats) {
  const Volume r = resample(raw, target_spacing, Interp::Trilinear);
  if (modality == Modality::MR) return normalize_mr(r);
  if (!ct_stats) throw ConfigError("CT preprocessing requires ct_stats");
  return normalize_ct(r, *ct_stats);
}

Volume preprocess_label(const Volume& raw, const Vec3& target_spacing) {
  return resample(raw, target_spacing, Interp::Nearest);
}

SamplingIndex build_sampling_index(const Volume& label) {
  SamplingIndex idx;
  for (std::size_t i = 0; i < label.data.size(); ++i)
    (label.data[i] > 0.0f ? idx.foreground : idx.background).push_back(static_cast<I64>(i));
  return idx;
}

Patch sample_patch(const Volume& image, const Volume& label, const Dims3& patch_size, Rng& rng,
                   const SamplingIndex* index) {
  if (image.dims != label.dims) throw ShapeError("sample_patch: image/label dims differ");
  SamplingIndex local;
  if (!index) {
    local = build_sampling_index(label);
    index = &local;
  }
  // The branch is drawn first so that its probability is exactly 1/2.
  const bool want_fg = rng.bernoulli(0.5);
  const bool use_fg = index->background.empty() || (want_fg && !index->foreground.empty());
  const auto& pool = use_fg ? index->foreground : index->background;
  const I64 linear = pool[rng.uniform_int(pool.size())];

  Patch p;
  p.foreground_centered = use_fg;
  p.center = {linear / (image.dims[1] * image.dims[2]), (linear / image.dims[2]) % image.dims[1],
              linear % image.dims[2]};
  Dims3 start{};
  for (int a = 0; a < 3; ++a) {
    if (image.dims[a] >= patch_size[a])
      start[a] = std::clamp<I64>(p.center[a] - patch_size[a] / 2, 0, image.dims[a] - patch_size[a]);
    else
      start[a] = -((patch_size[a] - image.dims[a]) / 2);
  }
  p.image = Volume(patch_size, image.spacing, VolumeKind::Image);
  p.label = Volume(patch_size, label.spacing, VolumeKind::Label);
  for (I64 z = 0; z < patch_size[0]; ++z) {
    const I64 sz = start[0] + z;
    if (sz < 0 || sz >= image.dims[0]) continue;
    for (I64 y = 0; y < patch_size[1]; ++y) {
      const I64 sy = start[1] + y;
      if (sy < 0 || sy >= image.dims[1]) continue;
      for (I64 x = 0; x < patch_size[2]; ++x) {
        const I64 sx = start[2] + x;
        if (sx < 0 || sx >= image.dims[2]) continue;
        p.image.at(z, y, x) = image.at(sz, sy, sx);
        p.label.at(z, y, x) = label.at(sz, sy, sx);
      }
    }
  }
  return p;
}

AugmentConfig AugmentConfig::none() {
  AugmentConfig c;
  c.p_rotate = c.p_flip = c.p_scale = c.p_noise = c.p_blur = c.p_gamma = 0.0;
  return c;
}

void flip_axis(Volume& v, int axis) {
  const Dims3 d = v.dims;
  std::vector<float> out(v.data.size());
  for (I64 z = 0; z < d[0]; ++z)
    for (I64 y = 0; y < d[1]; ++y)
      for (I64 x = 0; x < d[2]; ++x) {
        const I64 sz = axis == 0 ? d[0] - 1 - z : z;
        const I64 sy = axis == 1 ? d[1] - 1 - y : y;
        const I64 sx = axis == 2 ? d[2] - 1 - x : x;
        out[static_cast<std::size_t>(v.index(z, y, x))] = v.at(sz, sy, sx);
      }
  v.data = std::move(out);
}

void rotate90(Volume& v, int quarter_turns) {
  const int q = ((quarter_turns % 4) + 4) % 4;
  if (q == 0) return;
  if (q == 2) {
    flip_axis(v, 1);
    flip_axis(v, 2);
    return;
  }
  if (v.dims[1] != v.dims[2]) throw ShapeError("rotate90 by an odd number of turns needs H == W");
  const I64 n = v.dims[1];
  std::vector<float> out(v.data.size());
  for (I64 z = 0; z < v.dims[0]; ++z)
    for (I64 y = 0; y < n; ++y)
      for (I64 x = 0; x < n; ++x) {
        // One quarter turn: (y, x) <- (x, n-1-y); three turns is the inverse.
        const float val = q == 1 ? v.at(z, x, n - 1 - y) : v.at(z, n - 1 - x, y);
        out[static_cast<std::size_t>(v.index(z, y, x))] = val;
      }
  v.data = std::move(out);
}

void augment(Volume& image, Volume& label, Rng& rng, const AugmentConfig& cfg) {
  if (image.dims != label.dims) throw ShapeError("augment: image/label dims differ");
  // Every draw happens unconditionally so that the stream layout does not
  // depend on which transforms fire.
  const bool do_rotate = rng.bernoulli(cfg.p_rotate);
  const int turns = 1 + static_cast<int>(rng.uniform_int(3));
  bool flips[3];
  for (bool& f : flips) f = rng.bernoulli(cfg.p_flip);
  const bool do_scale = rng.bernoulli(cfg.p_scale);
  const double factor = rng.uniform(1.0 - cfg.scale_range, 1.0 + cfg.scale_range);
  const bool do_noise = rng.bernoulli(cfg.p_noise);
  const double noise_sigma = rng.uniform(0.0, cfg.noise_sigma_max);
  const std::uint64_t noise_seed = rng.next_u64();
  const bool do_blur = rng.bernoulli(cfg.p_blur);
  const double blur_sigma = rng.uniform(cfg.blur_sigma_lo, cfg.blur_sigma_hi);
  const bool do_gamma = rng.bernoulli(cfg.p_gamma);
  const double gamma = rng.uniform(cfg.gamma_lo, cfg.gamma_hi);

  if (do_rotate) {
    const int t = image.dims[1] == image.dims[2] ? turns : 2;
    rotate90(image, t);
    rotate90(label, t);
  }
  for (int a = 0; a < 3; ++a)
    if (flips[a]) {
      flip_axis(image, a);
      flip_axis(label, a);
    }
  if (do_scale) {
    image.data = scale_grid(image.data, image.dims, factor, Interp::Trilinear);
    label.data = scale_grid(label.data, label.dims, factor, Interp::Nearest);
  }
  if (do_noise) {
    Rng noise(noise_seed);
    for (float& v : image.data) v += static_cast<float>(noise.normal(0.0, noise_sigma));
  }
  if (do_blur) image = gaussian_blur(image, {blur_sigma, blur_sigma, blur_sigma});
  if (do_gamma) {
    const auto [lo_it, hi_it] = std::minmax_element(image.data.begin(), image.data.end());
    const double lo = *lo_it, range = static_cast<double>(*hi_it) - lo;
    if (range > 0.0)
      for (float& v : image.data) v = static_cast<float>(lo + range * std::pow((v - lo) / range, gamma));
  }
}

std::string CorruptionSpec::name() const {
  switch (kind) {
    case CorruptionKind::None: return "none";
    case CorruptionKind::GaussianBlur: return "blur:" + format_number(sigma);
    case CorruptionKind::RandomGaussianNoise: return "noise:" + format_number(sigma);
  }
  return "none";
}

CorruptionSpec CorruptionSpec::parse(std::string_view text, std::uint64_t seed) {
  CorruptionSpec s;
  s.seed = seed;
  if (text == "none") return s;
  const auto colon = text.find(':');
  if (colon == std::string_view::npos) throw ConfigError("corruption '" + std::string(text) + "' needs a sigma");
  const std::string_view kind = text.substr(0, colon);
  if (kind == "blur")
    s.kind = CorruptionKind::GaussianBlur;
  else if (kind == "noise")
    s.kind = CorruptionKind::RandomGaussianNoise;
  else
    throw ConfigError("unknown corruption kind '" + std::string(kind) + "'");
  s.sigma = parse_number(text.substr(colon + 1), "corruption '" + std::string(text) + "'");
  if (!(s.sigma >= 0.0)) throw ConfigError("corruption sigma must be >= 0");
  return s;
}

Volume gaussian_blur(const Volume& v, const Vec3& sigma_voxels) {
  Volume out = v;
  for (int a = 0; a < 3; ++a)
    if (sigma_voxels[a] > 0.0) blur_axis(out.data, out.dims, a, sigma_voxels[a]);
  return out;
}

Volume corrupt(const Volume& v, const CorruptionSpec& spec) {
  if (!(spec.sigma >= 0.0)) throw ParameterError("corruption sigma must be >= 0");
  switch (spec.kind) {
    case CorruptionKind::None: return v;
    case CorruptionKind::GaussianBlur: {
      Vec3 s{};
      for (int a = 0; a < 3; ++a) s[a] = spec.sigma / v.spacing[a];
      return gaussian_blur(v, s);
    }
    case CorruptionKind::RandomGaussianNoise: {
      Volume out = v;
      if (spec.sigma == 0.0) return out;
      Rng rng(derive_seed(spec.seed, {0x6e6f697365ULL}));
      for (float& x : out.data) x = static_cast<float>(x + rng.normal(0.0, spec.sigma));
      return out;
    }
  }
  return v;
}

std::pair<Volume, Volume> phantom(std::uint64_t seed, const PhantomConfig& cfg) {
  if (!(cfg.min_fraction > 0.0 && cfg.min_fraction < cfg.max_fraction && cfg.max_fraction < 1.0))
    throw ParameterError("phantom volume-fraction bounds must satisfy 0 < min < max < 1");
  Rng rng(derive_seed(seed, {0x7068616e746f6dULL}));
  const Dims3 d = cfg.dims;
  const I64 n = d[0] * d[1] * d[2];
  Vec3 extent{};
  for (int a = 0; a < 3; ++a) extent[a] = static_cast<double>(d[a]) * cfg.spacing[a];

  Volume label(d, cfg.spacing, VolumeKind::Label);
  for (int attempt = 0;; ++attempt) {
    if (attempt == 200) throw DegenerateInputError("phantom: could not place an organ within the fraction bounds");
    const double lo = cfg.min_fraction + 0.1 * (cfg.max_fraction - cfg.min_fraction);
    const double hi = cfg.max_fraction - 0.4 * (cfg.max_fraction - cfg.min_fraction);
    const double fraction = rng.uniform(lo, hi);
    double ratio[3];
    for (double& r : ratio) r = rng.uniform(0.65, 1.35);
    const double target_volume = fraction * extent[0] * extent[1] * extent[2];
    const double unit = std::cbrt(target_volume / (4.0 / 3.0 * std::numbers::pi * ratio[0] * ratio[1] * ratio[2]));
    double radius[3];
    for (int a = 0; a < 3; ++a) radius[a] = unit * ratio[a];
    double center[3];
    for (int a = 0; a < 3; ++a) center[a] = extent[a] * rng.uniform(0.4, 0.6);
    const auto rot = random_rotation(rng);

    I64 count = 0;
    for (I64 z = 0; z < d[0]; ++z)
      for (I64 y = 0; y < d[1]; ++y)
        for (I64 x = 0; x < d[2]; ++x) {
          const double p[3] = {(z + 0.5) * cfg.spacing[0] - center[0], (y + 0.5) * cfg.spacing[1] - center[1],
                               (x + 0.5) * cfg.spacing[2] - center[2]};
          double r2 = 0.0;
          for (int a = 0; a < 3; ++a) {
            const double q = rot[0][a] * p[0] + rot[1][a] * p[1] + rot[2][a] * p[2];
            r2 += (q / radius[a]) * (q / radius[a]);
          }
          const bool inside = r2 <= 1.0;
          label.at(z, y, x) = inside ? 1.0f : 0.0f;
          count += inside;
        }
    const double got = static_cast<double>(count) / static_cast<double>(n);
    if (got >= cfg.min_fraction && got <= cfg.max_fraction) break;
  }

  // Distractors: small spheres that sit clear of the organ.
  Volume distractor(d, cfg.spacing);
  for (int k = 0; k < cfg.distractors; ++k) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      const double r = rng.uniform(2.5, 4.0);
      double c[3];
      for (int a = 0; a < 3; ++a) c[a] = rng.uniform(r + 2.0, extent[a] - r - 2.0);
      bool clear = true;
      const double margin = r + 4.0;
      for (I64 z = 0; z < d[0] && clear; ++z)
        for (I64 y = 0; y < d[1] && clear; ++y)
          for (I64 x = 0; x < d[2] && clear; ++x) {
            if (label.at(z, y, x) == 0.0f) continue;
            const double dz = (z + 0.5) * cfg.spacing[0] - c[0], dy = (y + 0.5) * cfg.spacing[1] - c[1],
                         dx = (x + 0.5) * cfg.spacing[2] - c[2];
            if (dz * dz + dy * dy + dx * dx < margin * margin) clear = false;
          }
      if (!clear) continue;
      for (I64 z = 0; z < d[0]; ++z)
        for (I64 y = 0; y < d[1]; ++y)
          for (I64 x = 0; x < d[2]; ++x) {
            const double dz = (z + 0.5) * cfg.spacing[0] - c[0], dy = (y + 0.5) * cfg.spacing[1] - c[1],
                         dx = (x + 0.5) * cfg.spacing[2] - c[2];
            if (dz * dz + dy * dy + dx * dx <= r * r) distractor.at(z, y, x) = 1.0f;
          }
      break;
    }
  }

  // Soft partial-volume edges for the intensity model; the label stays hard.
  Volume organ_soft = label;
  organ_soft.kind = VolumeKind::Image;
  organ_soft = gaussian_blur(organ_soft, {0.6 / cfg.spacing[0], 0.6 / cfg.spacing[1], 0.6 / cfg.spacing[2]});
  distractor = gaussian_blur(distractor, {0.6 / cfg.spacing[0], 0.6 / cfg.spacing[1], 0.6 / cfg.spacing[2]});

  const SmoothField bg_texture(rng, 8, 6.0, 24.0);
  const SmoothField organ_texture(rng, 6, 4.0, 16.0);
  double grad[3];
  for (double& g : grad) g = rng.uniform(-1.0, 1.0);
  const double curvature = rng.uniform(-1.0, 1.0);
  const double organ_level = cfg.contrast * rng.uniform(1.1, 1.4);
  const double distractor_level = cfg.contrast * rng.uniform(0.8, 1.1);

  Volume image(d, cfg.spacing, VolumeKind::Image);
  Rng noise(derive_seed(seed, {0x6e6f697365ULL}));
  for (I64 z = 0; z < d[0]; ++z)
    for (I64 y = 0; y < d[1]; ++y)
      for (I64 x = 0; x < d[2]; ++x) {
        const double pz = (z + 0.5) * cfg.spacing[0], py = (y + 0.5) * cfg.spacing[1], px = (x + 0.5) * cfg.spacing[2];
        // Normalized coordinates in [-1, 1] for the bias field.
        const double u[3] = {2.0 * pz / extent[0] - 1.0, 2.0 * py / extent[1] - 1.0, 2.0 * px / extent[2] - 1.0};
        const double lin = (grad[0] * u[0] + grad[1] * u[1] + grad[2] * u[2]) / 3.0;
        const double quad = curvature * ((u[0] * u[0] + u[1] * u[1] + u[2] * u[2]) / 3.0 - 0.5);
        const double bias = 1.0 + cfg.bias * 0.5 * (lin + quad);
        const double m = organ_soft.at(z, y, x);
        const double dm = distractor.at(z, y, x);
        double v = cfg.background + cfg.texture * bg_texture(pz, py, px);
        v += m * (organ_level + 0.5 * cfg.texture * organ_texture(pz, py, px));
        v += dm * distractor_level;
        v = v * bias + noise.normal(0.0, cfg.noise_sigma);
        image.at(z, y, x) = static_cast<float>(v);
      }

  double fg_sum = 0.0, bg_sum = 0.0;
  I64 fg_n = 0, bg_n = 0;
  for (std::size_t i = 0; i < image.data.size(); ++i) {
    if (label.data[i] > 0.0f) {
      fg_sum += image.data[i];
      ++fg_n;
    } else {
      bg_sum += image.data[i];
      ++bg_n;
    }
  }
  const double diff = fg_sum / static_cast<double>(fg_n) - bg_sum / static_cast<double>(std::max<I64>(bg_n, 1));
  if (diff < cfg.contrast) {
    const auto shift = static_cast<float>(cfg.contrast - diff + 1e-3 * std::max(cfg.contrast, 1.0));
    for (std::size_t i = 0; i < image.data.size(); ++i)
      if (label.data[i] > 0.0f) image.data[i] += shift;
  }
  return {std::move(image), std::move(label)};
}

}  // namespace ib3dseg
