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

#include "ib3dseg/evaluation.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "ib3dseg/error.hpp"
#include "ib3dseg/random.hpp"
#include "ib3dseg/training.hpp"
#include "ib3dseg/log.hpp"
#include "ib3dseg/ops.hpp"

namespace ib3dseg {
namespace {

void require_same_grid(const Volume& a, const Volume& b, const char* what) {
  if (a.dims != b.dims)
    throw ShapeError(std::string(what) + ": dims differ (" + std::to_string(a.dims[0]) + "x" +
                     std::to_string(a.dims[1]) + "x" + std::to_string(a.dims[2]) + " vs " + std::to_string(b.dims[0]) +
                     "x" + std::to_string(b.dims[1]) + "x" + std::to_string(b.dims[2]) + ")");
}

void require_binary(const Volume& v, const char* what) {
  if (!v.is_binary()) throw ParameterError(std::string(what) + ": mask is not binary");
}

// Squared distance transform along one line (Felzenszwalb & Huttenlocher),
// sample positions i * step.
void edt_line(const double* f, double* d, std::int64_t n, double step, std::vector<std::int64_t>& v,
              std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.assign(static_cast<std::size_t>(n), 0);
  z.assign(static_cast<std::size_t>(n + 1), 0.0);
  std::int64_t k = -1;
  for (std::int64_t q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    const double pq = q * step;
    while (k >= 0) {
      const double pv = v[k] * step;
      const double s = ((f[q] + pq * pq) - (f[v[k]] + pv * pv)) / (2.0 * (pq - pv));
      if (s > z[k]) {
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = inf;
        break;
      }
      --k;
    }
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
    }
  }
  if (k < 0) {
    std::fill_n(d, n, inf);
    return;
  }
  std::int64_t j = 0;
  for (std::int64_t q = 0; q < n; ++q) {
    while (z[j + 1] < q * step) ++j;
    const double diff = (q - v[j]) * step;
    d[q] = diff * diff + f[v[j]];
  }
}

// Squared Euclidean distance (mm^2) from every voxel to the nearest seed voxel.
std::vector<double> squared_edt(const Dims3& dims, const Vec3& spacing, const std::vector<std::int64_t>& seeds) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  const std::int64_t n = dims[0] * dims[1] * dims[2];
  std::vector<double> f(static_cast<std::size_t>(n), inf);
  for (auto i : seeds) f[static_cast<std::size_t>(i)] = 0.0;
  const std::int64_t longest = std::max({dims[0], dims[1], dims[2]});
  std::vector<double> in(static_cast<std::size_t>(longest)), out(static_cast<std::size_t>(longest));
  std::vector<std::int64_t> v;
  std::vector<double> z;
  const std::int64_t strides[3] = {dims[1] * dims[2], dims[2], 1};
  for (int axis = 2; axis >= 0; --axis) {
    const std::int64_t len = dims[axis];
    const std::int64_t stride = strides[axis];
    for (std::int64_t base = 0; base < n; ++base) {
      // Visit each line once, from its first element.
      if ((base / stride) % len != 0) continue;
      for (std::int64_t i = 0; i < len; ++i) in[i] = f[static_cast<std::size_t>(base + i * stride)];
      edt_line(in.data(), out.data(), len, spacing[axis], v, z);
      for (std::int64_t i = 0; i < len; ++i) f[static_cast<std::size_t>(base + i * stride)] = out[i];
    }
  }
  return f;
}

double directed_p95(const std::vector<std::int64_t>& from, const std::vector<double>& sq_dist_to) {
  std::vector<double> d;
  d.reserve(from.size());
  for (auto i : from) d.push_back(std::sqrt(sq_dist_to[static_cast<std::size_t>(i)]));
  return percentile(std::move(d), 95.0);
}

}  // namespace

std::vector<std::int64_t> window_starts(std::int64_t n, std::int64_t p) {
  if (p < 1 || n < p) throw ShapeError("window of " + std::to_string(p) + " does not fit an axis of " + std::to_string(n));
  const std::int64_t step = std::max<std::int64_t>(1, p / 2);
  std::vector<std::int64_t> starts;
  for (std::int64_t s = 0; s + p < n; s += step) starts.push_back(s);
  const std::int64_t last = n - p;
  // A clamped last window may overlap two earlier ones; drop the redundant
  // one so that no voxel is covered more than twice per axis.
  while (starts.size() >= 2 && starts[starts.size() - 2] + p > last) starts.pop_back();
  starts.push_back(last);
  return starts;
}

namespace {

std::vector<float> gaussian_window(const Dims3& patch) {
  std::array<std::vector<double>, 3> axis;
  for (int a = 0; a < 3; ++a) {
    const double sigma = static_cast<double>(patch[a]) / 8.0;
    const double c = (static_cast<double>(patch[a]) - 1.0) / 2.0;
    for (std::int64_t i = 0; i < patch[a]; ++i)
      axis[a].push_back(std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma)));
  }
  std::vector<float> w(static_cast<std::size_t>(patch[0] * patch[1] * patch[2]));
  double peak = 0.0;
  std::size_t k = 0;
  for (double wz : axis[0])
    for (double wy : axis[1])
      for (double wx : axis[2]) peak = std::max(peak, wz * wy * wx);
  for (double wz : axis[0])
    for (double wy : axis[1])
      for (double wx : axis[2]) w[k++] = static_cast<float>(std::max(wz * wy * wx / peak, 1e-3));
  return w;
}

}  // namespace

Volume sliding_window_predict(Network& net, const Volume& image, const Dims3& patch, WindowWeighting weighting) {
  net.config().validate_patch(patch);
  Dims3 padded{};
  for (int a = 0; a < 3; ++a) padded[a] = std::max(image.dims[a], patch[a]);
  const std::int64_t pd = padded[0], ph = padded[1], pw = padded[2];
  std::vector<float> src(static_cast<std::size_t>(pd * ph * pw), 0.0f);
  for (std::int64_t z = 0; z < image.dims[0]; ++z)
    for (std::int64_t y = 0; y < image.dims[1]; ++y)
      std::copy_n(image.data.data() + image.index(z, y, 0), image.dims[2], src.data() + (z * ph + y) * pw);

  std::vector<float> sum(src.size(), 0.0f);
  std::vector<std::uint8_t> count(src.size(), 0);
  const bool gaussian = weighting == WindowWeighting::Gaussian;
  const std::vector<float> weight = gaussian ? gaussian_window(patch) : std::vector<float>();
  std::vector<float> weight_sum(gaussian ? src.size() : 0, 0.0f);
  const auto zs = window_starts(pd, patch[0]), ys = window_starts(ph, patch[1]), xs = window_starts(pw, patch[2]);
  TapeScope<float> no_grad(nullptr);
  Tensor<float> window({1, 1, patch[0], patch[1], patch[2]});
  for (auto z0 : zs)
    for (auto y0 : ys)
      for (auto x0 : xs) {
        float* w = window.mutable_data();
        for (std::int64_t z = 0; z < patch[0]; ++z)
          for (std::int64_t y = 0; y < patch[1]; ++y)
            std::copy_n(src.data() + ((z0 + z) * ph + y0 + y) * pw + x0, patch[2], w + (z * patch[1] + y) * patch[2]);
        const Tensor<float> prob = ops::sigmoid(net.forward(window));
        const float* p = prob.data();
        for (std::int64_t z = 0; z < patch[0]; ++z)
          for (std::int64_t y = 0; y < patch[1]; ++y) {
            const std::int64_t dst = ((z0 + z) * ph + y0 + y) * pw + x0;
            const float* row = p + (z * patch[1] + y) * patch[2];
            if (gaussian) {
              const float* wrow = weight.data() + (z * patch[1] + y) * patch[2];
              for (std::int64_t x = 0; x < patch[2]; ++x) {
                sum[static_cast<std::size_t>(dst + x)] += wrow[x] * row[x];
                weight_sum[static_cast<std::size_t>(dst + x)] += wrow[x];
              }
            } else {
              for (std::int64_t x = 0; x < patch[2]; ++x) {
                sum[static_cast<std::size_t>(dst + x)] += row[x];
                ++count[static_cast<std::size_t>(dst + x)];
              }
            }
          }
      }

  Volume out(image.dims, image.spacing, VolumeKind::Image);
  out.origin = image.origin;
  for (std::int64_t z = 0; z < image.dims[0]; ++z)
    for (std::int64_t y = 0; y < image.dims[1]; ++y)
      for (std::int64_t x = 0; x < image.dims[2]; ++x) {
        const auto i = static_cast<std::size_t>((z * ph + y) * pw + x);
        out.at(z, y, x) = sum[i] / (gaussian ? weight_sum[i] : static_cast<float>(count[i]));
      }
  return out;
}

Volume largest_cc(const Volume& mask) {
  require_binary(mask, "largest_cc");
  const std::int64_t n = mask.size();
  const Dims3& d = mask.dims;
  std::vector<std::int32_t> label(static_cast<std::size_t>(n), 0);
  std::int32_t best_label = 0;
  std::int64_t best_size = 0;
  std::int32_t next = 0;
  std::deque<std::int64_t> queue;
  for (std::int64_t seed = 0; seed < n; ++seed) {
    if (mask.data[static_cast<std::size_t>(seed)] == 0.0f || label[static_cast<std::size_t>(seed)] != 0) continue;
    const std::int32_t id = ++next;
    std::int64_t size = 0;
    label[static_cast<std::size_t>(seed)] = id;
    queue.push_back(seed);
    while (!queue.empty()) {
      const std::int64_t i = queue.front();
      queue.pop_front();
      ++size;
      const std::int64_t x = i % d[2], y = (i / d[2]) % d[1], z = i / (d[1] * d[2]);
      const std::int64_t nb[6][2] = {{x > 0, i - 1},
                                     {x + 1 < d[2], i + 1},
                                     {y > 0, i - d[2]},
                                     {y + 1 < d[1], i + d[2]},
                                     {z > 0, i - d[1] * d[2]},
                                     {z + 1 < d[0], i + d[1] * d[2]}};
      for (const auto& [ok, j] : nb) {
        if (!ok) continue;
        const auto js = static_cast<std::size_t>(j);
        if (mask.data[js] != 0.0f && label[js] == 0) {
          label[js] = id;
          queue.push_back(j);
        }
      }
    }
    if (size > best_size) {
      best_size = size;
      best_label = id;
    }
  }
  Volume out = mask;
  if (best_label == 0) {
    log_warn("largest_cc: empty mask");
    return out;
  }
  for (std::int64_t i = 0; i < n; ++i)
    out.data[static_cast<std::size_t>(i)] = label[static_cast<std::size_t>(i)] == best_label ? 1.0f : 0.0f;
  return out;
}

double dsc(const Volume& p, const Volume& g) {
  require_same_grid(p, g, "dsc");
  require_binary(p, "dsc");
  require_binary(g, "dsc");
  constexpr double eps = 1e-6;
  double inter = 0, pp = 0, gg = 0;
  for (std::size_t i = 0; i < p.data.size(); ++i) {
    inter += static_cast<double>(p.data[i]) * g.data[i];
    pp += static_cast<double>(p.data[i]) * p.data[i];
    gg += static_cast<double>(g.data[i]) * g.data[i];
  }
  return (2.0 * inter + eps) / (pp + gg + eps);
}

std::vector<std::int64_t> surface_voxels(const Volume& mask) {
  const Dims3& d = mask.dims;
  std::vector<std::int64_t> out;
  auto fg = [&](std::int64_t z, std::int64_t y, std::int64_t x) {
    if (z < 0 || y < 0 || x < 0 || z >= d[0] || y >= d[1] || x >= d[2]) return false;
    return mask.at(z, y, x) != 0.0f;
  };
  for (std::int64_t z = 0; z < d[0]; ++z)
    for (std::int64_t y = 0; y < d[1]; ++y)
      for (std::int64_t x = 0; x < d[2]; ++x)
        if (fg(z, y, x) && !(fg(z - 1, y, x) && fg(z + 1, y, x) && fg(z, y - 1, x) && fg(z, y + 1, x) &&
                             fg(z, y, x - 1) && fg(z, y, x + 1)))
          out.push_back(mask.index(z, y, x));
  return out;
}

double hd95(const Volume& p, const Volume& g) {
  require_same_grid(p, g, "hd95");
  if (p.spacing != g.spacing) throw ShapeError("hd95: spacings differ");
  require_binary(p, "hd95");
  require_binary(g, "hd95");
  const auto sp = surface_voxels(p), sg = surface_voxels(g);
  if (sp.empty() || sg.empty()) return std::numeric_limits<double>::infinity();
  const auto to_g = squared_edt(g.dims, g.spacing, sg);
  const auto to_p = squared_edt(p.dims, p.spacing, sp);
  return std::max(directed_p95(sp, to_g), directed_p95(sg, to_p));
}

Volume predict_mask(Network& net, const Volume& raw_image, const PredictSettings& s) {
  const Volume image = preprocess_image(raw_image, s.modality, s.target_spacing, s.ct_stats);
  Volume prob = sliding_window_predict(net, image, s.patch_size, s.weighting);
  Volume mask(prob.dims, prob.spacing, VolumeKind::Label);
  mask.origin = prob.origin;
  for (std::size_t i = 0; i < prob.data.size(); ++i) mask.data[i] = prob.data[i] >= s.threshold ? 1.0f : 0.0f;
  if (s.keep_largest_component) mask = largest_cc(mask);
  Volume back = resample_to_dims(mask, raw_image.dims, Interp::Nearest);
  back.spacing = raw_image.spacing;
  back.origin = raw_image.origin;
  back.kind = VolumeKind::Label;
  return back;
}

// ---------------------------------------------------------------------------
// Run evaluation and reports

namespace {

namespace fs = std::filesystem;

std::string fmt_num(double v, const char* spec = "%.10g") {
  char buf[48];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("invalid JSON in '" + path.string() + "': " + e.what());
  }
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

}  // namespace

RunReport evaluate_run(const std::string& run_dir, const std::vector<CorruptionSpec>& conditions,
                       const EvalOptions& options) {
  if (conditions.empty()) throw ConfigError("evaluate: no conditions given");
  const fs::path run(run_dir);
  const nlohmann::json summary = read_json(run / "summary.json");
  const DatasetSpec data = options.dataset ? *options.dataset : load_manifest((run / "manifest.json").string());
  fs::path normal = run.lexically_normal();
  if (!normal.has_filename()) normal = normal.parent_path();
  const std::string run_name = normal.filename().string();

  std::map<std::string, std::pair<int, std::string>> owner;  // case id -> (fold, checkpoint)
  try {
    for (const auto& f : summary.at("folds")) {
      const int fold = f.at("fold").get<int>();
      const std::string ckpt = (run / f.at("checkpoint").get<std::string>()).string();
      for (const auto& id : f.at("validation_cases")) owner[id.get<std::string>()] = {fold, ckpt};
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed run summary in '" + run_dir + "': " + e.what());
  }

  std::map<int, Checkpoint> models;
  RunReport report;
  for (std::size_t i = 0; i < data.cases.size(); ++i) {
    const std::string& id = data.cases[i].id;
    const auto it = owner.find(id);
    if (it == owner.end()) throw ConfigError("evaluate: case '" + id + "' is not held out by any fold of " + run_dir);
    const auto& [fold, ckpt_path] = it->second;
    if (!models.count(fold)) {
      if (!fs::exists(ckpt_path)) throw Error("evaluate: missing checkpoint '" + ckpt_path + "'");
      models.emplace(fold, load_checkpoint(ckpt_path));
    }
    Checkpoint& ck = models.at(fold);
    const std::string model = model_label(ck.network.config());

    const Volume image = read_volume(data.image_path(i), VolumeKind::Image);
    const Volume label = read_volume(data.label_path(i), VolumeKind::Label);
    for (const CorruptionSpec& base : conditions) {
      CorruptionSpec spec = base;
      spec.seed = derive_seed(options.seed, {fnv1a64(id), fnv1a64(base.name())});
      const Volume mask = predict_mask(ck.network, corrupt(image, spec), ck.predict);
      CaseResult r;
      r.run = run_name;
      r.model = model;
      r.fold = fold;
      r.case_id = id;
      r.condition = base.name();
      r.dsc = dsc(mask, label);
      r.hd95 = hd95(mask, label);
      r.hd95_infinite = std::isinf(r.hd95);
      if (r.hd95_infinite) r.hd95 = 0.0;
      if (!options.prediction_dir.empty()) {
        const fs::path dir = fs::path(options.prediction_dir) / run_name / r.condition;
        fs::create_directories(dir);
        write_raw(mask, (dir / (id + ".raw")).string());
      }
      log_info("evaluate " + run_name + " " + id + " [" + r.condition + "] dsc " + fmt_num(r.dsc, "%.4f") +
               " hd95 " + (r.hd95_infinite ? std::string("inf") : fmt_num(r.hd95, "%.3f")));
      report.cases.push_back(std::move(r));
    }
  }
  report.summary = summarize(report.cases);
  return report;
}

std::vector<SummaryRow> summarize(const std::vector<CaseResult>& cases) {
  std::vector<SummaryRow> rows;
  std::vector<std::vector<double>> dscs, hds;
  for (const auto& c : cases) {
    auto it = std::find_if(rows.begin(), rows.end(),
                           [&](const SummaryRow& r) { return r.model == c.model && r.condition == c.condition; });
    if (it == rows.end()) {
      rows.push_back({c.model, c.condition});
      dscs.emplace_back();
      hds.emplace_back();
      it = rows.end() - 1;
    }
    const auto k = static_cast<std::size_t>(it - rows.begin());
    ++it->n;
    dscs[k].push_back(c.dsc);
    if (c.hd95_infinite)
      ++it->hd95_excluded;
    else
      hds[k].push_back(c.hd95);
  }
  for (std::size_t k = 0; k < rows.size(); ++k) {
    std::tie(rows[k].dsc_mean, rows[k].dsc_std) = mean_std(dscs[k]);
    std::tie(rows[k].hd95_mean, rows[k].hd95_std) = mean_std(hds[k]);
  }
  return rows;
}

RunReport merge_reports(const std::vector<RunReport>& reports) {
  RunReport out;
  for (const auto& r : reports) out.cases.insert(out.cases.end(), r.cases.begin(), r.cases.end());
  out.summary = summarize(out.cases);
  return out;
}

void write_report(const RunReport& report, const std::string& out_dir) {
  fs::create_directories(out_dir);
  {
    std::ofstream csv(fs::path(out_dir) / "cases.csv");
    csv << "run,model,fold,case,condition,dsc,hd95,hd95_infinite\n";
    for (const auto& c : report.cases)
      csv << c.run << ',' << c.model << ',' << c.fold << ',' << c.case_id << ',' << c.condition << ','
          << fmt_num(c.dsc, "%.17g") << ',' << (c.hd95_infinite ? std::string("inf") : fmt_num(c.hd95, "%.17g"))
          << ',' << (c.hd95_infinite ? 1 : 0) << '\n';
  }

  std::vector<std::string> models, conds;
  for (const auto& r : report.summary) {
    if (std::find(models.begin(), models.end(), r.model) == models.end()) models.push_back(r.model);
    if (std::find(conds.begin(), conds.end(), r.condition) == conds.end()) conds.push_back(r.condition);
  }
  auto cell = [&](const std::string& m, const std::string& c) -> const SummaryRow* {
    for (const auto& r : report.summary)
      if (r.model == m && r.condition == c) return &r;
    return nullptr;
  };
  auto table = [&](std::ostream& out, const std::string& title, bool hd) {
    out << "## " << title << "\n\n| Model |";
    for (const auto& c : conds) out << ' ' << c << " |";
    out << "\n|---|";
    for (std::size_t i = 0; i < conds.size(); ++i) out << "---|";
    out << '\n';
    for (const auto& m : models) {
      out << "| " << m << " |";
      for (const auto& c : conds) {
        const SummaryRow* r = cell(m, c);
        if (!r) {
          out << " - |";
        } else if (hd) {
          out << ' ' << fmt_num(r->hd95_mean, "%.2f") << " ± " << fmt_num(r->hd95_std, "%.2f");
          if (r->hd95_excluded) out << " (" << r->hd95_excluded << " excl.)";
          out << " |";
        } else {
          out << ' ' << fmt_num(r->dsc_mean, "%.3f") << " ± " << fmt_num(r->dsc_std, "%.3f") << " |";
        }
      }
      out << '\n';
    }
    out << '\n';
  };
  {
    std::ofstream md(fs::path(out_dir) / "summary.md");
    md << "# Segmentation results\n\n";
    table(md, "DSC (mean ± std)", false);
    table(md, "HD95 in mm (mean ± std)", true);
    md << "## Per cell\n\n| Model | Condition | n | DSC mean | DSC std | HD95 mean | HD95 std | HD95 excluded |\n"
       << "|---|---|---|---|---|---|---|---|\n";
    for (const auto& r : report.summary)
      md << "| " << r.model << " | " << r.condition << " | " << r.n << " | " << fmt_num(r.dsc_mean, "%.4f") << " | "
         << fmt_num(r.dsc_std, "%.4f") << " | " << fmt_num(r.hd95_mean, "%.3f") << " | "
         << fmt_num(r.hd95_std, "%.3f") << " | " << r.hd95_excluded << " |\n";
  }
  {
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& r : report.summary)
      j.push_back({{"model", r.model},
                   {"condition", r.condition},
                   {"n", r.n},
                   {"dsc_mean", r.dsc_mean},
                   {"dsc_std", r.dsc_std},
                   {"hd95_mean", r.hd95_mean},
                   {"hd95_std", r.hd95_std},
                   {"hd95_excluded", r.hd95_excluded}});
    std::ofstream(fs::path(out_dir) / "summary.json") << nlohmann::ordered_json{{"summary", j}}.dump(2) << '\n';
  }
}

}  // namespace ib3dseg
