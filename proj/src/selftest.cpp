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

#include "ib3dseg/selftest.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <sstream>

#include "ib3dseg/dog_kernel.hpp"
#include "ib3dseg/evaluation.hpp"
#include "ib3dseg/model.hpp"
#include "ib3dseg/ops.hpp"
#include "ib3dseg/random.hpp"
#include "ib3dseg/training.hpp"

namespace ib3dseg {
namespace {

CheckResult below(std::string suite, std::string name, double value, double threshold) {
  return {std::move(suite), std::move(name), value, threshold, false, value <= threshold};
}

Tensor<double> random_tensor(Shape shape, Rng& rng, double sd = 1.0) {
  Tensor<double> t(std::move(shape));
  for (double& v : t.mutable_values()) v = sd * rng.normal();
  return t;
}

// Normal values pushed at least `gap` away from zero, for ops with a kink there.
Tensor<double> kink_free(Shape shape, Rng& rng, double gap = 0.05) {
  Tensor<double> t = random_tensor(std::move(shape), rng);
  for (double& v : t.mutable_values()) v += v < 0 ? -gap : gap;
  return t;
}

// Random linear functional, so gradients of shift-invariant ops are not trivially zero.
Tensor<double> project(const Tensor<double>& y) {
  Rng rng(977);
  return ops::sum(ops::mul(y, random_tensor(y.shape(), rng)));
}

// --- brute-force HD95 oracle -------------------------------------------------

using Mask = std::vector<std::uint8_t>;

std::vector<std::array<int, 3>> oracle_surface(const Mask& m, int n) {
  std::vector<std::array<int, 3>> pts;
  auto fg = [&](int z, int y, int x) {
    return z >= 0 && y >= 0 && x >= 0 && z < n && y < n && x < n && m[static_cast<std::size_t>((z * n + y) * n + x)];
  };
  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        if (fg(z, y, x) &&
            !(fg(z - 1, y, x) && fg(z + 1, y, x) && fg(z, y - 1, x) && fg(z, y + 1, x) && fg(z, y, x - 1) &&
              fg(z, y, x + 1)))
          pts.push_back({z, y, x});
  return pts;
}

double oracle_p95(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const double pos = 0.95 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

double oracle_hd95(const Mask& p, const Mask& g, int n, const Vec3& sp) {
  const auto a = oracle_surface(p, n), b = oracle_surface(g, n);
  if (a.empty() || b.empty()) return std::numeric_limits<double>::infinity();
  auto directed = [&](const auto& from, const auto& to) {
    std::vector<double> d;
    for (const auto& u : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& v : to) {
        const double dz = (u[0] - v[0]) * sp[0], dy = (u[1] - v[1]) * sp[1], dx = (u[2] - v[2]) * sp[2];
        best = std::min(best, std::sqrt(dz * dz + dy * dy + dx * dx));
      }
      d.push_back(best);
    }
    return oracle_p95(d);
  };
  return std::max(directed(a, b), directed(b, a));
}

Volume to_volume(const Mask& m, int n, const Vec3& spacing) {
  Volume v({n, n, n}, spacing, VolumeKind::Label);
  for (std::size_t i = 0; i < m.size(); ++i) v.data[i] = m[i];
  return v;
}

}  // namespace

std::vector<CheckResult> kernel_suite() {
  std::vector<CheckResult> out;
  const std::array<std::array<double, 3>, 4> settings{{{3, 1, 1.0 / 2}, {5, 2, 2.0 / 3}, {7, 3, 3.0 / 4}, {9, 4, 4.0 / 5}}};
  for (const auto& s : settings) {
    DoGParams p;
    p.k = static_cast<int>(s[0]);
    p.r = s[1];
    p.gamma = s[2];
    const Kernel3D on = synthesize(p);
    p.polarity = Polarity::Off;
    const Kernel3D off = synthesize(p);
    const std::string tag = "k=" + std::to_string(p.k);
    out.push_back(below("kernel", tag + " |sum(pos) - 1|", std::abs(on.positive_sum() - 1.0), 1e-9));
    out.push_back(below("kernel", tag + " |sum(neg) + 1|", std::abs(on.negative_sum() + 1.0), 1e-9));
    out.push_back(below("kernel", tag + " |total|", std::abs(on.total_sum()), 1e-9));

    const int k = p.k, mid = (k - 1) / 2;
    const std::array<std::array<int, 3>, 6> perms{{{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}}};
    double asym = 0.0;
    for (int z = 0; z < k; ++z)
      for (int y = 0; y < k; ++y)
        for (int x = 0; x < k; ++x) {
          const std::array<int, 3> c{z - mid, y - mid, x - mid};
          for (const auto& pm : perms)
            for (int signs = 0; signs < 8; ++signs) {
              std::array<int, 3> q{};
              for (int a = 0; a < 3; ++a) q[a] = ((signs >> a) & 1 ? -1 : 1) * c[pm[a]] + mid;
              asym = std::max(asym, std::abs(on.at(z, y, x) - on.at(q[0], q[1], q[2])));
            }
        }
    out.push_back(below("kernel", tag + " octahedral asymmetry", asym, 0.0));
    double off_err = 0.0;
    for (std::size_t i = 0; i < on.weights().size(); ++i)
      off_err = std::max(off_err, std::abs(off.weights()[i] + on.weights()[i]));
    out.push_back(below("kernel", tag + " |off + on|", off_err, 0.0));
  }
  const double g = 2.0 / 3.0;
  const double closed_form = 2.0 / g * std::sqrt((1.0 - g * g) / (-6.0 * std::log(g)));
  out.push_back(below("kernel", "|sigma(r=2, gamma=2/3) - closed form|", std::abs(sigma_for(2.0, g) - closed_form), 1e-12));
  return out;
}

std::vector<CheckResult> metric_suite(std::uint64_t seed, int hd95_trials) {
  std::vector<CheckResult> out;
  // Every pair of 2x2x2 masks against the direct formula.
  double dsc_err = 0.0, dsc_asym = 0.0, mono_violations = 0.0;
  for (unsigned a = 0; a < 256; ++a) {
    Volume p({2, 2, 2}, {1, 1, 1}, VolumeKind::Label);
    for (int i = 0; i < 8; ++i) p.data[static_cast<std::size_t>(i)] = (a >> i) & 1u;
    for (unsigned b = 0; b < 256; ++b) {
      Volume g({2, 2, 2}, {1, 1, 1}, VolumeKind::Label);
      for (int i = 0; i < 8; ++i) g.data[static_cast<std::size_t>(i)] = (b >> i) & 1u;
      const double direct = (2.0 * std::popcount(a & b) + 1e-6) / (std::popcount(a) + std::popcount(b) + 1e-6);
      const double v = dsc(p, g);
      dsc_err = std::max(dsc_err, std::abs(v - direct));
      dsc_asym = std::max(dsc_asym, std::abs(v - dsc(g, p)));
      // Adding a correctly predicted voxel never lowers the score.
      const unsigned missing = b & ~a;
      if (missing) {
        const unsigned bit = missing & (~missing + 1u);
        Volume q = p;
        q.data[static_cast<std::size_t>(std::countr_zero(bit))] = 1.0f;
        if (dsc(q, g) < v) mono_violations += 1.0;
      }
    }
  }
  out.push_back(below("metric", "dsc vs direct, all 2^3 pairs", dsc_err, 1e-12));
  out.push_back(below("metric", "dsc asymmetry", dsc_asym, 0.0));
  out.push_back(below("metric", "dsc monotonicity violations", mono_violations, 0.0));

  Rng rng(seed);
  double hd_err = 0.0, hd_asym = 0.0;
  const int n = 8;
  for (int t = 0; t < hd95_trials; ++t) {
    const Vec3 sp{rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0)};
    Mask a(n * n * n), b(n * n * n);
    const double fill = rng.uniform(0.1, 0.6);
    for (auto& v : a) v = rng.bernoulli(fill);
    for (auto& v : b) v = rng.bernoulli(fill);
    a[0] = b[1] = 1;
    const Volume pa = to_volume(a, n, sp), pb = to_volume(b, n, sp);
    const double h = hd95(pa, pb);
    hd_err = std::max(hd_err, std::abs(h - oracle_hd95(a, b, n, sp)));
    hd_asym = std::max(hd_asym, std::abs(h - hd95(pb, pa)));
  }
  out.push_back(below("metric", "hd95 vs all-pairs oracle, random 8^3", hd_err, 1e-9));
  out.push_back(below("metric", "hd95 asymmetry", hd_asym, 0.0));

  Volume one({1, 1, 8}, {1, 1, 1}, VolumeKind::Label), other = one;
  one.data[1] = 1.0f;
  other.data[4] = 1.0f;
  out.push_back(below("metric", "|hd95(single voxels 3 mm apart) - 3|", std::abs(hd95(one, other) - 3.0), 1e-12));

  Volume blobs({6, 6, 6}, {1, 1, 1}, VolumeKind::Label);
  for (auto& v : blobs.data) v = rng.bernoulli(0.4) ? 1.0f : 0.0f;
  const Volume once = largest_cc(blobs);
  out.push_back(below("metric", "largest_cc idempotence mismatches", once == largest_cc(once) ? 0.0 : 1.0, 0.0));
  return out;
}

std::vector<CheckResult> gradient_suite(std::uint64_t seed, int seeds) {
  struct Worst {
    std::string name;
    double threshold;
    double value = 0.0;
  };
  std::vector<Worst> worst{{"conv3d", 1e-4},         {"transposed_conv3d", 1e-4}, {"instance_norm", 1e-4},
                           {"batch_norm", 1e-4},     {"maxpool3d", 1e-6},         {"sigmoid", 1e-6},
                           {"leaky_relu", 1e-6},     {"add/scale", 1e-6},         {"concat/slice", 1e-6},
                           {"upsample_nearest", 1e-6}, {"pad_replicate", 1e-6},   {"bce_dice_loss", 1e-4},
                           {"network end to end", 1e-3}};
  auto note = [&](const std::string& name, double v) {
    for (auto& w : worst)
      if (w.name == name) w.value = std::max(w.value, v);
  };
  using F = std::function<Tensor<double>(const Tensor<double>&)>;

  for (int s = 0; s < seeds; ++s) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(s)}));
    {
      const auto x = random_tensor({2, 2, 5, 4, 5}, rng);
      const auto w = random_tensor({3, 2, 3, 3, 3}, rng, 0.3);
      const auto b = random_tensor({3}, rng);
      for (int stride : {1, 2}) {
        note("conv3d", ops::grad_check(F([&](const Tensor<double>& v) { return project(ops::conv3d(v, w, b, stride, 1)); }), x));
        note("conv3d", ops::grad_check(F([&](const Tensor<double>& v) { return project(ops::conv3d(x, v, b, stride, 1)); }), w));
        note("conv3d", ops::grad_check(F([&](const Tensor<double>& v) { return project(ops::conv3d(x, w, v, stride, 1)); }), b));
      }
    }
    {
      const auto x = random_tensor({2, 3, 3, 2, 3}, rng);
      const auto w = random_tensor({3, 2, 2, 2, 2}, rng, 0.5);
      const auto b = random_tensor({2}, rng);
      note("transposed_conv3d", ops::grad_check(F([&](const Tensor<double>& v) { return project(ops::transposed_conv3d(v, w, b)); }), x));
      note("transposed_conv3d", ops::grad_check(F([&](const Tensor<double>& v) { return project(ops::transposed_conv3d(x, v, b)); }), w));
      note("transposed_conv3d", ops::grad_check(F([&](const Tensor<double>& v) { return project(ops::transposed_conv3d(x, w, v)); }), b));
    }
    {
      const auto x = random_tensor({2, 2, 3, 3, 2}, rng);
      const auto sc = random_tensor({2}, rng);
      const auto sh = random_tensor({2}, rng);
      note("instance_norm", ops::grad_check(F([&](const Tensor<double>& v) { return project(ops::instance_norm(v, sc, sh)); }), x));
      note("instance_norm", ops::grad_check(F([&](const Tensor<double>& v) { return project(ops::instance_norm(x, v, sh)); }), sc));
      note("instance_norm", ops::grad_check(F([&](const Tensor<double>& v) { return project(ops::instance_norm(x, sc, v)); }), sh));
      note("batch_norm", ops::grad_check(F([&](const Tensor<double>& v) {
                                            Tensor<double> rm({2}, 0.0), rv({2}, 1.0);
                                            return project(ops::batch_norm(v, sc, sh, rm, rv, true));
                                          }),
                                          x));
    }
    {
      // A shuffled arithmetic sequence has no ties within the step size.
      std::vector<double> vals(2 * 2 * 4 * 4 * 4);
      for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = 0.1 * static_cast<double>(i);
      for (std::size_t i = vals.size() - 1; i > 0; --i) std::swap(vals[i], vals[rng.uniform_int(i + 1)]);
      note("maxpool3d", ops::grad_check(F([](const Tensor<double>& v) { return ops::sum(ops::maxpool3d(v)); }),
                                        Tensor<double>({2, 2, 4, 4, 4}, vals)));
    }
    {
      const auto x = kink_free({2, 3, 2, 2, 2}, rng);
      const auto other = random_tensor({2, 3, 2, 2, 2}, rng);
      note("sigmoid", ops::grad_check(F([](const Tensor<double>& v) { return ops::sum(ops::sigmoid(v)); }), x));
      note("leaky_relu", ops::grad_check(F([](const Tensor<double>& v) { return project(ops::leaky_relu(v, 0.01)); }), x));
      note("add/scale", ops::grad_check(F([&](const Tensor<double>& v) { return project(ops::add(ops::scale(v, -1.7), other)); }), x));
      note("concat/slice", ops::grad_check(F([&](const Tensor<double>& v) {
                                              return project(ops::slice_channels(ops::concat_channels(other, v), 2, 3));
                                            }),
                                            x));
      note("upsample_nearest", ops::grad_check(F([](const Tensor<double>& v) { return project(ops::upsample_nearest(v, 2)); }), x));
      note("pad_replicate", ops::grad_check(F([](const Tensor<double>& v) { return project(ops::pad_replicate(v, 2)); }), x));
    }
    {
      const auto z = random_tensor({1, 1, 4, 4, 4}, rng, 1.5);
      Tensor<double> g({1, 1, 4, 4, 4});
      for (double& v : g.mutable_values()) v = rng.bernoulli(0.3) ? 1.0 : 0.0;
      note("bce_dice_loss", ops::grad_check(F([&](const Tensor<double>& v) { return bce_dice_loss(v, g); }), z));
    }
    {
      // Sampled coordinates with a tiny step; ReLU-style kinks make large steps unreliable.
      NetworkConfig c;
      c.depth = 3;
      c.base_channels = 4;
      c.ib_enabled = true;
      BasicNetwork<double> net = build(c, rng.next_u64()).cast<double>();
      net.enable_grad();
      Tensor<double> x = random_tensor({1, 1, 16, 16, 16}, rng);
      Tensor<double> y({1, 1, 16, 16, 16});
      for (double& v : y.mutable_values()) v = rng.bernoulli(0.3) ? 1.0 : 0.0;
      x.set_requires_grad(true);
      Tape<double> tape;
      {
        TapeScope<double> scope(&tape);
        tape.backward(bce_dice_loss(net.forward(x, true), y));
      }
      auto loss = [&]() {
        TapeScope<double> none(nullptr);
        return bce_dice_loss(net.forward(x, true), y).item();
      };
      std::vector<Tensor<double>> targets{x};
      for (auto& p : net.params())
        if (is_trainable(p.kind)) targets.push_back(p.value);
      double err = 0.0;
      for (int trial = 0; trial < 8; ++trial) {
        Tensor<double> t = targets[rng.uniform_int(targets.size())];
        const auto i = static_cast<std::size_t>(rng.uniform_int(static_cast<std::uint64_t>(t.numel())));
        const double analytic = t.has_grad() ? t.grad()[i] : 0.0;
        const double saved = t.data()[i];
        const double h = 1e-7;
        t.mutable_data()[i] = saved + h;
        const double up = loss();
        t.mutable_data()[i] = saved - h;
        const double down = loss();
        t.mutable_data()[i] = saved;
        const double numeric = (up - down) / (2 * h);
        err = std::max(err, std::abs(analytic - numeric) / std::max(1e-3, std::abs(analytic) + std::abs(numeric)));
      }
      note("network end to end", err);
    }
  }
  std::vector<CheckResult> out;
  for (const auto& w : worst) out.push_back(below("gradient", w.name + " max rel. err", w.value, w.threshold));
  return out;
}

std::string format_checks(const std::vector<CheckResult>& checks) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-9s %-44s %12s %12s  %s\n", "suite", "check", "value", "threshold", "result");
  os << line;
  for (const auto& c : checks) {
    std::snprintf(line, sizeof line, "%-9s %-44s %12.3e %s%10.1e  %s\n", c.suite.c_str(), c.name.c_str(), c.value,
                  c.at_least ? ">=" : "<=", c.threshold, c.passed ? "PASS" : "FAIL");
    os << line;
  }
  return os.str();
}

bool all_passed(const std::vector<CheckResult>& checks) {
  return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

}  // namespace ib3dseg
