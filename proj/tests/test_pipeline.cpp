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
#include <numeric>
#include <set>

#include "doctest.h"
#include "ib3dseg/error.hpp"
#include "ib3dseg/pipeline.hpp"
#include "test_util.hpp"

using namespace ib3dseg;

namespace {

Volume random_image(Dims3 dims, std::uint64_t seed, Vec3 spacing = {1, 1, 1}) {
  Rng rng(seed);
  Volume v(dims, spacing);
  for (float& x : v.data) x = static_cast<float>(rng.normal(100.0, 20.0));
  return v;
}

double mean_of(const Volume& v) {
  double s = 0;
  for (float x : v.data) s += x;
  return s / static_cast<double>(v.size());
}

double std_of(const Volume& v) {
  const double m = mean_of(v);
  double s = 0;
  for (float x : v.data) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace

TEST_CASE("resampling") {
  const Volume v = random_image({5, 6, 7}, 1, {1.5, 1.0, 0.7});
  SUBCASE("same spacing is the identity") {
    CHECK(resample(v, v.spacing, Interp::Trilinear) == v);
    CHECK(resample(v, v.spacing, Interp::Nearest) == v);
  }
  SUBCASE("target grid size") {
    CHECK(resampled_dims({64, 64, 64}, {1, 1, 1}, {2, 2, 2}) == Dims3{32, 32, 32});
    CHECK(resampled_dims({10, 10, 10}, {1.5, 1, 0.7}, {1, 1, 1}) == Dims3{15, 10, 7});
    CHECK(resampled_dims({1, 1, 1}, {1, 1, 1}, {9, 9, 9}) == Dims3{1, 1, 1});
    const Volume r = resample(v, {1, 1, 1}, Interp::Trilinear);
    CHECK(r.spacing == Vec3{1, 1, 1});
    CHECK(r.dims == resampled_dims(v.dims, v.spacing, {1, 1, 1}));
  }
  SUBCASE("8^3 to 16^3 doubles along every axis") {
    Volume ramp({8, 8, 8}, {2, 2, 2});
    for (std::int64_t z = 0; z < 8; ++z)
      for (std::int64_t y = 0; y < 8; ++y)
        for (std::int64_t x = 0; x < 8; ++x) ramp.at(z, y, x) = static_cast<float>(x);
    const Volume up = resample(ramp, {1, 1, 1}, Interp::Trilinear);
    CHECK(up.dims == Dims3{16, 16, 16});
    // Interior voxel centers map to src = (i + 0.5) / 2 - 0.5.
    for (std::int64_t x = 1; x < 15; ++x) CHECK(up.at(3, 4, x) == doctest::Approx((x + 0.5) / 2 - 0.5));
    CHECK(up.at(0, 0, 0) == 0.0f);
    CHECK(up.at(0, 0, 15) == 7.0f);
    CHECK(std::abs(mean_of(up) - mean_of(ramp)) < 1e-5);
  }
  SUBCASE("nearest keeps the label value set") {
    Volume lab({6, 6, 6}, {1.3, 0.9, 1.7}, VolumeKind::Label);
    Rng rng(3);
    for (float& x : lab.data) x = static_cast<float>(rng.uniform_int(3));
    const Volume r = resample(lab, {1, 1, 1}, Interp::Nearest);
    std::set<float> values(r.data.begin(), r.data.end());
    CHECK(values == std::set<float>{0.0f, 1.0f, 2.0f});
    CHECK(r.kind == VolumeKind::Label);
  }
  SUBCASE("round trip through a finer grid") {
    const Volume fine = resample_to_dims(v, {10, 12, 14}, Interp::Nearest);
    CHECK(resample_to_dims(fine, v.dims, Interp::Nearest) == v);
  }
}

TEST_CASE("percentile oracle") {
  std::vector<double> values(1000);
  std::iota(values.begin(), values.end(), 1.0);
  std::reverse(values.begin(), values.end());
  // Linear interpolation at rank q/100 * (n - 1).
  CHECK(percentile(values, 0.5) == doctest::Approx(5.995).epsilon(1e-12));
  CHECK(percentile(values, 99.5) == doctest::Approx(995.005).epsilon(1e-12));
  CHECK(percentile(values, 0) == 1.0);
  CHECK(percentile(values, 100) == 1000.0);
  CHECK(percentile({4.0}, 37) == 4.0);
  CHECK_THROWS(percentile({}, 50));
  CHECK_THROWS(percentile({1.0, 2.0}, 101));
}

TEST_CASE("MR normalization") {
  const Volume v = random_image({6, 7, 8}, 11);
  const Volume n = normalize_mr(v);
  CHECK(std::abs(mean_of(n)) < 1e-5);
  CHECK(std::abs(std_of(n) - 1.0) < 1e-5);
  Volume shifted = v;
  for (float& x : shifted.data) x = 3.0f * x + 50.0f;
  const Volume m = normalize_mr(shifted);
  for (std::size_t i = 0; i < n.data.size(); ++i) CHECK(std::abs(n.data[i] - m.data[i]) < 1e-4);
  CHECK_THROWS_AS(normalize_mr(Volume({4, 4, 4}, {1, 1, 1}, VolumeKind::Image, 7.0f)), DegenerateInputError);
}

TEST_CASE("CT statistics and normalization") {
  Volume img({10, 10, 10}, {1, 1, 1});
  Volume lab({10, 10, 10}, {1, 1, 1}, VolumeKind::Label);
  for (std::int64_t i = 0; i < 1000; ++i) {
    img.data[static_cast<std::size_t>(i)] = static_cast<float>(i + 1);
    lab.data[static_cast<std::size_t>(i)] = 1.0f;
  }
  const CtStats s = compute_ct_stats({{&img, &lab}});
  CHECK(s.clip_lo == doctest::Approx(5.995));
  CHECK(s.clip_hi == doctest::Approx(995.005));
  CHECK(s.mean == doctest::Approx(500.5));
  CHECK(s.std == doctest::Approx(std::sqrt((1000.0 * 1000.0 - 1.0) / 12.0)));
  const Volume n = normalize_ct(img, s);
  CHECK(n.data[0] == doctest::Approx((5.995 - 500.5) / s.std).epsilon(1e-5));
  CHECK(n.data[999] == doctest::Approx((995.005 - 500.5) / s.std).epsilon(1e-5));

  std::fill(lab.data.begin(), lab.data.end(), 0.0f);
  CHECK_THROWS_AS(compute_ct_stats({{&img, &lab}}), DegenerateInputError);
  CHECK_THROWS(preprocess_image(img, Modality::CT, {1, 1, 1}, std::nullopt));
}

TEST_CASE("patch sampling is foreground-centered half the time") {
  Volume img({20, 20, 20}, {1, 1, 1});
  Volume lab({20, 20, 20}, {1, 1, 1}, VolumeKind::Label);
  for (std::int64_t z = 3; z < 6; ++z)
    for (std::int64_t y = 3; y < 6; ++y)
      for (std::int64_t x = 3; x < 6; ++x) lab.at(z, y, x) = 1.0f;
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(i);
  const SamplingIndex index = build_sampling_index(lab);
  CHECK(index.foreground.size() == 27);
  CHECK(index.background.size() == 8000 - 27);

  Rng rng(123);
  int fg = 0;
  const int trials = 4000;
  for (int t = 0; t < trials; ++t) {
    const Patch p = sample_patch(img, lab, {8, 8, 8}, rng, &index);
    CHECK(p.image.dims == Dims3{8, 8, 8});
    if (p.foreground_centered) {
      ++fg;
      CHECK(lab.at(p.center[0], p.center[1], p.center[2]) == 1.0f);
    } else {
      CHECK(lab.at(p.center[0], p.center[1], p.center[2]) == 0.0f);
    }
  }
  CHECK(std::abs(static_cast<double>(fg) / trials - 0.5) < 0.02);
}

TEST_CASE("patch sampling edge cases") {
  Rng rng(9);
  SUBCASE("window is clamped inside the volume") {
    Volume img({10, 10, 10}, {1, 1, 1});
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(i);
    Volume lab({10, 10, 10}, {1, 1, 1}, VolumeKind::Label);
    lab.at(0, 0, 0) = 1.0f;
    for (int t = 0; t < 50; ++t) {
      const Patch p = sample_patch(img, lab, {4, 4, 4}, rng);
      if (!p.foreground_centered) continue;
      CHECK(p.image.at(0, 0, 0) == 0.0f);
      CHECK(p.label.at(0, 0, 0) == 1.0f);
    }
  }
  SUBCASE("small volumes are zero padded symmetrically") {
    Volume img({2, 4, 4}, {1, 1, 1}, VolumeKind::Image, 5.0f);
    Volume lab({2, 4, 4}, {1, 1, 1}, VolumeKind::Label);
    const Patch p = sample_patch(img, lab, {4, 4, 4}, rng);
    CHECK(p.image.dims == Dims3{4, 4, 4});
    CHECK(p.image.at(0, 0, 0) == 0.0f);
    CHECK(p.image.at(1, 0, 0) == 5.0f);
    CHECK(p.image.at(2, 3, 3) == 5.0f);
    CHECK(p.image.at(3, 0, 0) == 0.0f);
    CHECK(!p.foreground_centered);
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(sample_patch(Volume({4, 4, 4}, {1, 1, 1}), Volume({4, 4, 5}, {1, 1, 1}, VolumeKind::Label),
                                 {2, 2, 2}, rng),
                    ShapeError);
  }
}

TEST_CASE("augmentation") {
  const Volume img = random_image({8, 8, 8}, 4);
  Volume lab({8, 8, 8}, {1, 1, 1}, VolumeKind::Label);
  for (std::int64_t x = 0; x < 3; ++x) lab.at(4, 4, x) = 1.0f;

  SUBCASE("disabled augmentation is the identity") {
    Volume a = img, b = lab;
    Rng rng(1);
    augment(a, b, rng, AugmentConfig::none());
    CHECK(a == img);
    CHECK(b == lab);
  }
  SUBCASE("flip and rotate are involutions") {
    Volume a = img;
    flip_axis(a, 2);
    CHECK(a.at(1, 2, 0) == img.at(1, 2, 7));
    flip_axis(a, 2);
    CHECK(a == img);
    rotate90(a, 1);
    CHECK(a != img);
    rotate90(a, 3);
    CHECK(a == img);
  }
  SUBCASE("labels stay binary and aligned with the image") {
    Volume marker = img;
    for (std::size_t i = 0; i < marker.data.size(); ++i) marker.data[i] = lab.data[i] > 0 ? 1000.0f : 0.0f;
    AugmentConfig geometric = AugmentConfig::none();
    geometric.p_flip = 0.5;
    geometric.p_rotate = 0.5;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Volume a = marker, b = lab;
      Rng rng(seed);
      augment(a, b, rng, geometric);
      CHECK(b.is_binary());
      for (std::size_t i = 0; i < a.data.size(); ++i) CHECK((a.data[i] > 500.0f) == (b.data[i] > 0.5f));
    }
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Volume a = img, b = lab;
      Rng rng(seed);
      augment(a, b, rng, AugmentConfig{});
      CHECK(b.is_binary());
      CHECK(a.dims == img.dims);
    }
  }
  SUBCASE("deterministic per seed") {
    Volume a1 = img, b1 = lab, a2 = img, b2 = lab;
    Rng r1(77), r2(77);
    augment(a1, b1, r1, AugmentConfig{});
    augment(a2, b2, r2, AugmentConfig{});
    CHECK(a1 == a2);
    CHECK(b1 == b2);
  }
}

TEST_CASE("corruptions") {
  const Volume v = random_image({12, 12, 12}, 8, {1, 1, 2});
  CHECK(corrupt(v, CorruptionSpec{}) == v);
  CHECK(corrupt(v, CorruptionSpec::parse("blur:0")) == v);
  CHECK(corrupt(v, CorruptionSpec::parse("noise:0")) == v);

  const Volume b = corrupt(v, CorruptionSpec::parse("blur:2"));
  CHECK(std::abs(mean_of(b) - mean_of(v)) < 0.5);
  CHECK(std_of(b) < 0.5 * std_of(v));
  const Volume c = Volume({6, 6, 6}, {1, 1, 1}, VolumeKind::Image, 3.0f);
  for (float x : gaussian_blur(c, {1.5, 0.7, 2.0}).data) CHECK(x == doctest::Approx(3.0f));

  const Volume n1 = corrupt(v, CorruptionSpec::parse("noise:45", 3));
  const Volume n2 = corrupt(v, CorruptionSpec::parse("noise:45", 3));
  const Volume n3 = corrupt(v, CorruptionSpec::parse("noise:45", 4));
  CHECK(n1 == n2);
  CHECK(n1 != n3);
  Volume diff = n1;
  for (std::size_t i = 0; i < diff.data.size(); ++i) diff.data[i] -= v.data[i];
  CHECK(std::abs(std_of(diff) - 45.0) < 3.0);

  CHECK(CorruptionSpec::parse("blur:2").name() == "blur:2");
  CHECK(CorruptionSpec::parse("noise:45").name() == "noise:45");
  CHECK(CorruptionSpec::parse("none").name() == "none");
  CHECK_THROWS_AS(CorruptionSpec::parse("blur"), ConfigError);
  CHECK_THROWS_AS(CorruptionSpec::parse("noise:-1"), ConfigError);
  CHECK_THROWS_AS(CorruptionSpec::parse("jpeg:3"), ConfigError);
}

TEST_CASE("phantoms") {
  const auto [img, lab] = phantom(17);
  const auto [img2, lab2] = phantom(17);
  CHECK(img == img2);
  CHECK(lab == lab2);
  CHECK(phantom(18).first != img);
  CHECK(img.dims == Dims3{64, 64, 64});
  CHECK(lab.is_binary());
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const auto [im, lb] = phantom(seed);
    double fg = 0, fg_sum = 0, bg_sum = 0;
    for (std::size_t i = 0; i < lb.data.size(); ++i) {
      if (lb.data[i] > 0) {
        ++fg;
        fg_sum += im.data[i];
      } else {
        bg_sum += im.data[i];
      }
    }
    const double frac = fg / static_cast<double>(lb.data.size());
    CHECK(frac >= 0.02);
    CHECK(frac <= 0.20);
    const double contrast = fg_sum / fg - bg_sum / (static_cast<double>(lb.data.size()) - fg);
    CHECK(contrast >= 200.0 - 1e-6);
  }
  PhantomConfig small;
  small.dims = {16, 20, 24};
  const auto [si, sl] = phantom(3, small);
  CHECK(si.dims == small.dims);
  CHECK(sl.dims == small.dims);
}

TEST_CASE("manifest round trip and strict keys") {
  testutil::TempDir dir("manifest");
  DatasetSpec spec;
  spec.cases = {{"a", "a_img.raw", "a_lab.raw"}, {"b", "/abs/b.nii", "/abs/b_lab.nii"}};
  spec.modality = Modality::CT;
  spec.target_spacing = {1.5, 1.0, 1.0};
  spec.patch_size = {32, 32, 16};
  spec.ct_stats = CtStats{-100, 300, 40, 80};
  save_manifest(spec, dir.file("m.json"));
  const DatasetSpec back = load_manifest(dir.file("m.json"));
  CHECK(back.cases.size() == 2);
  CHECK(back.cases[0].id == "a");
  CHECK(back.modality == Modality::CT);
  CHECK(back.patch_size == Dims3{32, 32, 16});
  CHECK(back.ct_stats->clip_hi == 300.0);
  CHECK(back.image_path(0) == dir.file("a_img.raw"));
  CHECK(back.image_path(1) == "/abs/b.nii");

  testutil::write_bytes(dir.file("bad.json"), {'{', '"', 'z', '"', ':', '1', '}'});
  CHECK_THROWS_AS(load_manifest(dir.file("bad.json")), ConfigError);
}

TEST_CASE("preprocessing") {
  const auto [img, lab] = phantom(2);
  Volume aniso = img;
  aniso.spacing = {2.0, 1.0, 1.0};
  const Volume p = preprocess_image(aniso, Modality::MR, {1, 1, 1}, std::nullopt);
  CHECK(p.dims == Dims3{128, 64, 64});
  CHECK(std::abs(mean_of(p)) < 1e-4);
  Volume alab = lab;
  alab.spacing = {2.0, 1.0, 1.0};
  const Volume pl = preprocess_label(alab, {1, 1, 1});
  CHECK(pl.dims == p.dims);
  CHECK(pl.is_binary());
}
