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
#include <cstring>

#include "doctest.h"
#include "ib3dseg/error.hpp"
#include "ib3dseg/random.hpp"
#include "ib3dseg/volume.hpp"
#include "json.hpp"
#include "nifti_fixture.hpp"
#include "test_util.hpp"

using namespace ib3dseg;
using testutil::NiftiFixture;
using testutil::TempDir;

namespace {

std::vector<float> iota_values(int n) {
  std::vector<float> v(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = 0.25f * static_cast<float>(i) - 1.0f;
  return v;
}

Volume random_volume(Rng& rng, VolumeKind kind) {
  Dims3 dims{1 + static_cast<std::int64_t>(rng.uniform_int(9)), 1 + static_cast<std::int64_t>(rng.uniform_int(9)),
             1 + static_cast<std::int64_t>(rng.uniform_int(9))};
  Volume v(dims, {rng.uniform(0.3, 3.0), rng.uniform(0.3, 3.0), rng.uniform(0.3, 3.0)}, kind);
  v.origin = {rng.uniform(-100, 100), rng.uniform(-100, 100), rng.uniform(-100, 100)};
  for (float& x : v.data)
    x = kind == VolumeKind::Label ? static_cast<float>(rng.uniform_int(3)) : static_cast<float>(rng.normal(0, 500));
  return v;
}

}  // namespace

TEST_CASE("NIfTI-1 float32 fixture") {
  TempDir dir("nifti");
  NiftiFixture fx;
  const auto values = iota_values(12);
  testutil::write_bytes(dir.file("a.nii"), fx.file(values));
  const Volume v = read_nifti1(dir.file("a.nii"));
  CHECK(v.dims == Dims3{2, 2, 3});
  CHECK(v.spacing == Vec3{2.0, 1.0, 0.5});
  CHECK(v.origin == Vec3{30.0, 20.0, -10.0});
  CHECK(v.data == values);
  // x is the fastest axis on disk and in memory.
  CHECK(v.at(0, 0, 1) == values[1]);
  CHECK(v.at(0, 1, 0) == values[3]);
  CHECK(v.at(1, 0, 0) == values[6]);
}

TEST_CASE("NIfTI-1 rescaling, int16, uint8 and big-endian") {
  TempDir dir("nifti");
  SUBCASE("slope 2, intercept 1") {
    NiftiFixture fx;
    fx.datatype = 4;
    fx.bitpix = 16;
    fx.slope = 2.0f;
    fx.inter = 1.0f;
    std::vector<short> raw(12, 3);
    raw[5] = -4;
    testutil::write_bytes(dir.file("s.nii"), fx.file(raw));
    const Volume v = read_nifti1(dir.file("s.nii"));
    CHECK(v.data[0] == 7.0f);
    CHECK(v.data[5] == -7.0f);
  }
  SUBCASE("uint8 label") {
    NiftiFixture fx;
    fx.datatype = 2;
    fx.bitpix = 8;
    std::vector<unsigned char> raw(12, 0);
    raw[4] = 1;
    testutil::write_bytes(dir.file("l.nii"), fx.file(raw));
    const Volume v = read_nifti1(dir.file("l.nii"), VolumeKind::Label);
    CHECK(v.kind == VolumeKind::Label);
    CHECK(v.is_binary());
    CHECK(v.data[4] == 1.0f);
  }
  SUBCASE("big-endian float32") {
    NiftiFixture fx;
    fx.big_endian = true;
    const auto values = iota_values(12);
    testutil::write_bytes(dir.file("be.nii"), fx.file(values));
    const Volume v = read_nifti1(dir.file("be.nii"));
    CHECK(v.data == values);
    CHECK(v.spacing == Vec3{2.0, 1.0, 0.5});
  }
  SUBCASE("zero slope means no scaling") {
    NiftiFixture fx;
    fx.inter = 100.0f;
    const auto values = iota_values(12);
    testutil::write_bytes(dir.file("z.nii"), fx.file(values));
    CHECK(read_nifti1(dir.file("z.nii")).data == values);
  }
}

TEST_CASE("NIfTI-1 malformed inputs") {
  TempDir dir("nifti");
  const auto values = iota_values(12);
  auto expect_format_error = [&](const std::vector<unsigned char>& bytes, long long offset) {
    testutil::write_bytes(dir.file("bad.nii"), bytes);
    try {
      read_nifti1(dir.file("bad.nii"));
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.offset() == offset);
    }
  };
  SUBCASE("bad magic") {
    NiftiFixture fx;
    fx.magic = "xyz";
    expect_format_error(fx.file(values), 344);
  }
  SUBCASE("two-file variant") {
    NiftiFixture fx;
    fx.magic = "ni1";
    expect_format_error(fx.file(values), 344);
  }
  SUBCASE("truncated data") {
    auto bytes = NiftiFixture{}.file(values);
    bytes.resize(bytes.size() - 3);
    expect_format_error(bytes, static_cast<long long>(bytes.size()));
  }
  SUBCASE("truncated header") {
    auto bytes = NiftiFixture{}.file(values);
    bytes.resize(200);
    expect_format_error(bytes, 200);
  }
  SUBCASE("unsupported datatype") {
    NiftiFixture fx;
    fx.datatype = 64;
    fx.bitpix = 64;
    expect_format_error(fx.file(values), 70);
  }
  SUBCASE("bitpix mismatch") {
    NiftiFixture fx;
    fx.bitpix = 16;
    expect_format_error(fx.file(values), 72);
  }
  SUBCASE("vox_offset inside the header") {
    NiftiFixture fx;
    fx.vox_offset = 100.0f;
    expect_format_error(fx.header(), 108);
  }
  SUBCASE("bad sizeof_hdr") {
    auto bytes = NiftiFixture{}.file(values);
    bytes[0] = 0;
    expect_format_error(bytes, 0);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(read_nifti1(dir.file("absent.nii")), FormatError); }
}

TEST_CASE("NIfTI-1 truncation fuzz never crashes") {
  TempDir dir("nifti");
  const auto bytes = NiftiFixture{}.file(iota_values(12));
  for (std::size_t n = 0; n < bytes.size(); n += 7) {
    testutil::write_bytes(dir.file("t.nii"), std::vector<unsigned char>(bytes.begin(), bytes.begin() + n));
    CHECK_THROWS_AS(read_nifti1(dir.file("t.nii")), FormatError);
  }
}

TEST_CASE("NIfTI-1 write/read round trip") {
  TempDir dir("nifti");
  Rng rng(5);
  for (int i = 0; i < 10; ++i) {
    const Volume v = random_volume(rng, i % 2 ? VolumeKind::Label : VolumeKind::Image);
    write_nifti1(v, dir.file("rt.nii"));
    const Volume back = read_nifti1(dir.file("rt.nii"), v.kind);
    CHECK(back.dims == v.dims);
    CHECK(back.data == v.data);
    for (int a = 0; a < 3; ++a) {
      CHECK(back.spacing[a] == doctest::Approx(v.spacing[a]).epsilon(1e-6));
      CHECK(back.origin[a] == doctest::Approx(v.origin[a]).epsilon(1e-6));
    }
  }
}

TEST_CASE("raw format round trips 50 random volumes exactly") {
  TempDir dir("raw");
  Rng rng(42);
  for (int i = 0; i < 50; ++i) {
    const Volume v = random_volume(rng, i % 3 == 0 ? VolumeKind::Label : VolumeKind::Image);
    const std::string path = dir.file("case" + std::to_string(i) + ".raw");
    write_raw(v, path);
    CHECK(read_raw(path) == v);
    CHECK(read_volume(raw_sidecar_path(path)) == v);
  }
}

TEST_CASE("raw sidecar contents and errors") {
  TempDir dir("raw");
  Volume v({2, 3, 4}, {1.5, 1.0, 0.5}, VolumeKind::Label);
  v.data[3] = 1.0f;
  write_raw(v, dir.file("m.raw"));
  std::ifstream in(dir.file("m.json"));
  const auto j = nlohmann::json::parse(in);
  CHECK(j.at("dims") == nlohmann::json::array({2, 3, 4}));
  CHECK(j.at("dtype") == "uint8");
  CHECK(j.at("kind") == "label");
  CHECK(j.at("byte_order") == "little");
  CHECK(testutil::read_bytes(dir.file("m.raw")).size() == 24);

  auto blob = testutil::read_bytes(dir.file("m.raw"));
  blob.pop_back();
  testutil::write_bytes(dir.file("m.raw"), blob);
  CHECK_THROWS_AS(read_raw(dir.file("m.raw")), FormatError);
  blob.push_back(0);
  blob.push_back(0);
  testutil::write_bytes(dir.file("m.raw"), blob);
  CHECK_THROWS_AS(read_raw(dir.file("m.raw")), FormatError);

  testutil::write_bytes(dir.file("m.json"), {'{', 'x'});
  CHECK_THROWS_AS(read_raw(dir.file("m.raw")), FormatError);
  CHECK_THROWS_AS(read_volume(dir.file("x.nii.gz")), FormatError);
  CHECK_THROWS_AS(read_volume(dir.file("x.mha")), FormatError);
}

TEST_CASE("volume validation") {
  Volume v({2, 2, 2}, {1, 1, 1}, VolumeKind::Label);
  CHECK_NOTHROW(v.validate());
  v.data[0] = 0.5f;
  CHECK_THROWS(v.validate());
  v.data[0] = 256.0f;
  CHECK_THROWS(v.validate());
  Volume w({2, 2, 2}, {1, 0, 1});
  CHECK_THROWS(w.validate());
  CHECK(parse_volume_kind(to_string(VolumeKind::Image)) == VolumeKind::Image);
  CHECK_THROWS(parse_volume_kind("mask"));
}
