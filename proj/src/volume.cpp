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

#include "ib3dseg/volume.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "ib3dseg/error.hpp"
#include "ib3dseg/log.hpp"
#include "json.hpp"

namespace ib3dseg {
namespace {

static_assert(std::endian::native == std::endian::little, "raw and NIfTI writers assume a little-endian host");

constexpr int kNiftiHeaderSize = 348;
constexpr std::int64_t kMaxVoxels = std::int64_t{1} << 31;

enum NiftiType : std::int16_t { kUint8 = 2, kInt16 = 4, kFloat32 = 16 };

// Field reader over the 348-byte header with optional byte swapping.
class HeaderView {
 public:
  HeaderView(const unsigned char* bytes, bool swap) : bytes_(bytes), swap_(swap) {}

  template <typename T>
  T get(std::size_t offset) const {
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, bytes_ + offset, sizeof(T));
    if (swap_)
      for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
  }

 private:
  const unsigned char* bytes_;
  bool swap_;
};

template <typename T>
void put(std::vector<unsigned char>& h, int offset, T v) {
  std::memcpy(h.data() + offset, &v, sizeof(T));
}

std::int64_t file_size(const std::string& path) {
  std::error_code ec;
  const auto n = std::filesystem::file_size(path, ec);
  if (ec) throw FormatError("cannot stat '" + path + "': " + ec.message());
  return static_cast<std::int64_t>(n);
}

std::string replace_extension(const std::string& path, const char* ext) {
  return std::filesystem::path(path).replace_extension(ext).string();
}

void require_positive_spacing(const Vec3& s, const std::string& what) {
  for (double v : s)
    if (!(v > 0.0) || !std::isfinite(v)) throw FormatError(what + ": voxel spacing must be positive");
}

}  // namespace

std::string_view to_string(VolumeKind kind) { return kind == VolumeKind::Image ? "image" : "label"; }

VolumeKind parse_volume_kind(std::string_view s) {
  if (s == "image") return VolumeKind::Image;
  if (s == "label") return VolumeKind::Label;
  throw ParameterError("unknown volume kind '" + std::string(s) + "'");
}

Volume::Volume(Dims3 d, Vec3 s, VolumeKind k, float fill) : dims(d), spacing(s), kind(k) {
  for (auto v : d)
    if (v < 1) throw ShapeError("volume dims must be positive");
  data.assign(static_cast<std::size_t>(d[0] * d[1] * d[2]), fill);
}

void Volume::validate() const {
  for (auto v : dims)
    if (v < 1) throw ShapeError("volume dims must be positive");
  if (static_cast<std::int64_t>(data.size()) != size())
    throw ShapeError("volume data length " + std::to_string(data.size()) + " does not match dims");
  for (double v : spacing)
    if (!(v > 0.0)) throw ParameterError("volume spacing must be positive");
  if (kind == VolumeKind::Label)
    for (float v : data)
      if (!(v >= 0.0f && v <= 255.0f && v == std::floor(v)))
        throw ParameterError("label volume holds non-integer or out-of-range value " + std::to_string(v));
}

bool Volume::is_binary() const {
  for (float v : data)
    if (v != 0.0f && v != 1.0f) return false;
  return true;
}

Volume read_nifti1(const std::string& path, VolumeKind kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  const std::int64_t total = file_size(path);
  if (total < kNiftiHeaderSize) throw FormatError("truncated NIfTI-1 header in '" + path + "'", total);

  unsigned char raw[kNiftiHeaderSize];
  in.read(reinterpret_cast<char*>(raw), kNiftiHeaderSize);
  if (!in) throw FormatError("cannot read NIfTI-1 header from '" + path + "'", 0);

  bool swap = false;
  {
    const HeaderView le(raw, false);
    if (le.get<std::int32_t>(0) != kNiftiHeaderSize) {
      if (HeaderView(raw, true).get<std::int32_t>(0) != kNiftiHeaderSize)
        throw FormatError("sizeof_hdr is not 348", 0);
      swap = true;
    }
  }
  const HeaderView h(raw, swap);
  if (std::memcmp(raw + 344, "n+1\0", 4) != 0) {
    if (std::memcmp(raw + 344, "ni1\0", 4) == 0)
      throw FormatError("two-file NIfTI (.hdr/.img) is not supported", 344);
    throw FormatError("bad NIfTI-1 magic", 344);
  }

  const int ndim = h.get<std::int16_t>(40);
  if (ndim < 3 || ndim > 7) throw FormatError("unsupported dimensionality dim[0]=" + std::to_string(ndim), 40);
  std::int64_t nx = h.get<std::int16_t>(42), ny = h.get<std::int16_t>(44), nz = h.get<std::int16_t>(46);
  if (nx < 1 || ny < 1 || nz < 1) throw FormatError("non-positive spatial dimension", 42);
  for (int i = 4; i <= ndim; ++i)
    if (h.get<std::int16_t>(40 + 2 * i) != 1)
      throw FormatError("only 3D volumes are supported (dim[" + std::to_string(i) + "] != 1)", 40 + 2 * i);

  const std::int16_t datatype = h.get<std::int16_t>(70);
  const std::int16_t bitpix = h.get<std::int16_t>(72);
  int bytes_per_voxel = 0;
  switch (datatype) {
    case kUint8: bytes_per_voxel = 1; break;
    case kInt16: bytes_per_voxel = 2; break;
    case kFloat32: bytes_per_voxel = 4; break;
    default: throw FormatError("unsupported NIfTI datatype " + std::to_string(datatype), 70);
  }
  if (bitpix != 8 * bytes_per_voxel)
    throw FormatError("bitpix " + std::to_string(bitpix) + " inconsistent with datatype", 72);

  const Vec3 spacing{std::abs(h.get<float>(76 + 12)), std::abs(h.get<float>(76 + 8)),
                     std::abs(h.get<float>(76 + 4))};
  if (!(spacing[0] > 0 && spacing[1] > 0 && spacing[2] > 0)) throw FormatError("non-positive pixdim", 80);

  const float vox_offset_f = h.get<float>(108);
  if (!(vox_offset_f >= kNiftiHeaderSize) || vox_offset_f != std::floor(vox_offset_f) ||
      vox_offset_f > static_cast<float>(std::numeric_limits<std::int32_t>::max()))
    throw FormatError("invalid vox_offset", 108);
  const auto vox_offset = static_cast<std::int64_t>(vox_offset_f);

  const std::int64_t voxels = nx * ny * nz;
  if (voxels > kMaxVoxels) throw FormatError("volume too large", 42);
  const std::int64_t need = vox_offset + voxels * bytes_per_voxel;
  if (total < need) throw FormatError("truncated NIfTI-1 data in '" + path + "'", total);

  float slope = h.get<float>(112);
  float inter = h.get<float>(116);
  if (!std::isfinite(slope) || slope == 0.0f) {
    slope = 1.0f;
    inter = 0.0f;
  }
  if (!std::isfinite(inter)) inter = 0.0f;

  const std::int16_t qform = h.get<std::int16_t>(252);
  const std::int16_t sform = h.get<std::int16_t>(254);
  Vec3 origin{0.0, 0.0, 0.0};
  bool rotated = false;
  if (qform > 0) {
    origin = {h.get<float>(276), h.get<float>(272), h.get<float>(268)};
    rotated = h.get<float>(256) != 0.0f || h.get<float>(260) != 0.0f || h.get<float>(264) != 0.0f;
  } else if (sform > 0) {
    origin = {h.get<float>(324), h.get<float>(308), h.get<float>(292)};
    for (int row = 0; row < 3; ++row)
      for (int col = 0; col < 3; ++col)
        if (row != col && h.get<float>(280 + 16 * row + 4 * col) != 0.0f) rotated = true;
  }
  if (rotated) log_warn("'" + path + "': orientation is not axis-aligned; only voxel spacing is honored");

  std::vector<unsigned char> blob(static_cast<std::size_t>(voxels * bytes_per_voxel));
  in.seekg(vox_offset);
  in.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  if (!in) throw FormatError("truncated NIfTI-1 data in '" + path + "'", vox_offset);

  Volume v;
  v.dims = {nz, ny, nx};
  v.spacing = spacing;
  v.origin = origin;
  v.kind = kind;
  v.data.resize(static_cast<std::size_t>(voxels));
  const HeaderView samples(blob.data(), swap);
  for (std::int64_t i = 0; i < voxels; ++i) {
    float raw_value = 0.0f;
    switch (datatype) {
      case kUint8: raw_value = blob[static_cast<std::size_t>(i)]; break;
      case kInt16: raw_value = samples.get<std::int16_t>(static_cast<std::size_t>(2 * i)); break;
      case kFloat32: raw_value = samples.get<float>(static_cast<std::size_t>(4 * i)); break;
    }
    v.data[static_cast<std::size_t>(i)] = raw_value * slope + inter;
  }
  if (kind == VolumeKind::Label) v.validate();
  return v;
}

void write_nifti1(const Volume& v, const std::string& path) {
  v.validate();
  for (auto d : v.dims)
    if (d > std::numeric_limits<std::int16_t>::max()) throw ParameterError("dimension too large for NIfTI-1");
  const bool label = v.kind == VolumeKind::Label;
  std::vector<unsigned char> h(352, 0);
  put<std::int32_t>(h, 0, kNiftiHeaderSize);
  put<std::int16_t>(h, 40, 3);
  put<std::int16_t>(h, 42, static_cast<std::int16_t>(v.dims[2]));
  put<std::int16_t>(h, 44, static_cast<std::int16_t>(v.dims[1]));
  put<std::int16_t>(h, 46, static_cast<std::int16_t>(v.dims[0]));
  for (int i = 4; i < 8; ++i) put<std::int16_t>(h, 40 + 2 * i, 1);
  put<std::int16_t>(h, 70, label ? kUint8 : kFloat32);
  put<std::int16_t>(h, 72, label ? 8 : 32);
  put<float>(h, 76, 1.0f);
  put<float>(h, 80, static_cast<float>(v.spacing[2]));
  put<float>(h, 84, static_cast<float>(v.spacing[1]));
  put<float>(h, 88, static_cast<float>(v.spacing[0]));
  put<float>(h, 108, 352.0f);
  put<float>(h, 112, 0.0f);
  put<std::uint8_t>(h, 123, 2);  // mm
  put<std::int16_t>(h, 252, 1);
  put<float>(h, 268, static_cast<float>(v.origin[2]));
  put<float>(h, 272, static_cast<float>(v.origin[1]));
  put<float>(h, 276, static_cast<float>(v.origin[0]));
  std::memcpy(h.data() + 344, "n+1\0", 4);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(h.data()), static_cast<std::streamsize>(h.size()));
  if (label) {
    std::vector<std::uint8_t> bytes(v.data.begin(), v.data.end());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  } else {
    out.write(reinterpret_cast<const char*>(v.data.data()), static_cast<std::streamsize>(v.data.size() * 4));
  }
  if (!out) throw Error("failed writing '" + path + "'");
}

std::string raw_blob_path(const std::string& path) { return replace_extension(path, ".raw"); }
std::string raw_sidecar_path(const std::string& path) { return replace_extension(path, ".json"); }

void write_raw(const Volume& v, const std::string& path) {
  v.validate();
  const bool label = v.kind == VolumeKind::Label;
  nlohmann::ordered_json meta;
  meta["dims"] = v.dims;
  meta["spacing"] = v.spacing;
  meta["origin"] = v.origin;
  meta["dtype"] = label ? "uint8" : "float32";
  meta["kind"] = to_string(v.kind);
  meta["byte_order"] = "little";
  {
    std::ofstream side(raw_sidecar_path(path));
    if (!side) throw Error("cannot write '" + raw_sidecar_path(path) + "'");
    side << meta.dump(2) << '\n';
  }
  std::ofstream out(raw_blob_path(path), std::ios::binary);
  if (!out) throw Error("cannot write '" + raw_blob_path(path) + "'");
  if (label) {
    std::vector<std::uint8_t> bytes(v.data.begin(), v.data.end());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  } else {
    out.write(reinterpret_cast<const char*>(v.data.data()), static_cast<std::streamsize>(v.data.size() * 4));
  }
  if (!out) throw Error("failed writing '" + raw_blob_path(path) + "'");
}

Volume read_raw(const std::string& path) {
  const std::string side_path = raw_sidecar_path(path);
  const std::string blob_path = raw_blob_path(path);
  std::ifstream side(side_path);
  if (!side) throw FormatError("cannot open sidecar '" + side_path + "'");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(side);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed sidecar '" + side_path + "': " + e.what());
  }

  Volume v;
  std::string dtype;
  try {
    v.dims = meta.at("dims").get<Dims3>();
    v.spacing = meta.at("spacing").get<Vec3>();
    v.origin = meta.at("origin").get<Vec3>();
    dtype = meta.at("dtype").get<std::string>();
    v.kind = parse_volume_kind(meta.at("kind").get<std::string>());
    if (meta.at("byte_order").get<std::string>() != "little")
      throw FormatError("sidecar '" + side_path + "': only little-endian blobs are supported");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("sidecar '" + side_path + "': " + e.what());
  } catch (const ParameterError& e) {
    throw FormatError("sidecar '" + side_path + "': " + e.what());
  }
  for (auto d : v.dims)
    if (d < 1) throw FormatError("sidecar '" + side_path + "': dims must be positive");
  require_positive_spacing(v.spacing, side_path);
  int bpv = 0;
  if (dtype == "float32")
    bpv = 4;
  else if (dtype == "uint8")
    bpv = 1;
  else
    throw FormatError("sidecar '" + side_path + "': unsupported dtype '" + dtype + "'");
  if (v.dims[0] > kMaxVoxels / v.dims[1] / v.dims[2]) throw FormatError("volume too large");

  const std::int64_t expect = v.size() * bpv;
  const std::int64_t actual = file_size(blob_path);
  if (actual != expect)
    throw FormatError("blob '" + blob_path + "' holds " + std::to_string(actual) + " bytes, sidecar implies " +
                      std::to_string(expect), std::min(actual, expect));

  std::ifstream in(blob_path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + blob_path + "'");
  v.data.resize(static_cast<std::size_t>(v.size()));
  if (bpv == 4) {
    in.read(reinterpret_cast<char*>(v.data.data()), static_cast<std::streamsize>(expect));
  } else {
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(expect));
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(expect));
    std::copy(bytes.begin(), bytes.end(), v.data.begin());
  }
  if (!in) throw FormatError("failed reading '" + blob_path + "'");
  return v;
}

Volume read_volume(const std::string& path, VolumeKind kind) {
  const std::string ext = std::filesystem::path(path).extension().string();
  if (ext == ".nii") return read_nifti1(path, kind);
  if (ext == ".raw" || ext == ".json") return read_raw(path);
  if (ext == ".gz") throw FormatError("compressed NIfTI is not supported; decompress '" + path + "' first");
  throw FormatError("unrecognized volume extension for '" + path + "'");
}

void write_volume(const Volume& v, const std::string& path) {
  const std::string ext = std::filesystem::path(path).extension().string();
  if (ext == ".nii")
    write_nifti1(v, path);
  else
    write_raw(v, path);
}

}  // namespace ib3dseg
