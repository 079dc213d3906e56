#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "petseg/errors.hpp"
#include "petseg/volume.hpp"

namespace petseg {

// Minimal NIfTI-1 single-file (.nii / .nii.gz) reader and writer, float32
// voxels only. Files are written gzip-compressed with a canonical identity
// orientation (sform = diag(spacing)), so round-trips are bit-exact and the
// output opens in standard viewers. zlib leaves the gzip mtime at zero,
// which keeps byte-identical re-runs byte-identical on disk as well.

namespace nifti_detail {

inline void put_i32(unsigned char* p, int32_t v) { std::memcpy(p, &v, 4); }
inline void put_i16(unsigned char* p, int16_t v) { std::memcpy(p, &v, 2); }
inline void put_f32(unsigned char* p, float v) { std::memcpy(p, &v, 4); }

inline int32_t get_i32(const unsigned char* p) { int32_t v; std::memcpy(&v, p, 4); return v; }
inline int16_t get_i16(const unsigned char* p) { int16_t v; std::memcpy(&v, p, 2); return v; }
inline float get_f32(const unsigned char* p) { float v; std::memcpy(&v, p, 4); return v; }

constexpr int kHeaderSize = 348;
constexpr int kVoxOffset = 352;

}  // namespace nifti_detail

struct NiftiHeaderInfo {
  Shape3 shape;
  Spacing3 spacing;
};

inline NiftiHeaderInfo nifti_read_header(const std::string& path) {
  namespace nd = nifti_detail;
  if (!std::filesystem::exists(path)) throw IoError("nifti: file not found: " + path);
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw IoError("nifti: cannot open " + path);
  unsigned char hdr[nd::kHeaderSize];
  const int got = gzread(f, hdr, nd::kHeaderSize);
  if (got != nd::kHeaderSize) {
    gzclose(f);
    throw FormatError("nifti: truncated header in " + path);
  }
  gzclose(f);

  if (nd::get_i32(hdr + 0) != nd::kHeaderSize)
    throw FormatError("nifti: bad sizeof_hdr in " + path);
  if (std::memcmp(hdr + 344, "n+1", 3) != 0)
    throw FormatError("nifti: bad magic in " + path);
  const int16_t ndim = nd::get_i16(hdr + 40);
  if (ndim < 3) throw FormatError("nifti: expected a 3D image in " + path);
  for (int d = 4; d <= ndim; ++d)
    if (nd::get_i16(hdr + 40 + 2 * d) > 1)
      throw FormatError("nifti: higher-dimensional image not supported: " + path);
  if (nd::get_i16(hdr + 70) != 16)
    throw FormatError("nifti: only float32 voxels supported: " + path);

  NiftiHeaderInfo info;
  for (int a = 0; a < 3; ++a) {
    info.shape[a] = nd::get_i16(hdr + 40 + 2 * (a + 1));
    info.spacing[a] = nd::get_f32(hdr + 76 + 4 * (a + 1));
    if (info.shape[a] < 1) throw FormatError("nifti: nonpositive dim in " + path);
    if (!(info.spacing[a] > 0.0f))
      throw FormatError("nifti: nonpositive spacing in " + path);
  }
  return info;
}

inline Volume nifti_read(const std::string& path, VolumeKind kind) {
  namespace nd = nifti_detail;
  const NiftiHeaderInfo info = nifti_read_header(path);

  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw IoError("nifti: cannot open " + path);
  std::vector<unsigned char> skip(nd::kVoxOffset);
  if (gzread(f, skip.data(), nd::kVoxOffset) != nd::kVoxOffset) {
    gzclose(f);
    throw FormatError("nifti: truncated file " + path);
  }
  const int64_t n = info.shape[0] * info.shape[1] * info.shape[2];
  std::vector<float> raw(static_cast<size_t>(n));
  int64_t remaining = n * 4;
  char* dst = reinterpret_cast<char*>(raw.data());
  while (remaining > 0) {
    const unsigned chunk = static_cast<unsigned>(std::min<int64_t>(remaining, 1 << 24));
    const int r = gzread(f, dst, chunk);
    if (r <= 0) {
      gzclose(f);
      throw FormatError("nifti: truncated voxel data in " + path);
    }
    dst += r;
    remaining -= r;
  }
  gzclose(f);

  // NIfTI stores the first index fastest; Volume stores z fastest.
  const int64_t nx = info.shape[0], ny = info.shape[1], nz = info.shape[2];
  std::vector<float> vox(static_cast<size_t>(n));
  for (int64_t z = 0; z < nz; ++z)
    for (int64_t y = 0; y < ny; ++y)
      for (int64_t x = 0; x < nx; ++x)
        vox[static_cast<size_t>((x * ny + y) * nz + z)] =
            raw[static_cast<size_t>(x + nx * (y + ny * z))];

  if (kind == VolumeKind::MASK) {
    for (float v : vox)
      if (v != 0.0f && v != 1.0f)
        throw FormatError("nifti: mask file contains values outside {0,1}: " + path);
  }
  return Volume(kind, info.shape, info.spacing, std::move(vox));
}

inline void nifti_write(const std::string& path, const Volume& vol) {
  namespace nd = nifti_detail;
  unsigned char hdr[nd::kVoxOffset];
  std::memset(hdr, 0, sizeof(hdr));
  nd::put_i32(hdr + 0, nd::kHeaderSize);
  nd::put_i16(hdr + 40, 3);
  for (int a = 0; a < 3; ++a) {
    nd::put_i16(hdr + 40 + 2 * (a + 1), static_cast<int16_t>(vol.shape()[a]));
    nd::put_f32(hdr + 76 + 4 * (a + 1), static_cast<float>(vol.spacing()[a]));
  }
  for (int d = 4; d <= 7; ++d) nd::put_i16(hdr + 40 + 2 * d, 1);
  nd::put_i16(hdr + 70, 16);  // DT_FLOAT32
  nd::put_i16(hdr + 72, 32);
  nd::put_f32(hdr + 76, 1.0f);
  nd::put_f32(hdr + 108, static_cast<float>(nd::kVoxOffset));
  nd::put_f32(hdr + 112, 1.0f);  // scl_slope
  nd::put_i16(hdr + 254, 1);     // sform_code: scanner
  nd::put_f32(hdr + 280 + 0, static_cast<float>(vol.spacing()[0]));
  nd::put_f32(hdr + 296 + 4, static_cast<float>(vol.spacing()[1]));
  nd::put_f32(hdr + 312 + 8, static_cast<float>(vol.spacing()[2]));
  std::memcpy(hdr + 344, "n+1\0", 4);

  const int64_t nx = vol.nx(), ny = vol.ny(), nz = vol.nz();
  std::vector<float> raw(static_cast<size_t>(vol.voxel_count()));
  const auto& vox = vol.data();
  for (int64_t z = 0; z < nz; ++z)
    for (int64_t y = 0; y < ny; ++y)
      for (int64_t x = 0; x < nx; ++x)
        raw[static_cast<size_t>(x + nx * (y + ny * z))] =
            vox[static_cast<size_t>((x * ny + y) * nz + z)];

  const std::string tmp = path + ".tmp";
  std::filesystem::create_directories(std::filesystem::path(path).parent_path().empty()
                                          ? "."
                                          : std::filesystem::path(path).parent_path());
  gzFile f = gzopen(tmp.c_str(), "wb");
  if (!f) throw IoError("nifti: cannot write " + tmp);
  bool ok = gzwrite(f, hdr, nd::kVoxOffset) == nd::kVoxOffset;
  int64_t remaining = static_cast<int64_t>(raw.size()) * 4;
  const char* src = reinterpret_cast<const char*>(raw.data());
  while (ok && remaining > 0) {
    const unsigned chunk = static_cast<unsigned>(std::min<int64_t>(remaining, 1 << 24));
    ok = gzwrite(f, src, chunk) == static_cast<int>(chunk);
    src += chunk;
    remaining -= chunk;
  }
  if (gzclose(f) != Z_OK) ok = false;
  if (!ok) {
    std::filesystem::remove(tmp);
    throw IoError("nifti: write failed for " + path);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace petseg
