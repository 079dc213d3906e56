#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "petseg/errors.hpp"
#include "petseg/manifest.hpp"
#include "petseg/volume.hpp"

namespace petseg {

enum class PetNormMode { ZSCORE_FOREGROUND, NONE };

inline const char* to_string(PetNormMode m) {
  return m == PetNormMode::ZSCORE_FOREGROUND ? "ZSCORE_FOREGROUND" : "NONE";
}

struct NormalizationScheme {
  double ct_clip_lo = -1024.0;
  double ct_clip_hi = 1024.0;
  double ct_out_lo = -1.0;
  double ct_out_hi = 1.0;
  PetNormMode pet_mode = PetNormMode::ZSCORE_FOREGROUND;
  double foreground_ct_threshold = -500.0;  // HU; roughly "inside the body"

  void validate() const {
    if (!(ct_clip_lo < ct_clip_hi)) throw ConfigError("NormalizationScheme: clip lo must be < hi");
    if (!(ct_out_lo < ct_out_hi)) throw ConfigError("NormalizationScheme: out lo must be < hi");
  }
};

// Arithmetic mean of each spacing component over the manifest entries,
// read from the CT headers.
inline Spacing3 compute_average_spacing(const Manifest& manifest) {
  if (manifest.entries.empty())
    throw ContractError("compute_average_spacing: empty manifest");
  Spacing3 sum{0.0, 0.0, 0.0};
  for (const auto& e : manifest.entries) {
    const NiftiHeaderInfo info = nifti_read_header(e.ct_path);
    for (int a = 0; a < 3; ++a) sum[a] += info.spacing[a];
  }
  const double n = static_cast<double>(manifest.entries.size());
  return {sum[0] / n, sum[1] / n, sum[2] / n};
}

enum class Interpolation { TRILINEAR, NEAREST };

// Resamples to the target spacing. New shape per axis is
// round-half-away-from-zero of n*s/target, floored at 1. Voxel centers stay
// aligned at the volume's physical center so repeated down/up cycles do not
// drift. Identical target spacing short-circuits to an exact copy, which
// also makes the operation idempotent at the target spacing.
inline Volume resample(const Volume& vol, const Spacing3& target, Interpolation interp) {
  for (int a = 0; a < 3; ++a)
    if (!(target[a] > 0.0)) throw ContractError("resample: target spacing must be positive");
  if (vol.kind() == VolumeKind::MASK && interp == Interpolation::TRILINEAR)
    throw ContractError("resample: TRILINEAR interpolation is invalid for MASK volumes");

  const Shape3 old_shape = vol.shape();
  const Spacing3 old_spacing = vol.spacing();

  Shape3 new_shape;
  for (int a = 0; a < 3; ++a) {
    const double exact = static_cast<double>(old_shape[a]) * old_spacing[a] / target[a];
    new_shape[a] = std::max<int64_t>(1, std::llround(exact));
  }
  if (new_shape == old_shape && target == old_spacing)
    return Volume(vol.kind(), old_shape, target, vol.data());

  const int64_t ox = new_shape[0], oy = new_shape[1], oz = new_shape[2];
  const int64_t ix = old_shape[0], iy = old_shape[1], iz = old_shape[2];
  std::vector<float> out(static_cast<size_t>(ox * oy * oz));

  // Source coordinate (voxel index space) of output voxel center j:
  // centers aligned at the physical volume center.
  std::array<std::vector<double>, 3> src_coord;
  for (int a = 0; a < 3; ++a) {
    src_coord[a].resize(static_cast<size_t>(new_shape[a]));
    const double half_old = static_cast<double>(old_shape[a]) * old_spacing[a] * 0.5;
    const double half_new = static_cast<double>(new_shape[a]) * target[a] * 0.5;
    for (int64_t j = 0; j < new_shape[a]; ++j)
      src_coord[a][static_cast<size_t>(j)] =
          ((static_cast<double>(j) + 0.5) * target[a] - half_new + half_old) / old_spacing[a] -
          0.5;
  }

  const auto& in = vol.data();
  const auto clampi = [](int64_t v, int64_t n) { return std::clamp<int64_t>(v, 0, n - 1); };

  size_t w = 0;
  if (interp == Interpolation::NEAREST) {
    for (int64_t x = 0; x < ox; ++x) {
      const int64_t sx = clampi(std::llround(src_coord[0][static_cast<size_t>(x)]), ix);
      for (int64_t y = 0; y < oy; ++y) {
        const int64_t sy = clampi(std::llround(src_coord[1][static_cast<size_t>(y)]), iy);
        for (int64_t z = 0; z < oz; ++z, ++w) {
          const int64_t sz = clampi(std::llround(src_coord[2][static_cast<size_t>(z)]), iz);
          out[w] = in[static_cast<size_t>((sx * iy + sy) * iz + sz)];
        }
      }
    }
  } else {
    for (int64_t x = 0; x < ox; ++x) {
      const double fx = src_coord[0][static_cast<size_t>(x)];
      const int64_t x0 = static_cast<int64_t>(std::floor(fx));
      const double wx = fx - static_cast<double>(x0);
      const int64_t xa = clampi(x0, ix), xb = clampi(x0 + 1, ix);
      for (int64_t y = 0; y < oy; ++y) {
        const double fy = src_coord[1][static_cast<size_t>(y)];
        const int64_t y0 = static_cast<int64_t>(std::floor(fy));
        const double wy = fy - static_cast<double>(y0);
        const int64_t ya = clampi(y0, iy), yb = clampi(y0 + 1, iy);
        for (int64_t z = 0; z < oz; ++z, ++w) {
          const double fz = src_coord[2][static_cast<size_t>(z)];
          const int64_t z0 = static_cast<int64_t>(std::floor(fz));
          const double wz = fz - static_cast<double>(z0);
          const int64_t za = clampi(z0, iz), zb = clampi(z0 + 1, iz);
          const auto v = [&](int64_t xx, int64_t yy, int64_t zz) {
            return static_cast<double>(in[static_cast<size_t>((xx * iy + yy) * iz + zz)]);
          };
          const double c00 = v(xa, ya, za) * (1 - wz) + v(xa, ya, zb) * wz;
          const double c01 = v(xa, yb, za) * (1 - wz) + v(xa, yb, zb) * wz;
          const double c10 = v(xb, ya, za) * (1 - wz) + v(xb, ya, zb) * wz;
          const double c11 = v(xb, yb, za) * (1 - wz) + v(xb, yb, zb) * wz;
          out[w] = static_cast<float>(((c00 * (1 - wy) + c01 * wy) * (1 - wx) +
                                       (c10 * (1 - wy) + c11 * wy) * wx));
        }
      }
    }
  }
  return Volume(vol.kind(), new_shape, target, std::move(out));
}

// CT: clip then affinely map to the output range. PET: z-score over the
// CT-foreground voxels; falls back to global statistics when the foreground
// is empty or constant, and to an all-zero PET when even that is degenerate
// (the warning sink records which fallback fired). The label is untouched.
inline Case normalize_case(const Case& input, const NormalizationScheme& scheme,
                           std::string* warning = nullptr) {
  scheme.validate();
  if (!input.ct.same_grid(input.pet))
    throw ContractError("normalize_case: CT and PET must share a grid (resample first)");

  const auto& ct_in = input.ct.data();
  std::vector<float> ct_out(ct_in.size());
  const double scale = (scheme.ct_out_hi - scheme.ct_out_lo) / (scheme.ct_clip_hi - scheme.ct_clip_lo);
  for (size_t i = 0; i < ct_in.size(); ++i) {
    const double c = std::clamp(static_cast<double>(ct_in[i]), scheme.ct_clip_lo, scheme.ct_clip_hi);
    ct_out[i] = static_cast<float>(scheme.ct_out_lo + (c - scheme.ct_clip_lo) * scale);
  }

  const auto& pet_in = input.pet.data();
  std::vector<float> pet_out(pet_in.size());
  if (scheme.pet_mode == PetNormMode::NONE) {
    pet_out = pet_in;
  } else {
    double sum = 0.0, sum2 = 0.0;
    int64_t count = 0;
    for (size_t i = 0; i < pet_in.size(); ++i) {
      if (static_cast<double>(ct_in[i]) > scheme.foreground_ct_threshold) {
        sum += pet_in[i];
        sum2 += static_cast<double>(pet_in[i]) * pet_in[i];
        ++count;
      }
    }
    bool fell_back = false;
    if (count == 0) {
      fell_back = true;
    } else {
      const double mean = sum / static_cast<double>(count);
      const double var = std::max(0.0, sum2 / static_cast<double>(count) - mean * mean);
      if (var <= 0.0) {
        fell_back = true;
      } else {
        const double inv_std = 1.0 / std::sqrt(var);
        for (size_t i = 0; i < pet_in.size(); ++i)
          pet_out[i] = static_cast<float>((pet_in[i] - mean) * inv_std);
      }
    }
    if (fell_back) {
      double gsum = 0.0, gsum2 = 0.0;
      for (const float v : pet_in) {
        gsum += v;
        gsum2 += static_cast<double>(v) * v;
      }
      const double mean = gsum / static_cast<double>(pet_in.size());
      const double var = std::max(0.0, gsum2 / static_cast<double>(pet_in.size()) - mean * mean);
      if (var > 0.0) {
        if (warning) *warning = "PET z-score fell back to global statistics for " + input.id;
        const double inv_std = 1.0 / std::sqrt(var);
        for (size_t i = 0; i < pet_in.size(); ++i)
          pet_out[i] = static_cast<float>((pet_in[i] - mean) * inv_std);
      } else {
        if (warning)
          *warning = "PET intensity is constant; normalized PET set to zero for " + input.id;
        std::fill(pet_out.begin(), pet_out.end(), 0.0f);
      }
    }
  }

  Case out{input.id, input.ct.with_data(std::move(ct_out)), input.pet.with_data(std::move(pet_out)),
           input.label, input.tracer};
  return out;
}

}  // namespace petseg
