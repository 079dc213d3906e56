#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "petseg/errors.hpp"
#include "petseg/filters.hpp"
#include "petseg/rng.hpp"
#include "petseg/volume.hpp"

namespace petseg {

struct AugmentConfig {
  double p_affine = 0.2;
  double p_noise = 0.2;
  double p_smooth = 0.2;
  double p_intensity = 0.2;
  double p_contrast = 0.2;
  double p_flip = 0.5;  // applied per axis
  double rotation_max_deg = 15.0;
  std::array<double, 2> scale_range{0.9, 1.1};
  double translate_max_vox = 10.0;
  double noise_std = 0.1;
  std::array<double, 2> smooth_sigma_range{0.5, 1.0};
  double intensity_shift_max = 0.1;
  std::array<double, 2> contrast_range{0.75, 1.25};

  void validate() const {
    for (double p : {p_affine, p_noise, p_smooth, p_intensity, p_contrast, p_flip})
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("AugmentConfig: probabilities must be in [0,1]");
    if (scale_range[1] < scale_range[0] || smooth_sigma_range[1] < smooth_sigma_range[0] ||
        contrast_range[1] < contrast_range[0])
      throw ConfigError("AugmentConfig: ranges must be ordered");
  }

  static AugmentConfig identity() {
    AugmentConfig c;
    c.p_affine = c.p_noise = c.p_smooth = c.p_intensity = c.p_contrast = c.p_flip = 0.0;
    return c;
  }
};

struct CoarseDropoutConfig {
  double p_apply = 0.5;
  std::array<int, 2> holes_range{1, 8};
  std::array<double, 2> hole_size_range{0.05, 0.20};  // fraction of each mask dimension
  float fill_value = 0.0f;

  void validate() const {
    if (!(p_apply >= 0.0 && p_apply <= 1.0))
      throw ConfigError("CoarseDropoutConfig: p_apply must be in [0,1]");
    if (holes_range[0] < 1 || holes_range[1] < holes_range[0])
      throw ConfigError("CoarseDropoutConfig: holes range min must be >= 1 and ordered");
    if (!(hole_size_range[0] > 0.0) || hole_size_range[1] > 1.0 ||
        hole_size_range[1] < hole_size_range[0])
      throw ConfigError("CoarseDropoutConfig: hole size fractions must lie in (0,1] and be ordered");
  }
};

// Rotation, anisotropic scale and translation about the volume center, in
// voxel index space. Kept public so tests can check the resampled result
// against direct coordinate arithmetic.
struct AffineParams {
  std::array<double, 3> rotation_rad{0, 0, 0};  // about x, y, z axes
  std::array<double, 3> scale{1, 1, 1};
  std::array<double, 3> translation_vox{0, 0, 0};
};

inline AffineParams draw_affine(const AugmentConfig& cfg, Rng& rng) {
  AffineParams p;
  const double rot = cfg.rotation_max_deg * 3.14159265358979323846 / 180.0;
  for (int a = 0; a < 3; ++a) p.rotation_rad[a] = rng.uniform(-rot, rot);
  for (int a = 0; a < 3; ++a) p.scale[a] = rng.uniform(cfg.scale_range[0], cfg.scale_range[1]);
  for (int a = 0; a < 3; ++a)
    p.translation_vox[a] = rng.uniform(-cfg.translate_max_vox, cfg.translate_max_vox);
  return p;
}

namespace affine_detail {

using Mat3 = std::array<std::array<double, 3>, 3>;

inline Mat3 matmul(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += a[i][k] * b[k][j];
      c[i][j] = s;
    }
  return c;
}

// Forward rotation R = Rz * Ry * Rx.
inline Mat3 rotation_matrix(const std::array<double, 3>& r) {
  const double cx = std::cos(r[0]), sx = std::sin(r[0]);
  const double cy = std::cos(r[1]), sy = std::sin(r[1]);
  const double cz = std::cos(r[2]), sz = std::sin(r[2]);
  const Mat3 rx{{{1, 0, 0}, {0, cx, -sx}, {0, sx, cx}}};
  const Mat3 ry{{{cy, 0, sy}, {0, 1, 0}, {-sy, 0, cy}}};
  const Mat3 rz{{{cz, -sz, 0}, {sz, cz, 0}, {0, 0, 1}}};
  return matmul(rz, matmul(ry, rx));
}

// Source coordinate for a destination voxel under dst = R*S*(src-c) + c + t.
inline std::array<double, 3> source_coord(const Mat3& rot, const AffineParams& p,
                                          const std::array<double, 3>& center,
                                          const std::array<double, 3>& dst) {
  std::array<double, 3> d{dst[0] - center[0] - p.translation_vox[0],
                          dst[1] - center[1] - p.translation_vox[1],
                          dst[2] - center[2] - p.translation_vox[2]};
  // R^T is R^-1 for a rotation.
  std::array<double, 3> u{rot[0][0] * d[0] + rot[1][0] * d[1] + rot[2][0] * d[2],
                          rot[0][1] * d[0] + rot[1][1] * d[1] + rot[2][1] * d[2],
                          rot[0][2] * d[0] + rot[1][2] * d[1] + rot[2][2] * d[2]};
  return {u[0] / p.scale[0] + center[0], u[1] / p.scale[1] + center[1],
          u[2] / p.scale[2] + center[2]};
}

}  // namespace affine_detail

// Resamples a volume under the affine map; zero outside the border. Masks go
// through nearest-neighbor sampling and stay binary by construction.
inline Volume apply_affine_volume(const Volume& vol, const AffineParams& params, bool nearest) {
  const auto& sh = vol.shape();
  const int64_t nx = sh[0], ny = sh[1], nz = sh[2];
  const std::array<double, 3> center{(nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0};
  const auto rot = affine_detail::rotation_matrix(params.rotation_rad);
  const auto& in = vol.data();
  std::vector<float> out(in.size(), 0.0f);

  size_t w = 0;
  for (int64_t x = 0; x < nx; ++x)
    for (int64_t y = 0; y < ny; ++y)
      for (int64_t z = 0; z < nz; ++z, ++w) {
        const auto src = affine_detail::source_coord(
            rot, params, center,
            {static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)});
        if (nearest) {
          const int64_t sx = std::llround(src[0]);
          const int64_t sy = std::llround(src[1]);
          const int64_t sz = std::llround(src[2]);
          if (sx < 0 || sx >= nx || sy < 0 || sy >= ny || sz < 0 || sz >= nz) continue;
          out[w] = in[static_cast<size_t>((sx * ny + sy) * nz + sz)];
        } else {
          const int64_t x0 = static_cast<int64_t>(std::floor(src[0]));
          const int64_t y0 = static_cast<int64_t>(std::floor(src[1]));
          const int64_t z0 = static_cast<int64_t>(std::floor(src[2]));
          const double wx = src[0] - x0, wy = src[1] - y0, wz = src[2] - z0;
          double acc = 0.0;
          for (int dx = 0; dx < 2; ++dx)
            for (int dy = 0; dy < 2; ++dy)
              for (int dz = 0; dz < 2; ++dz) {
                const int64_t xx = x0 + dx, yy = y0 + dy, zz = z0 + dz;
                if (xx < 0 || xx >= nx || yy < 0 || yy >= ny || zz < 0 || zz >= nz) continue;
                const double wgt = (dx ? wx : 1 - wx) * (dy ? wy : 1 - wy) * (dz ? wz : 1 - wz);
                acc += wgt * in[static_cast<size_t>((xx * ny + yy) * nz + zz)];
              }
          out[w] = static_cast<float>(acc);
        }
      }
  return vol.with_data(std::move(out));
}

inline Volume flip_volume(const Volume& vol, int axis) {
  const auto& sh = vol.shape();
  const int64_t nx = sh[0], ny = sh[1], nz = sh[2];
  const auto& in = vol.data();
  std::vector<float> out(in.size());
  size_t w = 0;
  for (int64_t x = 0; x < nx; ++x)
    for (int64_t y = 0; y < ny; ++y)
      for (int64_t z = 0; z < nz; ++z, ++w) {
        const int64_t sx = axis == 0 ? nx - 1 - x : x;
        const int64_t sy = axis == 1 ? ny - 1 - y : y;
        const int64_t sz = axis == 2 ? nz - 1 - z : z;
        out[w] = in[static_cast<size_t>((sx * ny + sy) * nz + sz)];
      }
  return vol.with_data(std::move(out));
}

namespace augment_detail {

inline bool is_image_channel(const Volume& v) {
  return v.kind() == VolumeKind::CT || v.kind() == VolumeKind::PET;
}

}  // namespace augment_detail

// Training-time stochastic transforms. Spatial transforms (affine, flips)
// hit every channel and the label, the label and mask channels through
// nearest-neighbor sampling; intensity transforms (noise, smoothing,
// intensity shift, contrast) hit CT/PET channels only. Transform order and
// rng consumption are fixed, so output is a pure function of
// (input, config, rng state).
inline std::pair<MultiChannelVolume, Volume> apply_augmentations(const MultiChannelVolume& sample,
                                                                 const Volume& label,
                                                                 const AugmentConfig& cfg,
                                                                 Rng& rng) {
  cfg.validate();
  if (label.shape() != sample.shape())
    throw ContractError("apply_augmentations: label grid does not match channels");

  std::vector<Volume> channels = sample.channels;
  Volume out_label = label;

  if (rng.bernoulli(cfg.p_affine)) {
    const AffineParams params = draw_affine(cfg, rng);
    for (auto& ch : channels)
      ch = apply_affine_volume(ch, params, !augment_detail::is_image_channel(ch));
    out_label = apply_affine_volume(out_label, params, true);
  }
  for (int axis = 0; axis < 3; ++axis) {
    if (rng.bernoulli(cfg.p_flip)) {
      for (auto& ch : channels) ch = flip_volume(ch, axis);
      out_label = flip_volume(out_label, axis);
    }
  }
  if (rng.bernoulli(cfg.p_noise)) {
    for (auto& ch : channels) {
      if (!augment_detail::is_image_channel(ch)) continue;
      std::vector<float> d = ch.data();
      for (auto& v : d) v += static_cast<float>(rng.normal(0.0, cfg.noise_std));
      ch = ch.with_data(std::move(d));
    }
  }
  if (rng.bernoulli(cfg.p_smooth)) {
    const double sigma = rng.uniform(cfg.smooth_sigma_range[0], cfg.smooth_sigma_range[1]);
    for (auto& ch : channels) {
      if (!augment_detail::is_image_channel(ch)) continue;
      ch = ch.with_data(gaussian_smooth3(ch.data(), ch.shape(), sigma));
    }
  }
  if (rng.bernoulli(cfg.p_intensity)) {
    const double shift = rng.uniform(-cfg.intensity_shift_max, cfg.intensity_shift_max);
    for (auto& ch : channels) {
      if (!augment_detail::is_image_channel(ch)) continue;
      std::vector<float> d = ch.data();
      for (auto& v : d) v += static_cast<float>(shift);
      ch = ch.with_data(std::move(d));
    }
  }
  if (rng.bernoulli(cfg.p_contrast)) {
    const double gamma = rng.uniform(cfg.contrast_range[0], cfg.contrast_range[1]);
    for (auto& ch : channels) {
      if (!augment_detail::is_image_channel(ch)) continue;
      const auto& d = ch.data();
      double mean = 0.0;
      for (const float v : d) mean += v;
      mean /= static_cast<double>(d.size());
      std::vector<float> o(d.size());
      for (size_t i = 0; i < d.size(); ++i)
        o[i] = static_cast<float>(mean + (d[i] - mean) * gamma);
      ch = ch.with_data(std::move(o));
    }
  }

  return {MultiChannelVolume(std::move(channels), sample.channel_names), std::move(out_label)};
}

// Zeroes k random axis-aligned cuboids; each side is a uniform fraction of
// the corresponding mask dimension and cuboids are placed fully inside the
// mask. Never adds foreground.
inline Volume coarse_dropout(const Volume& mask, const CoarseDropoutConfig& cfg, Rng& rng) {
  cfg.validate();
  if (mask.kind() != VolumeKind::MASK)
    throw ContractError("coarse_dropout: input must be a MASK volume");
  if (!rng.bernoulli(cfg.p_apply)) return mask;

  const auto& sh = mask.shape();
  std::vector<float> d = mask.data();
  const int64_t holes = rng.uniform_int(cfg.holes_range[0], cfg.holes_range[1]);
  for (int64_t h = 0; h < holes; ++h) {
    int64_t side[3], start[3];
    for (int a = 0; a < 3; ++a) {
      const double frac = rng.uniform(cfg.hole_size_range[0], cfg.hole_size_range[1]);
      side[a] = std::clamp<int64_t>(std::llround(frac * static_cast<double>(sh[a])), 1, sh[a]);
      start[a] = rng.uniform_int(0, sh[a] - side[a]);
    }
    for (int64_t x = start[0]; x < start[0] + side[0]; ++x)
      for (int64_t y = start[1]; y < start[1] + side[1]; ++y)
        for (int64_t z = start[2]; z < start[2] + side[2]; ++z)
          d[static_cast<size_t>((x * sh[1] + y) * sh[2] + z)] = cfg.fill_value;
  }
  return mask.with_data(std::move(d));
}

}  // namespace petseg
