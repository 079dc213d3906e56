#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "petseg/errors.hpp"
#include "petseg/filters.hpp"
#include "petseg/rng.hpp"
#include "petseg/volume.hpp"

namespace petseg {

// Synthetic whole-body-like PET/CT test case. The CT shows an ellipsoidal
// soft-tissue body on air with a dense spine rod; the PET shows body
// background uptake, a few large bright organs that must NOT be segmented,
// and the smaller tracer-avid lesions that form the ground-truth label.
// Lesion and organ uptake ranges overlap, so intensity alone cannot separate
// them; size does.
struct PhantomSpec {
  Shape3 shape{64, 64, 64};
  Spacing3 spacing{2.0, 2.0, 2.0};
  int n_lesions = 2;
  int n_hot_organs = 2;
  std::array<double, 2> lesion_radius_range{5.0, 9.0};   // mm
  std::array<double, 2> lesion_uptake_range{4.0, 8.0};   // x background
  uint64_t seed = 0;

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (shape[a] < 8) throw ContractError("PhantomSpec: shape too small");
      if (!(spacing[a] > 0.0)) throw ContractError("PhantomSpec: spacing must be positive");
    }
    if (n_lesions < 0 || n_hot_organs < 0)
      throw ContractError("PhantomSpec: counts must be >= 0");
    if (!(lesion_radius_range[0] > 0.0) || lesion_radius_range[1] < lesion_radius_range[0])
      throw ContractError("PhantomSpec: bad lesion radius range");
    if (!(lesion_uptake_range[0] > 0.0) || lesion_uptake_range[1] < lesion_uptake_range[0])
      throw ContractError("PhantomSpec: bad lesion uptake range");
  }
};

namespace phantom_detail {

constexpr float kAirHU = -1000.0f;
constexpr float kSoftTissueHU = 40.0f;
constexpr float kSpineHU = 700.0f;
constexpr double kBackgroundUptake = 1.0;
constexpr double kOrganUptakeLo = 6.0, kOrganUptakeHi = 10.0;
constexpr double kOrganRadiusScaleLo = 1.6, kOrganRadiusScaleHi = 2.4;  // x max lesion radius
constexpr double kPetSmoothSigmaVox = 0.8;
constexpr int kMaxPlacementAttempts = 200;

struct Ellipsoid {
  std::array<double, 3> center;  // mm
  std::array<double, 3> radii;   // mm
  double value = 0.0;
};

inline bool inside(const Ellipsoid& e, const std::array<double, 3>& p) {
  double q = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double d = (p[a] - e.center[a]) / e.radii[a];
    q += d * d;
  }
  return q <= 1.0;
}

inline double dist(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  double q = 0.0;
  for (int i = 0; i < 3; ++i) q += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(q);
}

}  // namespace phantom_detail

struct PhantomCase {
  Case body;
  Volume hot_organ_mask;  // bright-but-benign regions, disjoint from the label
};

inline PhantomCase generate_phantom_detailed(const PhantomSpec& spec, const std::string& id) {
  using namespace phantom_detail;
  spec.validate();
  Rng rng(spec.seed);

  const auto& sh = spec.shape;
  const auto& sp = spec.spacing;
  const std::array<double, 3> extent{sh[0] * sp[0], sh[1] * sp[1], sh[2] * sp[2]};
  const std::array<double, 3> center{extent[0] / 2, extent[1] / 2, extent[2] / 2};

  Ellipsoid body;
  body.center = center;
  for (int a = 0; a < 3; ++a) body.radii[a] = extent[a] * rng.uniform(0.38, 0.46);

  const double spine_r = std::max(3.0, 0.08 * std::min(body.radii[0], body.radii[1]));
  const std::array<double, 2> spine_xy{center[0], center[1] + 0.55 * body.radii[1]};

  const double max_spacing = std::max({sp[0], sp[1], sp[2]});
  const double min_body_r = std::min({body.radii[0], body.radii[1], body.radii[2]});

  // Draw order is fixed (lesions first, then organs) so a spec maps to one
  // unique phantom.
  std::vector<Ellipsoid> lesions;
  for (int i = 0; i < spec.n_lesions; ++i) {
    const double r = rng.uniform(spec.lesion_radius_range[0], spec.lesion_radius_range[1]);
    const double uptake = rng.uniform(spec.lesion_uptake_range[0], spec.lesion_uptake_range[1]);
    bool placed = false;
    for (int attempt = 0; attempt < kMaxPlacementAttempts && !placed; ++attempt) {
      Ellipsoid e;
      for (int a = 0; a < 3; ++a) e.radii[a] = r * rng.uniform(0.9, 1.3);
      const double max_r = std::max({e.radii[0], e.radii[1], e.radii[2]});
      const double shrink = (max_r + max_spacing) / min_body_r;
      if (shrink >= 0.9) break;  // lesion cannot fit inside this body
      for (int a = 0; a < 3; ++a) {
        const double room = body.radii[a] * (1.0 - shrink);
        e.center[a] = center[a] + rng.uniform(-room, room);
      }
      Ellipsoid fit = body;
      for (int a = 0; a < 3; ++a) fit.radii[a] = body.radii[a] - max_r - max_spacing;
      if (!inside(fit, e.center)) continue;
      bool separated = true;
      for (const auto& other : lesions) {
        const double need = max_r + std::max({other.radii[0], other.radii[1], other.radii[2]}) +
                            2.0 * max_spacing;
        if (dist(e.center, other.center) < need) {
          separated = false;
          break;
        }
      }
      if (!separated) continue;
      e.value = uptake;
      lesions.push_back(e);
      placed = true;
    }
    if (!placed)
      throw GenerationError("generate_phantom: could not place lesion " + std::to_string(i) +
                            " inside the body for case " + id);
  }

  std::vector<Ellipsoid> organs;
  const double organ_base = spec.lesion_radius_range[1];
  for (int i = 0; i < spec.n_hot_organs; ++i) {
    const double r = organ_base * rng.uniform(kOrganRadiusScaleLo, kOrganRadiusScaleHi);
    const double uptake = rng.uniform(kOrganUptakeLo, kOrganUptakeHi);
    bool placed = false;
    for (int attempt = 0; attempt < kMaxPlacementAttempts && !placed; ++attempt) {
      Ellipsoid e;
      for (int a = 0; a < 3; ++a) e.radii[a] = r * rng.uniform(0.9, 1.2);
      const double max_r = std::max({e.radii[0], e.radii[1], e.radii[2]});
      const double shrink = (max_r + max_spacing) / min_body_r;
      if (shrink >= 0.9) break;
      for (int a = 0; a < 3; ++a) {
        const double room = body.radii[a] * (1.0 - shrink);
        e.center[a] = center[a] + rng.uniform(-room, room);
      }
      Ellipsoid fit = body;
      for (int a = 0; a < 3; ++a) fit.radii[a] = body.radii[a] - max_r - max_spacing;
      if (!inside(fit, e.center)) continue;
      bool separated = true;
      for (const auto& lesion : lesions) {
        const double need = max_r +
                            std::max({lesion.radii[0], lesion.radii[1], lesion.radii[2]}) +
                            2.0 * max_spacing;
        if (dist(e.center, lesion.center) < need) {
          separated = false;
          break;
        }
      }
      if (!separated) continue;
      e.value = uptake;
      organs.push_back(e);
      placed = true;
    }
    if (!placed)
      throw GenerationError("generate_phantom: could not place hot organ " + std::to_string(i) +
                            " for case " + id);
  }

  const int64_t n = sh[0] * sh[1] * sh[2];
  std::vector<float> ct(static_cast<size_t>(n), kAirHU);
  std::vector<float> pet(static_cast<size_t>(n), 0.0f);
  std::vector<float> label(static_cast<size_t>(n), 0.0f);
  std::vector<float> organ_mask(static_cast<size_t>(n), 0.0f);

  size_t idx = 0;
  for (int64_t x = 0; x < sh[0]; ++x)
    for (int64_t y = 0; y < sh[1]; ++y)
      for (int64_t z = 0; z < sh[2]; ++z, ++idx) {
        const std::array<double, 3> p{(x + 0.5) * sp[0], (y + 0.5) * sp[1], (z + 0.5) * sp[2]};
        if (!inside(body, p)) continue;
        ct[idx] = kSoftTissueHU;
        const double dxs = p[0] - spine_xy[0], dys = p[1] - spine_xy[1];
        if (dxs * dxs + dys * dys <= spine_r * spine_r) ct[idx] = kSpineHU;
        double uptake = kBackgroundUptake;
        for (const auto& e : lesions)
          if (inside(e, p)) {
            uptake = e.value;
            label[idx] = 1.0f;
          }
        for (const auto& e : organs)
          if (inside(e, p)) {
            uptake = e.value;
            organ_mask[idx] = 1.0f;
          }
        pet[idx] = static_cast<float>(uptake);
      }

  pet = gaussian_smooth3(pet, sh, kPetSmoothSigmaVox);

  Case c{id, Volume(VolumeKind::CT, sh, sp, std::move(ct)),
         Volume(VolumeKind::PET, sh, sp, std::move(pet)),
         Volume(VolumeKind::MASK, sh, sp, std::move(label)), Tracer::SYNTHETIC};
  return PhantomCase{std::move(c), Volume(VolumeKind::MASK, sh, sp, std::move(organ_mask))};
}

inline Case generate_phantom(const PhantomSpec& spec, const std::string& id = "phantom") {
  return generate_phantom_detailed(spec, id).body;
}

}  // namespace petseg
