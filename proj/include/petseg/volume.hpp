#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "petseg/errors.hpp"

namespace petseg {

enum class VolumeKind { CT, PET, PROBABILITY, MASK };

inline const char* to_string(VolumeKind k) {
  switch (k) {
    case VolumeKind::CT: return "CT";
    case VolumeKind::PET: return "PET";
    case VolumeKind::PROBABILITY: return "PROBABILITY";
    case VolumeKind::MASK: return "MASK";
  }
  return "?";
}

enum class Tracer { FDG, PSMA, SYNTHETIC };

inline const char* to_string(Tracer t) {
  switch (t) {
    case Tracer::FDG: return "FDG";
    case Tracer::PSMA: return "PSMA";
    case Tracer::SYNTHETIC: return "SYNTHETIC";
  }
  return "?";
}

using Shape3 = std::array<int64_t, 3>;
using Spacing3 = std::array<double, 3>;

// 3D scalar grid with physical spacing, the carrier for CT, PET, probability
// maps and binary masks. Values are float32 throughout; x is the slowest
// axis, z the fastest. Voxels are immutable after construction: all pipeline
// operations build new volumes.
class Volume {
 public:
  Volume(VolumeKind kind, Shape3 shape, Spacing3 spacing, std::vector<float> voxels)
      : kind_(kind), shape_(shape), spacing_(spacing), voxels_(std::move(voxels)) {
    validate();
  }

  static Volume filled(VolumeKind kind, Shape3 shape, Spacing3 spacing, float value) {
    const int64_t n = shape[0] * shape[1] * shape[2];
    return Volume(kind, shape, spacing, std::vector<float>(static_cast<size_t>(n), value));
  }

  static Volume zeros(VolumeKind kind, Shape3 shape, Spacing3 spacing) {
    return filled(kind, shape, spacing, 0.0f);
  }

  VolumeKind kind() const { return kind_; }
  const Shape3& shape() const { return shape_; }
  const Spacing3& spacing() const { return spacing_; }
  int64_t nx() const { return shape_[0]; }
  int64_t ny() const { return shape_[1]; }
  int64_t nz() const { return shape_[2]; }
  int64_t voxel_count() const { return shape_[0] * shape_[1] * shape_[2]; }

  const std::vector<float>& data() const { return voxels_; }

  float at(int64_t x, int64_t y, int64_t z) const {
    return voxels_[static_cast<size_t>((x * shape_[1] + y) * shape_[2] + z)];
  }

  int64_t index(int64_t x, int64_t y, int64_t z) const {
    return (x * shape_[1] + y) * shape_[2] + z;
  }

  bool same_grid(const Volume& other) const {
    return shape_ == other.shape_ && spacing_ == other.spacing_;
  }

  // Same kind/shape/spacing with different voxel data.
  Volume with_data(std::vector<float> voxels) const {
    return Volume(kind_, shape_, spacing_, std::move(voxels));
  }

  Volume with_kind(VolumeKind kind) const {
    return Volume(kind, shape_, spacing_, voxels_);
  }

 private:
  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (shape_[a] < 1) throw ContractError("Volume: all dims must be >= 1");
      if (!(spacing_[a] > 0.0)) throw ContractError("Volume: spacing must be positive");
    }
    if (voxels_.size() != static_cast<size_t>(voxel_count()))
      throw ContractError("Volume: voxel buffer size does not match shape");
    if (kind_ == VolumeKind::MASK) {
      for (float v : voxels_)
        if (v != 0.0f && v != 1.0f)
          throw ContractError("Volume: MASK voxels must be exactly 0 or 1");
    } else if (kind_ == VolumeKind::PROBABILITY) {
      for (float v : voxels_)
        if (!(v >= 0.0f && v <= 1.0f))
          throw ContractError("Volume: PROBABILITY voxels must lie in [0,1]");
    }
  }

  VolumeKind kind_;
  Shape3 shape_;
  Spacing3 spacing_;
  std::vector<float> voxels_;
};

inline int64_t voxel_count(const Volume& v) { return v.voxel_count(); }

// Physical volume of the foreground in milliliters.
inline double mask_volume_ml(const Volume& mask) {
  if (mask.kind() != VolumeKind::MASK)
    throw ContractError("mask_volume_ml: volume kind must be MASK, got " +
                        std::string(to_string(mask.kind())));
  int64_t nonzero = 0;
  for (float v : mask.data()) nonzero += (v != 0.0f);
  const auto& s = mask.spacing();
  return static_cast<double>(nonzero) * s[0] * s[1] * s[2] / 1000.0;
}

// A registered CT+PET pair with optional binary lesion label.
struct Case {
  std::string id;
  Volume ct;
  Volume pet;
  std::optional<Volume> label;
  Tracer tracer = Tracer::SYNTHETIC;

  // Holds after preprocessing; raw cases may still differ per modality.
  bool grids_match() const {
    bool ok = ct.same_grid(pet);
    if (label) ok = ok && ct.same_grid(*label);
    return ok;
  }
};

// Ordered channels on one grid (e.g. [CT, PET] or [CT, PET, STAGE1_MASK]).
struct MultiChannelVolume {
  std::vector<Volume> channels;
  std::vector<std::string> channel_names;

  MultiChannelVolume(std::vector<Volume> ch, std::vector<std::string> names)
      : channels(std::move(ch)), channel_names(std::move(names)) {
    if (channels.empty()) throw ContractError("MultiChannelVolume: no channels");
    if (channels.size() != channel_names.size())
      throw ContractError("MultiChannelVolume: name/channel count mismatch");
    for (size_t i = 1; i < channels.size(); ++i)
      if (!channels[0].same_grid(channels[i]))
        throw ContractError("MultiChannelVolume: channel " + channel_names[i] +
                            " is not on the shared grid");
  }

  int64_t n_channels() const { return static_cast<int64_t>(channels.size()); }
  const Shape3& shape() const { return channels[0].shape(); }
  const Spacing3& spacing() const { return channels[0].spacing(); }
};

enum class BlendMode { GAUSSIAN, UNIFORM };

inline const char* to_string(BlendMode b) {
  return b == BlendMode::GAUSSIAN ? "GAUSSIAN" : "UNIFORM";
}

// Patch placements plus blend weighting that cover a volume. Positions are
// start corners on the padded grid, sorted lexicographically, no duplicates.
struct SlidingWindowPlan {
  Shape3 patch_size{};
  std::vector<Shape3> positions;
  Shape3 pad_lo{};  // symmetric padding applied when the volume is smaller
  Shape3 pad_hi{};  // than the patch along an axis
  BlendMode blend = BlendMode::GAUSSIAN;

  Shape3 padded_shape(const Shape3& vol) const {
    return {vol[0] + pad_lo[0] + pad_hi[0], vol[1] + pad_lo[1] + pad_hi[1],
            vol[2] + pad_lo[2] + pad_hi[2]};
  }
};

}  // namespace petseg
