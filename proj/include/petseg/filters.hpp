#pragma once

#include <cmath>
#include <vector>

#include "petseg/volume.hpp"

namespace petseg {

// Separable Gaussian smoothing, replicate-padded at the borders, kernel
// truncated at 3 sigma. sigma is in voxels, shared by all axes.
inline std::vector<float> gaussian_smooth3(const std::vector<float>& src, const Shape3& shape,
                                           double sigma) {
  if (sigma <= 0.0) return src;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * (i / sigma) * (i / sigma));
    kernel[static_cast<size_t>(i + radius)] = w;
    sum += w;
  }
  for (auto& w : kernel) w /= sum;

  const int64_t nx = shape[0], ny = shape[1], nz = shape[2];
  std::vector<float> a = src, b(src.size());
  const auto idx = [&](int64_t x, int64_t y, int64_t z) {
    return static_cast<size_t>((x * ny + y) * nz + z);
  };
  for (int axis = 0; axis < 3; ++axis) {
    const int64_t n_axis = shape[axis];
    for (int64_t x = 0; x < nx; ++x)
      for (int64_t y = 0; y < ny; ++y)
        for (int64_t z = 0; z < nz; ++z) {
          double acc = 0.0;
          for (int k = -radius; k <= radius; ++k) {
            int64_t c[3] = {x, y, z};
            c[axis] = std::clamp<int64_t>(c[axis] + k, 0, n_axis - 1);
            acc += kernel[static_cast<size_t>(k + radius)] * a[idx(c[0], c[1], c[2])];
          }
          b[idx(x, y, z)] = static_cast<float>(acc);
        }
    std::swap(a, b);
  }
  return a;
}

}  // namespace petseg
