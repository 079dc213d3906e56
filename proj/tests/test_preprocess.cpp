#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <vector>

#include "petseg/manifest.hpp"
#include "petseg/nifti.hpp"
#include "petseg/preprocess.hpp"
#include "petseg/rng.hpp"

using namespace petseg;
namespace fs = std::filesystem;

namespace {

Volume ramp_volume(VolumeKind kind, Shape3 shape, Spacing3 spacing, int axis) {
  std::vector<float> v(static_cast<size_t>(shape[0] * shape[1] * shape[2]));
  size_t i = 0;
  for (int64_t x = 0; x < shape[0]; ++x)
    for (int64_t y = 0; y < shape[1]; ++y)
      for (int64_t z = 0; z < shape[2]; ++z, ++i) {
        const int64_t c[3] = {x, y, z};
        v[i] = static_cast<float>(c[axis]);
      }
  return Volume(kind, shape, spacing, std::move(v));
}

// Independent pointwise interpolation oracle: evaluates the trilinear
// interpolant of the source directly at one output-voxel coordinate.
double oracle_trilinear_at(const Volume& src, const Spacing3& target, const Shape3& out_shape,
                           int64_t x, int64_t y, int64_t z) {
  const auto& sh = src.shape();
  const auto& sp = src.spacing();
  double coord[3];
  const int64_t out_idx[3] = {x, y, z};
  for (int a = 0; a < 3; ++a) {
    const double phys =
        (out_idx[a] + 0.5) * target[a] - 0.5 * out_shape[a] * target[a] + 0.5 * sh[a] * sp[a];
    coord[a] = phys / sp[a] - 0.5;
  }
  const auto clampi = [](int64_t v, int64_t n) { return std::clamp<int64_t>(v, 0, n - 1); };
  double result = 0.0;
  const int64_t x0 = static_cast<int64_t>(std::floor(coord[0]));
  const int64_t y0 = static_cast<int64_t>(std::floor(coord[1]));
  const int64_t z0 = static_cast<int64_t>(std::floor(coord[2]));
  for (int dx = 0; dx < 2; ++dx)
    for (int dy = 0; dy < 2; ++dy)
      for (int dz = 0; dz < 2; ++dz) {
        const double w = (dx ? coord[0] - x0 : 1 - (coord[0] - x0)) *
                         (dy ? coord[1] - y0 : 1 - (coord[1] - y0)) *
                         (dz ? coord[2] - z0 : 1 - (coord[2] - z0));
        result += w * src.at(clampi(x0 + dx, sh[0]), clampi(y0 + dy, sh[1]),
                             clampi(z0 + dz, sh[2]));
      }
  return result;
}

}  // namespace

TEST_CASE("resample at source spacing is the identity") {
  Rng rng(4);
  std::vector<float> v(8 * 8 * 8);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-500, 500));
  const Volume vol(VolumeKind::CT, {8, 8, 8}, {2, 2, 3}, v);
  const Volume r = resample(vol, {2, 2, 3}, Interpolation::TRILINEAR);
  CHECK(r.data() == vol.data());
  CHECK(r.shape() == vol.shape());
}

TEST_CASE("resample doubles the grid and preserves constants") {
  const Volume vol = Volume::filled(VolumeKind::CT, {8, 8, 8}, {2, 2, 2}, 7.25f);
  const Volume r = resample(vol, {1, 1, 1}, Interpolation::TRILINEAR);
  CHECK(r.shape() == Shape3{16, 16, 16});
  for (float x : r.data()) CHECK(x == Catch::Approx(7.25f).margin(1e-6));
}

TEST_CASE("resample shape rounding is half-away-from-zero with floor 1") {
  const Volume vol = Volume::zeros(VolumeKind::CT, {5, 5, 5}, {1, 1, 1});
  // 5 * 1 / 2 = 2.5 -> rounds to 3
  CHECK(resample(vol, {2, 2, 2}, Interpolation::TRILINEAR).shape() == Shape3{3, 3, 3});
  // Extreme downsampling floors at one voxel.
  CHECK(resample(vol, {100, 100, 100}, Interpolation::TRILINEAR).shape() == Shape3{1, 1, 1});
}

TEST_CASE("resample linear ramp matches the pointwise oracle") {
  for (int axis = 0; axis < 3; ++axis) {
    const Volume vol = ramp_volume(VolumeKind::CT, {8, 8, 8}, {2, 2, 2}, axis);
    const Volume r = resample(vol, {1, 1, 1}, Interpolation::TRILINEAR);
    REQUIRE(r.shape() == Shape3{16, 16, 16});
    for (int64_t x = 0; x < 16; ++x)
      for (int64_t y = 0; y < 16; ++y)
        for (int64_t z = 0; z < 16; ++z) {
          const double expected = oracle_trilinear_at(vol, {1, 1, 1}, r.shape(), x, y, z);
          CHECK(std::abs(r.at(x, y, z) - expected) < 1e-5);
        }
    // Interior voxels also match the analytic ramp value (t + 0.5) / 2 - 0.5.
    for (int64_t t = 2; t < 14; ++t) {
      const double analytic = (t + 0.5) / 2.0 - 0.5;
      const int64_t x = axis == 0 ? t : 8, y = axis == 1 ? t : 8, z = axis == 2 ? t : 8;
      CHECK(std::abs(r.at(x, y, z) - analytic) < 1e-5);
    }
  }
}

TEST_CASE("resample is idempotent at the target spacing") {
  Rng rng(9);
  std::vector<float> v(10 * 12 * 14);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-100, 100));
  const Volume vol(VolumeKind::PET, {10, 12, 14}, {1.5, 2.0, 2.5}, v);
  const Volume once = resample(vol, {2, 2, 2}, Interpolation::TRILINEAR);
  const Volume twice = resample(once, {2, 2, 2}, Interpolation::TRILINEAR);
  CHECK(once.data() == twice.data());
}

TEST_CASE("smooth field round-trip bound") {
  // Band-limited field: low-frequency cosine product.
  Shape3 sh{16, 16, 16};
  std::vector<float> v(static_cast<size_t>(16 * 16 * 16));
  size_t i = 0;
  for (int64_t x = 0; x < 16; ++x)
    for (int64_t y = 0; y < 16; ++y)
      for (int64_t z = 0; z < 16; ++z, ++i)
        v[i] = static_cast<float>(std::cos(0.05 * x) * std::cos(0.04 * y) * std::cos(0.03 * z));
  const Volume vol(VolumeKind::CT, sh, {2, 2, 2}, v);
  const Volume down = resample(vol, {1, 1, 1}, Interpolation::TRILINEAR);
  const Volume back = resample(down, {2, 2, 2}, Interpolation::TRILINEAR);
  REQUIRE(back.shape() == sh);
  for (int64_t x = 2; x < 14; ++x)
    for (int64_t y = 2; y < 14; ++y)
      for (int64_t z = 2; z < 14; ++z)
        CHECK(std::abs(back.at(x, y, z) - vol.at(x, y, z)) < 1e-3);
}

TEST_CASE("mask resampling uses nearest and stays binary") {
  Rng rng(17);
  std::vector<float> v(12 * 12 * 12);
  for (auto& x : v) x = static_cast<float>(rng.uniform() < 0.4);
  const Volume mask(VolumeKind::MASK, {12, 12, 12}, {2, 2, 2}, v);
  CHECK_THROWS_AS(resample(mask, {1, 1, 1}, Interpolation::TRILINEAR), ContractError);
  const Volume r = resample(mask, {1.3, 0.9, 2.7}, Interpolation::NEAREST);
  for (float x : r.data()) CHECK((x == 0.0f || x == 1.0f));
}

TEST_CASE("compute_average_spacing averages header spacings") {
  const auto dir = fs::temp_directory_path() / "petseg_test_avgspacing";
  fs::remove_all(dir);
  fs::create_directories(dir);
  Manifest m;
  const Spacing3 spacings[2] = {{1, 1, 1}, {3, 3, 3}};
  for (int i = 0; i < 2; ++i) {
    const Volume v = Volume::zeros(VolumeKind::CT, {4, 4, 4}, spacings[i]);
    ManifestEntry e;
    e.case_id = "c" + std::to_string(i);
    e.ct_path = (dir / (e.case_id + ".nii.gz")).string();
    e.pet_path = e.ct_path;
    nifti_write(e.ct_path, v);
    m.entries.push_back(e);
  }
  const Spacing3 avg = compute_average_spacing(m);
  CHECK(avg[0] == Catch::Approx(2.0));
  CHECK(avg[1] == Catch::Approx(2.0));
  CHECK(avg[2] == Catch::Approx(2.0));

  Manifest single;
  single.entries.push_back(m.entries[1]);
  const Spacing3 one = compute_average_spacing(single);
  CHECK(one[0] == Catch::Approx(3.0));

  CHECK_THROWS_AS(compute_average_spacing(Manifest{}), ContractError);
}

namespace {

Case make_case(Shape3 sh, float ct_value, float pet_value) {
  return Case{"c", Volume::filled(VolumeKind::CT, sh, {1, 1, 1}, ct_value),
              Volume::filled(VolumeKind::PET, sh, {1, 1, 1}, pet_value), std::nullopt,
              Tracer::SYNTHETIC};
}

}  // namespace

TEST_CASE("ct normalization maps midpoint and saturates") {
  NormalizationScheme scheme;
  scheme.pet_mode = PetNormMode::NONE;
  {
    const Case c = make_case({4, 4, 4}, 0.0f, 1.0f);
    const Case n = normalize_case(c, scheme);
    for (float v : n.ct.data()) CHECK(v == Catch::Approx(0.0).margin(1e-7));
  }
  {
    const Case c = make_case({4, 4, 4}, 2000.0f, 1.0f);
    const Case n = normalize_case(c, scheme);
    for (float v : n.ct.data()) CHECK(v == Catch::Approx(1.0));
  }
  {
    const Case c = make_case({4, 4, 4}, -5000.0f, 1.0f);
    const Case n = normalize_case(c, scheme);
    for (float v : n.ct.data()) CHECK(v == Catch::Approx(-1.0));
  }
}

TEST_CASE("pet z-score over the ct foreground") {
  // Half the voxels are body (CT 40), half air (CT -1000). PET differs
  // between the halves; the z-score must use body voxels only.
  Shape3 sh{4, 4, 4};
  std::vector<float> ct(64), pet(64);
  Rng rng(5);
  for (int i = 0; i < 64; ++i) {
    ct[static_cast<size_t>(i)] = i < 32 ? 40.0f : -1000.0f;
    pet[static_cast<size_t>(i)] =
        i < 32 ? static_cast<float>(rng.uniform(1.0, 9.0)) : 0.0f;
  }
  const Case c{"c", Volume(VolumeKind::CT, sh, {1, 1, 1}, ct),
               Volume(VolumeKind::PET, sh, {1, 1, 1}, pet), std::nullopt, Tracer::SYNTHETIC};
  NormalizationScheme scheme;
  const Case n = normalize_case(c, scheme);
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < 32; ++i) {
    sum += n.pet.data()[static_cast<size_t>(i)];
    sum2 += static_cast<double>(n.pet.data()[static_cast<size_t>(i)]) *
            n.pet.data()[static_cast<size_t>(i)];
  }
  const double mean = sum / 32.0;
  const double stddev = std::sqrt(sum2 / 32.0 - mean * mean);
  CHECK(std::abs(mean) < 1e-5);
  CHECK(std::abs(stddev - 1.0) < 1e-5);
}

TEST_CASE("pet constant over foreground falls back and zeroes") {
  const Case c = make_case({4, 4, 4}, 40.0f, 3.5f);  // constant PET everywhere
  NormalizationScheme scheme;
  std::string warning;
  const Case n = normalize_case(c, scheme, &warning);
  for (float v : n.pet.data()) CHECK(v == 0.0f);
  CHECK_FALSE(warning.empty());
}

TEST_CASE("normalize_case requires a shared grid and keeps the label") {
  Case c = make_case({4, 4, 4}, 0.0f, 1.0f);
  c.label = Volume::filled(VolumeKind::MASK, {4, 4, 4}, {1, 1, 1}, 1.0f);
  NormalizationScheme scheme;
  const Case n = normalize_case(c, scheme);
  CHECK(n.label->data() == c.label->data());

  Case bad = c;
  bad.pet = Volume::zeros(VolumeKind::PET, {4, 4, 5}, {1, 1, 1});
  CHECK_THROWS_AS(normalize_case(bad, scheme), ContractError);
}

TEST_CASE("normalized ct lies exactly inside the output range") {
  Rng rng(77);
  std::vector<float> ct(512);
  for (auto& v : ct) v = static_cast<float>(rng.uniform(-3000, 3000));
  Case c{"c", Volume(VolumeKind::CT, {8, 8, 8}, {1, 1, 1}, ct),
         Volume::filled(VolumeKind::PET, {8, 8, 8}, {1, 1, 1}, 1.0f), std::nullopt,
         Tracer::SYNTHETIC};
  NormalizationScheme scheme;
  scheme.pet_mode = PetNormMode::NONE;
  const Case n = normalize_case(c, scheme);
  for (float v : n.ct.data()) {
    CHECK(v >= -1.0f);
    CHECK(v <= 1.0f);
  }
}
