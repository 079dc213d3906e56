#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "petseg/errors.hpp"
#include "petseg/nifti.hpp"
#include "petseg/rng.hpp"
#include "petseg/volume.hpp"

namespace petseg {

struct ManifestEntry {
  std::string case_id;
  std::string ct_path;
  std::string pet_path;
  std::optional<std::string> label_path;
  Tracer tracer = Tracer::SYNTHETIC;
  std::string dataset_version = "1.1";
  bool retracted = false;
  // Cached so the split rule "exclude empty labels" needn't load every label.
  std::optional<int64_t> lesion_voxel_count;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  std::string version = "1.1";

  void validate() const {
    std::set<std::string> ids;
    for (const auto& e : entries)
      if (!ids.insert(e.case_id).second)
        throw FormatError("manifest: duplicate case_id " + e.case_id);
  }
};

inline Tracer tracer_from_string(const std::string& s) {
  if (s == "FDG") return Tracer::FDG;
  if (s == "PSMA") return Tracer::PSMA;
  if (s == "SYNTHETIC") return Tracer::SYNTHETIC;
  throw FormatError("manifest: unknown tracer " + s);
}

inline Manifest manifest_from_json(const nlohmann::json& j, const std::string& base_dir) {
  Manifest m;
  m.version = j.value("version", std::string("1.1"));
  if (!j.contains("entries") || !j["entries"].is_array())
    throw FormatError("manifest: missing entries array");
  const auto resolve = [&base_dir](const std::string& p) {
    std::filesystem::path fp(p);
    if (fp.is_absolute() || base_dir.empty()) return p;
    return (std::filesystem::path(base_dir) / fp).string();
  };
  for (const auto& je : j["entries"]) {
    ManifestEntry e;
    e.case_id = je.at("case_id").get<std::string>();
    e.ct_path = resolve(je.at("ct_path").get<std::string>());
    e.pet_path = resolve(je.at("pet_path").get<std::string>());
    if (je.contains("label_path") && !je["label_path"].is_null())
      e.label_path = resolve(je["label_path"].get<std::string>());
    e.tracer = tracer_from_string(je.value("tracer", std::string("SYNTHETIC")));
    e.dataset_version = je.value("dataset_version", std::string("1.1"));
    e.retracted = je.value("retracted", false);
    if (je.contains("lesion_voxel_count") && !je["lesion_voxel_count"].is_null())
      e.lesion_voxel_count = je["lesion_voxel_count"].get<int64_t>();
    m.entries.push_back(std::move(e));
  }
  m.validate();
  return m;
}

inline nlohmann::json manifest_to_json(const Manifest& m) {
  nlohmann::json j;
  j["version"] = m.version;
  j["entries"] = nlohmann::json::array();
  for (const auto& e : m.entries) {
    nlohmann::json je;
    je["case_id"] = e.case_id;
    je["ct_path"] = e.ct_path;
    je["pet_path"] = e.pet_path;
    if (e.label_path) je["label_path"] = *e.label_path;
    je["tracer"] = to_string(e.tracer);
    je["dataset_version"] = e.dataset_version;
    je["retracted"] = e.retracted;
    if (e.lesion_voxel_count) je["lesion_voxel_count"] = *e.lesion_voxel_count;
    j["entries"].push_back(std::move(je));
  }
  return j;
}

inline Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("manifest: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest: bad JSON in " + path + ": " + e.what());
  }
  try {
    return manifest_from_json(j, std::filesystem::path(path).parent_path().string());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest: missing field in " + path + ": " + e.what());
  }
}

inline void save_manifest(const Manifest& m, const std::string& path) {
  const auto dir = std::filesystem::path(path).parent_path();
  if (!dir.empty()) std::filesystem::create_directories(dir);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw IoError("manifest: cannot write " + tmp);
    out << manifest_to_json(m).dump(2) << "\n";
  }
  std::filesystem::rename(tmp, path);
}

// Loads a case in canonical orientation. No resampling happens here.
inline Case load_case(const ManifestEntry& entry) {
  Volume ct = nifti_read(entry.ct_path, VolumeKind::CT);
  Volume pet = nifti_read(entry.pet_path, VolumeKind::PET);
  std::optional<Volume> label;
  if (entry.label_path) label = nifti_read(*entry.label_path, VolumeKind::MASK);
  return Case{entry.case_id, std::move(ct), std::move(pet), std::move(label), entry.tracer};
}

inline void save_mask(const Volume& mask, const Volume& grid_reference, const std::string& path) {
  if (mask.kind() != VolumeKind::MASK)
    throw ContractError("save_mask: volume kind must be MASK");
  if (!mask.same_grid(grid_reference))
    throw ContractError("save_mask: mask grid does not match reference grid");
  nifti_write(path, mask);
}

// 80/20-style split with the exclusion rules applied first: retracted entries
// and entries with an absent or empty label never reach either side. Entries
// without a cached lesion_voxel_count get their label loaded and counted.
inline std::pair<Manifest, Manifest> split_manifest(const Manifest& manifest, double ratio,
                                                    uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0))
    throw ContractError("split_manifest: ratio must lie in (0,1)");
  manifest.validate();

  std::vector<ManifestEntry> eligible;
  for (const auto& e : manifest.entries) {
    if (e.retracted) continue;
    if (!e.label_path) continue;
    int64_t lesion_voxels;
    if (e.lesion_voxel_count) {
      lesion_voxels = *e.lesion_voxel_count;
    } else {
      const Volume label = nifti_read(*e.label_path, VolumeKind::MASK);
      lesion_voxels = 0;
      for (float v : label.data()) lesion_voxels += (v != 0.0f);
    }
    if (lesion_voxels <= 0) continue;  // healthy case
    ManifestEntry copy = e;
    copy.lesion_voxel_count = lesion_voxels;
    eligible.push_back(std::move(copy));
  }
  if (eligible.empty())
    throw ContractError("split_manifest: no eligible entries after exclusions");

  Rng rng(seed);
  rng.shuffle(eligible);
  const size_t n_train = static_cast<size_t>(ratio * static_cast<double>(eligible.size()));

  Manifest train, val;
  train.version = manifest.version;
  val.version = manifest.version;
  for (size_t i = 0; i < eligible.size(); ++i)
    (i < n_train ? train : val).entries.push_back(eligible[i]);
  return {std::move(train), std::move(val)};
}

}  // namespace petseg
