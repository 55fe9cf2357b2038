#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dgsan/tensor.hpp"

namespace dgsan::data {

inline constexpr int kDepth = 16;
inline constexpr int kHeight = 64;
inline constexpr int kWidth = 64;
inline constexpr int64_t kVoxels = int64_t{kDepth} * kHeight * kWidth;
inline constexpr int kClinicalDim = 6;

// Clinical vector slots: [age_z, sex, smoking_z, outcome_bit0, outcome_bit1,
// diameter_z]. The screening outcome code (0..3) is encoded as two bits.
struct ClinicalRecord {
  double age = 0.0;       // years
  int sex = 0;            // {0,1}
  double smoking = 0.0;   // pack-years
  int screening_outcome = 0;  // categorical code 0..3
  double diameter = 0.0;  // mm
  struct Mask {
    bool age = false, sex = false, smoking = false, screening_outcome = false, diameter = false;
  } present;
  bool any_present() const {
    return present.age || present.sex || present.smoking || present.screening_outcome ||
           present.diameter;
  }
};

struct NormStats {
  double age_mean = 0, age_std = 1;
  double smoking_mean = 0, smoking_std = 1;
  double diameter_mean = 0, diameter_std = 1;
};

struct VolumePair {
  Tensor t0, t1;  // [16,64,64], normalized to [0,1]
};

struct CaseMeta {
  std::string id;
  std::string t0_path, t1_path;  // relative to the manifest directory
  ClinicalRecord clinical;
  int label = 0;  // 0 benign, 1 malignant
};

struct Case {
  std::string id;
  VolumePair volumes;
  ClinicalRecord clinical;
  int label = 0;
};

struct DatasetManifest {
  std::filesystem::path base_dir;
  std::vector<CaseMeta> cases;
  NormStats stats;

  const CaseMeta& find(const std::string& id) const;
};

struct FoldSplit {
  int k = 0;
  std::map<std::string, int> assignments;
};

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

// Materializes one case; volume intensities min-max normalized per volume
// (constant volumes map to all zeros).
Case load_case(const DatasetManifest& m, const std::string& id);

// Procedural longitudinal-nodule generator standing in for the restricted
// clinical data. Deterministic given seed; labels balanced within 1.
DatasetManifest synthesize_dataset(int n_cases, uint64_t seed, const std::filesystem::path& out_dir);

Tensor normalize_clinical(const ClinicalRecord& rec, const NormStats& stats);  // [1,6]

FoldSplit split_folds(const DatasetManifest& m, int k, uint64_t seed);

// Raw volume file I/O (little-endian float32, row-major (depth,height,width)).
Tensor read_volume(const std::filesystem::path& path);
void write_volume(const std::filesystem::path& path, const Tensor& vol);
Tensor minmax_normalize(Tensor vol);

}  // namespace dgsan::data
