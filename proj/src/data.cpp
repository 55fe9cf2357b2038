#include "dgsan/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "dgsan/params.hpp"  // file helpers

namespace dgsan::data {

namespace fs = std::filesystem;
using nlohmann::json;

const CaseMeta& DatasetManifest::find(const std::string& id) const {
  for (const auto& c : cases)
    if (c.id == id) return c;
  throw std::runtime_error("unknown case id: " + id);
}

namespace {

json clinical_to_json(const ClinicalRecord& r) {
  return json{{"age", r.age},
              {"sex", r.sex},
              {"smoking", r.smoking},
              {"screening_outcome", r.screening_outcome},
              {"diameter", r.diameter},
              {"present_mask",
               {{"age", r.present.age},
                {"sex", r.present.sex},
                {"smoking", r.present.smoking},
                {"screening_outcome", r.present.screening_outcome},
                {"diameter", r.present.diameter}}}};
}

ClinicalRecord clinical_from_json(const json& j, const std::string& case_id) {
  auto need = [&](const char* field) -> const json& {
    if (!j.contains(field))
      throw std::runtime_error("manifest schema violation: case " + case_id +
                               " clinical record missing field '" + field + "'");
    return j.at(field);
  };
  ClinicalRecord r;
  const json& mask = need("present_mask");
  auto mask_bit = [&](const char* field) -> bool {
    if (!mask.contains(field))
      throw std::runtime_error("manifest schema violation: case " + case_id +
                               " present_mask missing field '" + field + "'");
    return mask.at(field).get<bool>();
  };
  r.present.age = mask_bit("age");
  r.present.sex = mask_bit("sex");
  r.present.smoking = mask_bit("smoking");
  r.present.screening_outcome = mask_bit("screening_outcome");
  r.present.diameter = mask_bit("diameter");
  if (r.present.age) r.age = need("age").get<double>();
  if (r.present.sex) r.sex = need("sex").get<int>();
  if (r.present.smoking) r.smoking = need("smoking").get<double>();
  if (r.present.screening_outcome) r.screening_outcome = need("screening_outcome").get<int>();
  if (r.present.diameter) r.diameter = need("diameter").get<double>();
  if (!r.any_present())
    throw std::runtime_error("manifest schema violation: case " + case_id +
                             " has no present clinical field");
  if (r.age < 0 || r.smoking < 0 || r.diameter < 0)
    throw std::runtime_error("manifest schema violation: case " + case_id +
                             " has a negative clinical value");
  if (r.sex != 0 && r.sex != 1)
    throw std::runtime_error("manifest schema violation: case " + case_id + " field 'sex' not in {0,1}");
  return r;
}

}  // namespace

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("manifest file not found: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("manifest parse error in " + path.string() + ": " + e.what());
  }
  if (!j.contains("cases")) throw std::runtime_error("manifest schema violation: missing field 'cases'");
  DatasetManifest m;
  m.base_dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
  if (j.contains("normalization_stats")) {
    const json& s = j["normalization_stats"];
    auto pick = [&](const char* f, double& mean, double& std) {
      if (s.contains(f)) {
        mean = s[f].value("mean", 0.0);
        std = s[f].value("std", 1.0);
      }
    };
    pick("age", m.stats.age_mean, m.stats.age_std);
    pick("smoking", m.stats.smoking_mean, m.stats.smoking_std);
    pick("diameter", m.stats.diameter_mean, m.stats.diameter_std);
  }
  std::set<std::string> seen;
  for (const auto& cj : j["cases"]) {
    CaseMeta c;
    auto need = [&](const char* field) -> const json& {
      if (!cj.contains(field))
        throw std::runtime_error(std::string("manifest schema violation: case entry missing field '") +
                                 field + "'");
      return cj.at(field);
    };
    c.id = need("id").get<std::string>();
    if (!seen.insert(c.id).second)
      throw std::runtime_error("manifest schema violation: duplicate case id " + c.id);
    c.t0_path = need("t0_path").get<std::string>();
    c.t1_path = need("t1_path").get<std::string>();
    c.clinical = clinical_from_json(need("clinical"), c.id);
    c.label = need("label").get<int>();
    if (c.label != 0 && c.label != 1)
      throw std::runtime_error("manifest schema violation: case " + c.id + " label not in {0,1}");
    for (const std::string& rel : {c.t0_path, c.t1_path}) {
      const fs::path vp = m.base_dir / rel;
      std::error_code ec;
      const auto sz = fs::file_size(vp, ec);
      if (ec) throw std::runtime_error("dangling volume path for case " + c.id + ": " + vp.string());
      if (sz != static_cast<uintmax_t>(kVoxels) * sizeof(float))
        throw std::runtime_error("volume shape error for case " + c.id + ": " + vp.string() +
                                 " holds " + std::to_string(sz / sizeof(float)) +
                                 " float32 values, expected " + std::to_string(kVoxels) +
                                 " (16x64x64)");
    }
    m.cases.push_back(std::move(c));
  }
  return m;
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
  json j;
  j["cases"] = json::array();
  for (const auto& c : m.cases)
    j["cases"].push_back({{"id", c.id},
                          {"t0_path", c.t0_path},
                          {"t1_path", c.t1_path},
                          {"clinical", clinical_to_json(c.clinical)},
                          {"label", c.label}});
  j["normalization_stats"] = {
      {"age", {{"mean", m.stats.age_mean}, {"std", m.stats.age_std}}},
      {"smoking", {{"mean", m.stats.smoking_mean}, {"std", m.stats.smoking_std}}},
      {"diameter", {{"mean", m.stats.diameter_mean}, {"std", m.stats.diameter_std}}}};
  write_file_atomic(path, j.dump(2) + "\n");
}

Tensor read_volume(const fs::path& path) {
  auto vals = read_f32_file(path);
  if (static_cast<int64_t>(vals.size()) != kVoxels)
    throw std::runtime_error("volume file " + path.string() + " holds " +
                             std::to_string(vals.size()) + " values, expected " +
                             std::to_string(kVoxels));
  return Tensor::from({kDepth, kHeight, kWidth}, std::move(vals));
}

void write_volume(const fs::path& path, const Tensor& vol) {
  check_shape(vol, {kDepth, kHeight, kWidth}, "write_volume");
  write_f32_file(path, vol.data);
}

Tensor minmax_normalize(Tensor vol) {
  double lo = vol.data[0], hi = vol.data[0];
  for (double v : vol.data) {
    if (!std::isfinite(v)) throw std::runtime_error("volume contains a non-finite value");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi == lo) {
    std::fill(vol.data.begin(), vol.data.end(), 0.0);
    return vol;
  }
  const double inv = 1.0 / (hi - lo);
  for (auto& v : vol.data) v = (v - lo) * inv;
  return vol;
}

Case load_case(const DatasetManifest& m, const std::string& id) {
  const CaseMeta& meta = m.find(id);
  Case c;
  c.id = meta.id;
  c.clinical = meta.clinical;
  c.label = meta.label;
  c.volumes.t0 = minmax_normalize(read_volume(m.base_dir / meta.t0_path));
  c.volumes.t1 = minmax_normalize(read_volume(m.base_dir / meta.t1_path));
  return c;
}

Tensor normalize_clinical(const ClinicalRecord& rec, const NormStats& stats) {
  Tensor v({1, kClinicalDim});
  auto z = [](double x, double mean, double std) { return std > 0.0 ? (x - mean) / std : 0.0; };
  if (rec.present.age) v[0] = z(rec.age, stats.age_mean, stats.age_std);
  if (rec.present.sex) v[1] = rec.sex;
  if (rec.present.smoking) v[2] = z(rec.smoking, stats.smoking_mean, stats.smoking_std);
  if (rec.present.screening_outcome) {
    v[3] = rec.screening_outcome & 1;
    v[4] = (rec.screening_outcome >> 1) & 1;
  }
  if (rec.present.diameter) v[5] = z(rec.diameter, stats.diameter_mean, stats.diameter_std);
  return v;
}

namespace {

struct Lobe {
  double d, h, w;  // unit direction
  double weight;
};

// Radial boundary perturbation in [0,1]: a few smooth lobes, spiky enough to
// read as spiculation once scaled by the amplitude.
double lobe_profile(const std::vector<Lobe>& lobes, double ud, double uh, double uw) {
  double acc = 0.0, wsum = 0.0;
  for (const auto& l : lobes) {
    const double dot = ud * l.d + uh * l.h + uw * l.w;
    if (dot > 0.0) acc += l.weight * dot * dot * dot * dot;
    wsum += l.weight;
  }
  return wsum > 0.0 ? acc / wsum : 0.0;
}

Tensor render_nodule(double cd, double ch, double cw, double ad, double ah, double aw,
                     double amp_rel, const std::vector<Lobe>& lobes, std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, 0.05);
  Tensor vol({kDepth, kHeight, kWidth});
  int64_t i = 0;
  for (int d = 0; d < kDepth; ++d)
    for (int h = 0; h < kHeight; ++h)
      for (int w = 0; w < kWidth; ++w, ++i) {
        const double ed = (d - cd) / ad, eh = (h - ch) / ah, ew = (w - cw) / aw;
        const double rho = std::sqrt(ed * ed + eh * eh + ew * ew);
        double boundary = 1.0;
        if (rho > 1e-12 && amp_rel > 0.0)
          boundary += amp_rel * lobe_profile(lobes, ed / rho, eh / rho, ew / rho);
        const double edge = std::clamp((boundary - rho) / 0.15, 0.0, 1.0);
        const double v = 0.15 + 0.75 * edge + noise(rng);
        // quantize to float so the on-disk format round-trips bit-exactly
        vol[i] = static_cast<double>(static_cast<float>(v));
      }
  return vol;
}

}  // namespace

DatasetManifest synthesize_dataset(int n_cases, uint64_t seed, const fs::path& out_dir) {
  if (n_cases < 2) throw std::invalid_argument("synthesize_dataset: n_cases must be >= 2");
  std::error_code ec;
  fs::create_directories(out_dir / "vols", ec);
  if (ec || !fs::is_directory(out_dir / "vols"))
    throw std::runtime_error("synthesize_dataset: cannot create output directory " +
                             (out_dir / "vols").string());

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  auto urange = [&](double a, double b) { return a + (b - a) * uni(rng); };
  std::normal_distribution<double> stdnorm(0.0, 1.0);

  DatasetManifest m;
  m.base_dir = out_dir;
  for (int i = 0; i < n_cases; ++i) {
    CaseMeta c;
    c.id = "case_" + std::to_string(i);
    c.label = i % 2;  // balanced within 1
    const bool malignant = c.label == 1;

    const double cd = urange(6.0, 10.0);
    const double ch = urange(24.0, 40.0), cw = urange(24.0, 40.0);
    const double r0 = urange(6.0, 10.0);
    const double ad0 = r0 * 0.28;
    const double growth = malignant ? urange(1.20, 1.40) : urange(0.96, 1.04);
    const double r1 = r0 * growth;
    const double amp0 = malignant ? urange(0.0, 0.05) : urange(0.0, 0.05);
    const double amp1 = malignant ? urange(0.22, 0.35) : urange(0.0, 0.05);

    std::vector<Lobe> lobes;
    for (int l = 0; l < 6; ++l) {
      double ld = stdnorm(rng), lh = stdnorm(rng), lw = stdnorm(rng);
      const double n = std::sqrt(ld * ld + lh * lh + lw * lw) + 1e-12;
      lobes.push_back({ld / n, lh / n, lw / n, urange(0.5, 1.0)});
    }

    Tensor v0 = render_nodule(cd, ch, cw, ad0, r0, r0, amp0, lobes, rng);
    Tensor v1 = render_nodule(cd, ch, cw, r1 * 0.28, r1, r1, amp1, lobes, rng);
    c.t0_path = "vols/" + c.id + "_t0.f32";
    c.t1_path = "vols/" + c.id + "_t1.f32";
    write_volume(out_dir / c.t0_path, v0);
    write_volume(out_dir / c.t1_path, v1);

    ClinicalRecord& r = c.clinical;
    r.present = {true, true, true, true, true};
    r.age = std::clamp(malignant ? 68.0 + 6.0 * stdnorm(rng) : 58.0 + 6.0 * stdnorm(rng), 30.0, 92.0);
    r.sex = uni(rng) < 0.5 ? 0 : 1;
    r.smoking = std::max(0.0, malignant ? 45.0 + 12.0 * stdnorm(rng) : 22.0 + 10.0 * stdnorm(rng));
    r.screening_outcome = malignant ? (uni(rng) < 0.5 ? 1 : 2) : (uni(rng) < 0.5 ? 0 : 1);
    r.diameter = 2.0 * r1;
    m.cases.push_back(std::move(c));
  }

  // normalization stats over the generated (training) cases
  auto fit = [&](auto getter, double& mean, double& std) {
    double s = 0, s2 = 0;
    for (const auto& c : m.cases) s += getter(c);
    mean = s / m.cases.size();
    for (const auto& c : m.cases) {
      const double d = getter(c) - mean;
      s2 += d * d;
    }
    std = std::sqrt(s2 / m.cases.size());
  };
  fit([](const CaseMeta& c) { return c.clinical.age; }, m.stats.age_mean, m.stats.age_std);
  fit([](const CaseMeta& c) { return c.clinical.smoking; }, m.stats.smoking_mean,
      m.stats.smoking_std);
  fit([](const CaseMeta& c) { return c.clinical.diameter; }, m.stats.diameter_mean,
      m.stats.diameter_std);

  save_manifest(m, out_dir / "manifest.json");
  return m;
}

FoldSplit split_folds(const DatasetManifest& m, int k, uint64_t seed) {
  if (k < 2) throw std::invalid_argument("split_folds: k must be >= 2");
  if (static_cast<int>(m.cases.size()) < k)
    throw std::invalid_argument("split_folds: k exceeds case count");
  std::vector<std::string> by_label[2];
  for (const auto& c : m.cases) by_label[c.label].push_back(c.id);
  std::mt19937_64 rng(seed);
  FoldSplit split;
  split.k = k;
  // Continuous round-robin across the label groups keeps both the per-label
  // and total fold sizes within 1.
  int fold = 0;
  for (auto& group : by_label) {
    std::shuffle(group.begin(), group.end(), rng);
    for (const auto& id : group) {
      split.assignments[id] = fold;
      fold = (fold + 1) % k;
    }
  }
  return split;
}

}  // namespace dgsan::data
