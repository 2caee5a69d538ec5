#pragma once

// Synthetic chest-CT phantoms with a known nodule malignancy rule.
//
// Each nodule gets a diameter, spiculation flag, lobe and type. Its malignancy
// probability is
//
//   p = sigmoid(b0 + size_coef * (d - size_ref) + spic_coef * spiculated + upper_coef * upper_lobe)
//
// and a scan is positive when any of its nodules is malignant, so the scan's
// true risk is 1 - prod(1 - p_i). b0 is solved so the expected scan-level
// prevalence equals the requested one.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "lungrisk/candidates.hpp"
#include "lungrisk/pancan.hpp"
#include "lungrisk/volume.hpp"

namespace lungrisk {

struct PhantomSpec {
  std::size_t n_scans = 100;
  double prevalence = 0.2;
  Index3 dims{96, 96, 96};
  double spacing_mm = 1.0;
  int min_nodules = 1;
  int max_nodules = 4;
  double min_diameter_mm = 4.0;
  double max_diameter_mm = 22.0;
  double noise_sigma_hu = 30.0;
  std::uint64_t seed = 0;
  std::string id_prefix = "scan";

  double background_hu = -850.0;
  double nodule_hu = 50.0;
  double spiculation_probability = 0.25;
  double upper_lobe_probability = 0.5;
  double size_coef = 0.9;     // per mm
  double size_ref_mm = 10.0;
  double spic_coef = 2.0;
  double upper_coef = 0.8;

  // ConfigError on out-of-range values or a volume too small for the nodules.
  void validate() const;
  std::string to_text() const;
};

inline constexpr double kNoduleEdgeMarginMm = 16.0;

struct TruthNodule {
  Vec3 center{};                 // world mm
  double diameter_mm = 0.0;      // longest in-slice axis (x)
  Vec3 semi_axes{};              // mm
  bool spiculated = false;
  bool upper_lobe = false;
  NoduleType type = NoduleType::Solid;
  double malignancy_probability = 0.0;
  bool malignant = false;
};

struct PhantomScan {
  std::string scan_id;
  Volume volume;
  std::vector<TruthNodule> nodules;
  std::vector<NoduleCandidate> candidates;  // one per nodule, jittered
  std::vector<PanCanFeatures> pancan;       // one per nodule
  int label = 0;
  double risk = 0.0;                        // 1 - prod(1 - p_i)
};

double expected_prevalence(const PhantomSpec& spec, double intercept);
// Bisection on the intercept; NumericError if the target is unreachable.
double calibrate_intercept(const PhantomSpec& spec);

std::string phantom_scan_id(const PhantomSpec& spec, std::size_t index);
// Deterministic in (spec, index); `intercept` from calibrate_intercept.
PhantomScan generate_scan(const PhantomSpec& spec, std::size_t index, double intercept);

// PanCan weights that reproduce the generative per-nodule rule exactly.
PanCanWeights generative_pancan_weights(const PhantomSpec& spec, double intercept);

// Lung-RADS category from diameter: < 6 mm -> 2, < 8 mm -> 3, otherwise 4.
int lungrads_from_diameter(double diameter_mm);

// Dataset directory:
//   volumes/<scan_id>.lrvol  candidates.csv  labels.csv  pancan_features.csv
//   pancan_weights.txt  ground_truth_scans.csv  ground_truth_nodules.csv
//   manifest.txt (spec, counts, CRC-32 of every file)
struct DatasetSummary {
  std::size_t n_scans = 0;
  std::size_t positives = 0;
  std::size_t nodules = 0;
  double intercept = 0.0;
  std::string manifest;
  std::uint64_t manifest_hash = 0;  // FNV-1a of the manifest text
};

DatasetSummary write_dataset(const PhantomSpec& spec, const std::filesystem::path& out_dir, std::size_t threads = 1,
                             const std::function<void(std::size_t done)>& progress = {});

}  // namespace lungrisk
