#pragma once

// Volume + detector candidates -> fixed-shape network input.
//
//   resample to 1 mm -> pick the 10 largest candidates -> 32^3 cube per nodule
//   -> 28^3 crop (random in training, centered otherwise) -> three orthogonal
//   planes -> HU window to [0, 1]; metadata standardized with training stats.

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "lungrisk/candidates.hpp"
#include "lungrisk/ops.hpp"
#include "lungrisk/rng.hpp"
#include "lungrisk/tensor.hpp"
#include "lungrisk/volume.hpp"

namespace lungrisk {

inline constexpr std::size_t kCubeSide = 32;
inline constexpr std::size_t kCropSide = 28;
inline constexpr std::size_t kMaxNodules = 10;
inline constexpr double kHuWindowLow = -1000.0;
inline constexpr double kHuWindowHigh = 400.0;

enum class Interpolation { Trilinear, Nearest };
enum class Projection { CentralSlice, MaxIntensity };

struct PreprocessOptions {
  Interpolation interpolation = Interpolation::Trilinear;
  Projection projection = Projection::CentralSlice;
  std::size_t metadata_dim = 5;  // 5, or 6 with sphericity
};

Volume resample_isotropic(const Volume& v, Interpolation interp = Interpolation::Trilinear);

// 32^3 block centred on the voxel nearest `center`; voxels outside the volume
// are air. Throws OutOfBoundsError when the block misses the volume entirely.
Grid3 extract_cube(const Volume& v, const Vec3& center, std::size_t side = kCubeSide);

Index3 crop_offsets(Mode mode, Rng& rng);
Grid3 crop_cube(const Grid3& cube, const Index3& offsets, std::size_t side = kCropSide);
Grid3 crop28(const Grid3& cube, Mode mode, Rng& rng);

// Channels: coronal (fixed y), sagittal (fixed x), transverse (fixed z).
// Plane element [r][c]: coronal (x=c, z=r), sagittal (y=c, z=r), transverse (x=c, y=r).
Tensor triplanar(const Grid3& cube, Projection projection = Projection::CentralSlice);

double normalize_hu(double hu);
Tensor normalize_hu(const Tensor& hu);

// Largest radius first; ties by confidence (desc), then center (x, y, z) ascending.
std::vector<NoduleCandidate> select_top_nodules(const std::vector<NoduleCandidate>& candidates,
                                                std::size_t k = kMaxNodules);

// (radius_mm, x, y, z, confidence[, sphericity])
std::vector<double> raw_metadata(const NoduleCandidate& c, std::size_t metadata_dim);

struct MetadataStats {
  std::vector<double> mean;
  std::vector<double> stddev;

  std::size_t dim() const { return mean.size(); }
  std::vector<double> standardize(const std::vector<double>& raw) const;
  friend bool operator==(const MetadataStats&, const MetadataStats&) = default;
};
MetadataStats compute_metadata_stats(const std::vector<std::vector<double>>& rows, std::size_t dim);

struct NodulePatch {
  Tensor planes;                  // 3 x 28 x 28, values in [0, 1]
  std::vector<double> metadata;   // standardized
  bool masked = true;

  static NodulePatch masked_slot(std::size_t metadata_dim);
  friend bool operator==(const NodulePatch&, const NodulePatch&) = default;
};

struct ScanExample {
  std::string scan_id;
  std::vector<NodulePatch> patches;  // exactly kMaxNodules, unmasked first
  int label = 0;

  std::size_t unmasked_count() const;
  bool no_nodules() const { return unmasked_count() == 0; }
  friend bool operator==(const ScanExample&, const ScanExample&) = default;
};

// Cubes kept around so training can draw a fresh crop every iteration.
struct PreparedNodule {
  Grid3 cube;                         // 32^3 HU
  std::vector<double> raw_metadata;
};

struct PreparedScan {
  std::string scan_id;
  int label = 0;
  std::vector<PreparedNodule> nodules;  // at most kMaxNodules, radius-descending
};

PreparedScan prepare_scan(const std::string& scan_id, const Volume& v, const std::vector<NoduleCandidate>& candidates,
                          int label, const PreprocessOptions& options = {});

ScanExample make_example(const PreparedScan& scan, Mode mode, Rng& rng, const MetadataStats& stats,
                         const PreprocessOptions& options = {});

ScanExample build_scan_example(const std::string& scan_id, const Volume& v,
                               const std::vector<NoduleCandidate>& candidates, int label, Mode mode, Rng& rng,
                               const MetadataStats& stats, const PreprocessOptions& options = {});

// Stats over every nodule of every scan.
MetadataStats metadata_stats_for(const std::vector<PreparedScan>& scans, std::size_t metadata_dim);

}  // namespace lungrisk
