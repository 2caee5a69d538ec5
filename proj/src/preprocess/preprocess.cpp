#include "lungrisk/preprocess.hpp"

#include <algorithm>
#include <cmath>

#include "lungrisk/errors.hpp"

namespace lungrisk {

Volume resample_isotropic(const Volume& v, Interpolation interp) {
  v.validate();
  if (v.spacing == Vec3{1.0, 1.0, 1.0}) return v;

  Index3 out_dims;
  for (int a = 0; a < 3; ++a)
    out_dims[a] = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(v.dims()[a] * v.spacing[a])));
  Volume out;
  out.spacing = {1.0, 1.0, 1.0};
  out.origin = v.origin;
  out.voxels = Grid3(out_dims, 0.0f);

  const Index3& d = v.dims();
  // Per-axis source positions, clamped to the sampled extent.
  std::array<std::vector<std::size_t>, 3> lo, hi;
  std::array<std::vector<double>, 3> frac;
  for (int a = 0; a < 3; ++a) {
    lo[a].resize(out_dims[a]);
    hi[a].resize(out_dims[a]);
    frac[a].resize(out_dims[a]);
    for (std::size_t i = 0; i < out_dims[a]; ++i) {
      double src = std::clamp(static_cast<double>(i) / v.spacing[a], 0.0, static_cast<double>(d[a] - 1));
      if (interp == Interpolation::Nearest) src = std::round(src);
      const auto l = static_cast<std::size_t>(std::floor(src));
      lo[a][i] = l;
      hi[a][i] = std::min(l + 1, d[a] - 1);
      frac[a][i] = src - static_cast<double>(l);
    }
  }
  for (std::size_t z = 0; z < out_dims[2]; ++z)
    for (std::size_t y = 0; y < out_dims[1]; ++y)
      for (std::size_t x = 0; x < out_dims[0]; ++x) {
        const double fx = frac[0][x], fy = frac[1][y], fz = frac[2][z];
        const std::size_t x0 = lo[0][x], x1 = hi[0][x], y0 = lo[1][y], y1 = hi[1][y], z0 = lo[2][z], z1 = hi[2][z];
        const Grid3& g = v.voxels;
        const double c00 = g.at(x0, y0, z0) * (1 - fx) + g.at(x1, y0, z0) * fx;
        const double c10 = g.at(x0, y1, z0) * (1 - fx) + g.at(x1, y1, z0) * fx;
        const double c01 = g.at(x0, y0, z1) * (1 - fx) + g.at(x1, y0, z1) * fx;
        const double c11 = g.at(x0, y1, z1) * (1 - fx) + g.at(x1, y1, z1) * fx;
        const double c0 = c00 * (1 - fy) + c10 * fy;
        const double c1 = c01 * (1 - fy) + c11 * fy;
        out.voxels.at(x, y, z) = static_cast<float>(c0 * (1 - fz) + c1 * fz);
      }
  return out;
}

Grid3 extract_cube(const Volume& v, const Vec3& center, std::size_t side) {
  v.validate();
  if (v.spacing != Vec3{1.0, 1.0, 1.0}) throw FormatError("extract_cube: volume must be resampled to 1 mm first");
  const Vec3 idx = v.world_to_voxel(center);
  std::array<long long, 3> start;
  for (int a = 0; a < 3; ++a) {
    if (!std::isfinite(idx[a])) throw OutOfBoundsError("extract_cube: non-finite nodule center");
    start[a] = std::llround(idx[a]) - static_cast<long long>(side / 2);
    const long long dim = static_cast<long long>(v.dims()[a]);
    if (start[a] + static_cast<long long>(side) <= 0 || start[a] >= dim)
      throw OutOfBoundsError("extract_cube: nodule center lies more than " + std::to_string(side / 2) +
                             " mm outside the volume");
  }
  Grid3 cube({side, side, side}, kAirHu);
  for (std::size_t z = 0; z < side; ++z) {
    const long long sz = start[2] + static_cast<long long>(z);
    if (sz < 0 || sz >= static_cast<long long>(v.dims()[2])) continue;
    for (std::size_t y = 0; y < side; ++y) {
      const long long sy = start[1] + static_cast<long long>(y);
      if (sy < 0 || sy >= static_cast<long long>(v.dims()[1])) continue;
      for (std::size_t x = 0; x < side; ++x) {
        const long long sx = start[0] + static_cast<long long>(x);
        if (sx < 0 || sx >= static_cast<long long>(v.dims()[0])) continue;
        cube.at(x, y, z) = v.voxels.at(static_cast<std::size_t>(sx), static_cast<std::size_t>(sy),
                                        static_cast<std::size_t>(sz));
      }
    }
  }
  return cube;
}

Index3 crop_offsets(Mode mode, Rng& rng) {
  constexpr int kMaxOffset = static_cast<int>(kCubeSide - kCropSide);
  if (mode == Mode::Infer) return {kMaxOffset / 2, kMaxOffset / 2, kMaxOffset / 2};
  Index3 o;
  for (auto& v : o) v = static_cast<std::size_t>(uniform_int(rng, 0, kMaxOffset));
  return o;
}

Grid3 crop_cube(const Grid3& cube, const Index3& offsets, std::size_t side) {
  for (int a = 0; a < 3; ++a)
    if (offsets[a] + side > cube.dims[a]) throw DimensionError("crop_cube: crop window exceeds the cube");
  Grid3 out({side, side, side}, 0.0f);
  for (std::size_t z = 0; z < side; ++z)
    for (std::size_t y = 0; y < side; ++y) {
      const float* src = &cube.values[cube.index(offsets[0], offsets[1] + y, offsets[2] + z)];
      std::copy(src, src + side, &out.values[out.index(0, y, z)]);
    }
  return out;
}

Grid3 crop28(const Grid3& cube, Mode mode, Rng& rng) {
  if (cube.dims != Index3{kCubeSide, kCubeSide, kCubeSide})
    throw DimensionError("crop28: expected a 32^3 cube");
  return crop_cube(cube, crop_offsets(mode, rng), kCropSide);
}

Tensor triplanar(const Grid3& cube, Projection projection) {
  const std::size_t n = cube.dims[0];
  if (cube.dims[1] != n || cube.dims[2] != n) throw DimensionError("triplanar: cube must be cubic");
  Tensor out({3, n, n});
  const std::size_t mid = n / 2;
  if (projection == Projection::CentralSlice) {
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c) {
        out.at(0, r, c) = cube.at(c, mid, r);
        out.at(1, r, c) = cube.at(mid, c, r);
        out.at(2, r, c) = cube.at(c, r, mid);
      }
    return out;
  }
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      float cor = -INFINITY, sag = -INFINITY, tra = -INFINITY;
      for (std::size_t k = 0; k < n; ++k) {
        cor = std::max(cor, cube.at(c, k, r));
        sag = std::max(sag, cube.at(k, c, r));
        tra = std::max(tra, cube.at(c, r, k));
      }
      out.at(0, r, c) = cor;
      out.at(1, r, c) = sag;
      out.at(2, r, c) = tra;
    }
  return out;
}

double normalize_hu(double hu) {
  const double clipped = std::clamp(hu, kHuWindowLow, kHuWindowHigh);
  return (clipped - kHuWindowLow) / (kHuWindowHigh - kHuWindowLow);
}

Tensor normalize_hu(const Tensor& hu) {
  Tensor out(hu.shape());
  for (std::size_t i = 0; i < hu.size(); ++i) out[i] = normalize_hu(hu[i]);
  return out;
}

std::vector<NoduleCandidate> select_top_nodules(const std::vector<NoduleCandidate>& candidates, std::size_t k) {
  std::vector<NoduleCandidate> sorted = candidates;
  std::stable_sort(sorted.begin(), sorted.end(), [](const NoduleCandidate& a, const NoduleCandidate& b) {
    if (a.radius_mm != b.radius_mm) return a.radius_mm > b.radius_mm;
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    return a.center < b.center;
  });
  if (sorted.size() > k) sorted.resize(k);
  return sorted;
}

std::vector<double> raw_metadata(const NoduleCandidate& c, std::size_t metadata_dim) {
  if (metadata_dim != 5 && metadata_dim != 6) throw ConfigError("metadata_dim must be 5 or 6");
  std::vector<double> m{c.radius_mm, c.center[0], c.center[1], c.center[2], c.confidence};
  if (metadata_dim == 6) {
    if (!c.sphericity) throw DataConsistencyError("metadata_dim 6 requires a sphericity value for every candidate");
    m.push_back(*c.sphericity);
  }
  return m;
}

std::vector<double> MetadataStats::standardize(const std::vector<double>& raw) const {
  if (raw.size() != mean.size())
    throw DimensionError("metadata has " + std::to_string(raw.size()) + " features, statistics expect " +
                         std::to_string(mean.size()));
  std::vector<double> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] - mean[i]) / stddev[i];
  return out;
}

MetadataStats compute_metadata_stats(const std::vector<std::vector<double>>& rows, std::size_t dim) {
  MetadataStats s;
  s.mean.assign(dim, 0.0);
  s.stddev.assign(dim, 1.0);
  if (rows.empty()) return s;
  const double n = static_cast<double>(rows.size());
  for (const auto& r : rows) {
    if (r.size() != dim) throw DimensionError("compute_metadata_stats: inconsistent feature count");
    for (std::size_t i = 0; i < dim; ++i) s.mean[i] += r[i];
  }
  for (double& m : s.mean) m /= n;
  std::vector<double> var(dim, 0.0);
  for (const auto& r : rows)
    for (std::size_t i = 0; i < dim; ++i) var[i] += (r[i] - s.mean[i]) * (r[i] - s.mean[i]);
  for (std::size_t i = 0; i < dim; ++i) {
    const double sd = std::sqrt(var[i] / n);
    s.stddev[i] = sd > 1e-12 ? sd : 1.0;  // constant feature: centre only
  }
  return s;
}

NodulePatch NodulePatch::masked_slot(std::size_t metadata_dim) {
  NodulePatch p;
  p.planes = Tensor({3, kCropSide, kCropSide});
  p.metadata.assign(metadata_dim, 0.0);
  p.masked = true;
  return p;
}

std::size_t ScanExample::unmasked_count() const {
  return static_cast<std::size_t>(std::count_if(patches.begin(), patches.end(), [](const NodulePatch& p) { return !p.masked; }));
}

PreparedScan prepare_scan(const std::string& scan_id, const Volume& v, const std::vector<NoduleCandidate>& candidates,
                          int label, const PreprocessOptions& options) {
  if (label != 0 && label != 1) throw DataConsistencyError("scan " + scan_id + ": label must be 0 or 1");
  PreparedScan out;
  out.scan_id = scan_id;
  out.label = label;
  const std::vector<NoduleCandidate> top = select_top_nodules(candidates, kMaxNodules);
  if (top.empty()) return out;
  const Volume iso = resample_isotropic(v, options.interpolation);
  for (const NoduleCandidate& c : top) {
    c.validate();
    out.nodules.push_back({extract_cube(iso, c.center, kCubeSide), raw_metadata(c, options.metadata_dim)});
  }
  return out;
}

ScanExample make_example(const PreparedScan& scan, Mode mode, Rng& rng, const MetadataStats& stats,
                         const PreprocessOptions& options) {
  if (stats.dim() != options.metadata_dim)
    throw DimensionError("metadata statistics have dimension " + std::to_string(stats.dim()) + ", expected " +
                         std::to_string(options.metadata_dim));
  ScanExample ex;
  ex.scan_id = scan.scan_id;
  ex.label = scan.label;
  ex.patches.reserve(kMaxNodules);
  for (std::size_t i = 0; i < scan.nodules.size() && i < kMaxNodules; ++i) {
    const PreparedNodule& n = scan.nodules[i];
    if (n.cube.dims != Index3{kCubeSide, kCubeSide, kCubeSide}) throw DimensionError("make_example: bad cube shape");
    NodulePatch p;
    const Grid3 crop = crop_cube(n.cube, crop_offsets(mode, rng), kCropSide);
    p.planes = normalize_hu(triplanar(crop, options.projection));
    p.metadata = stats.standardize(n.raw_metadata);
    p.masked = false;
    ex.patches.push_back(std::move(p));
  }
  while (ex.patches.size() < kMaxNodules) ex.patches.push_back(NodulePatch::masked_slot(options.metadata_dim));
  return ex;
}

ScanExample build_scan_example(const std::string& scan_id, const Volume& v,
                               const std::vector<NoduleCandidate>& candidates, int label, Mode mode, Rng& rng,
                               const MetadataStats& stats, const PreprocessOptions& options) {
  return make_example(prepare_scan(scan_id, v, candidates, label, options), mode, rng, stats, options);
}

MetadataStats metadata_stats_for(const std::vector<PreparedScan>& scans, std::size_t metadata_dim) {
  std::vector<std::vector<double>> rows;
  for (const PreparedScan& s : scans)
    for (const PreparedNodule& n : s.nodules) rows.push_back(n.raw_metadata);
  return compute_metadata_stats(rows, metadata_dim);
}

}  // namespace lungrisk
