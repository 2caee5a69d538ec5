#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <vector>

namespace lungrisk {

using Vec3 = std::array<double, 3>;
using Index3 = std::array<std::size_t, 3>;

// Scalar 3D grid, x fastest: index = x + nx * (y + ny * z).
struct Grid3 {
  Index3 dims{0, 0, 0};
  std::vector<float> values;

  Grid3() = default;
  Grid3(Index3 d, float fill);

  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const { return x + dims[0] * (y + dims[1] * z); }
  float& at(std::size_t x, std::size_t y, std::size_t z) { return values[index(x, y, z)]; }
  float at(std::size_t x, std::size_t y, std::size_t z) const { return values[index(x, y, z)]; }
  std::size_t size() const { return values.size(); }

  friend bool operator==(const Grid3&, const Grid3&) = default;
};

// CT volume in Hounsfield units. Axis order is (x, y, z); z grows toward the head.
struct Volume {
  Grid3 voxels;
  Vec3 spacing{1.0, 1.0, 1.0};  // mm per voxel
  Vec3 origin{0.0, 0.0, 0.0};   // world mm of voxel (0, 0, 0)

  const Index3& dims() const { return voxels.dims; }
  // Throws FormatError on non-positive spacing or empty dimensions.
  void validate() const;

  Vec3 voxel_to_world(const Vec3& index) const;
  Vec3 world_to_voxel(const Vec3& world) const;

  friend bool operator==(const Volume&, const Volume&) = default;
};

inline constexpr float kAirHu = -1000.0f;

// --- file formats ------------------------------------------------------------
//
// Compact binary (.lrvol), 72-byte little-endian header followed by int16 HU:
//   0  char[6] "LRVOL1"     6  u16 version (1)
//   8  i32 nx, ny, nz      20  u32 reserved (0)
//   24 f64 spacing x, y, z 48  f64 origin x, y, z
//   72 int16 voxels, x fastest
//
// MetaImage (.mhd + raw): text header with NDims, DimSize, ElementSpacing,
// Offset, ElementType (MET_SHORT or MET_FLOAT), ElementDataFile.

inline constexpr std::size_t kLrvolHeaderBytes = 72;

void write_lrvol(const std::filesystem::path& path, const Volume& v);
Volume read_lrvol(const std::filesystem::path& path);

enum class MetaElementType { Short, Float };
// Writes `path` (.mhd) and a sibling .raw file.
void write_metaimage(const std::filesystem::path& path, const Volume& v, MetaElementType type);
Volume read_metaimage(const std::filesystem::path& path);

// Dispatches on extension (.lrvol or .mhd).
Volume read_volume(const std::filesystem::path& path);

}  // namespace lungrisk
