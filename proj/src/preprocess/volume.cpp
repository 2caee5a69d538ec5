#include "lungrisk/volume.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "lungrisk/byte_io.hpp"
#include "lungrisk/csv.hpp"
#include "lungrisk/errors.hpp"

namespace lungrisk {

Grid3::Grid3(Index3 d, float fill) : dims(d), values(d[0] * d[1] * d[2], fill) {}

void Volume::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
      throw FormatError("volume spacing must be strictly positive on every axis");
    if (voxels.dims[a] == 0) throw FormatError("volume dimensions must be at least 1 on every axis");
  }
  if (voxels.values.size() != voxels.dims[0] * voxels.dims[1] * voxels.dims[2])
    throw FormatError("volume voxel count does not match its dimensions");
}

Vec3 Volume::voxel_to_world(const Vec3& index) const {
  return {origin[0] + index[0] * spacing[0], origin[1] + index[1] * spacing[1], origin[2] + index[2] * spacing[2]};
}

Vec3 Volume::world_to_voxel(const Vec3& world) const {
  return {(world[0] - origin[0]) / spacing[0], (world[1] - origin[1]) / spacing[1],
          (world[2] - origin[2]) / spacing[2]};
}

namespace {

std::int16_t to_hu16(float v) {
  const float r = std::nearbyint(std::clamp(v, -32768.0f, 32767.0f));
  return static_cast<std::int16_t>(r);
}

}  // namespace

void write_lrvol(const std::filesystem::path& path, const Volume& v) {
  v.validate();
  std::vector<unsigned char> out;
  out.reserve(kLrvolHeaderBytes + 2 * v.voxels.size());
  bytes::put_bytes(out, "LRVOL1");
  bytes::put_le<std::uint16_t>(out, 1);
  for (int a = 0; a < 3; ++a) bytes::put_le<std::int32_t>(out, static_cast<std::int32_t>(v.dims()[a]));
  bytes::put_le<std::uint32_t>(out, 0);
  for (int a = 0; a < 3; ++a) bytes::put_le<double>(out, v.spacing[a]);
  for (int a = 0; a < 3; ++a) bytes::put_le<double>(out, v.origin[a]);
  for (float f : v.voxels.values) bytes::put_le<std::int16_t>(out, to_hu16(f));
  write_file_bytes(path, out);
}

Volume read_lrvol(const std::filesystem::path& path) {
  const std::vector<unsigned char> buf = read_file_bytes(path);
  if (buf.size() < kLrvolHeaderBytes) throw FormatError(path.string() + ": truncated LRVOL1 header");
  if (std::string(buf.begin(), buf.begin() + 6) != "LRVOL1") throw FormatError(path.string() + ": bad magic");
  const auto version = bytes::get_le<std::uint16_t>(&buf[6]);
  if (version != 1) throw FormatError(path.string() + ": unsupported LRVOL version " + std::to_string(version));
  Volume v;
  Index3 dims;
  for (int a = 0; a < 3; ++a) {
    const auto d = bytes::get_le<std::int32_t>(&buf[8 + 4 * a]);
    if (d <= 0) throw FormatError(path.string() + ": non-positive dimension");
    dims[a] = static_cast<std::size_t>(d);
  }
  for (int a = 0; a < 3; ++a) v.spacing[a] = bytes::get_le<double>(&buf[24 + 8 * a]);
  for (int a = 0; a < 3; ++a) v.origin[a] = bytes::get_le<double>(&buf[48 + 8 * a]);
  const std::size_t n = dims[0] * dims[1] * dims[2];
  if (buf.size() != kLrvolHeaderBytes + 2 * n)
    throw FormatError(path.string() + ": voxel payload size does not match header dimensions");
  v.voxels = Grid3(dims, 0.0f);
  for (std::size_t i = 0; i < n; ++i)
    v.voxels.values[i] = static_cast<float>(bytes::get_le<std::int16_t>(&buf[kLrvolHeaderBytes + 2 * i]));
  v.validate();
  return v;
}

void write_metaimage(const std::filesystem::path& path, const Volume& v, MetaElementType type) {
  v.validate();
  std::filesystem::path raw = path;
  raw.replace_extension(".raw");
  std::ostringstream h;
  h << "ObjectType = Image\nNDims = 3\n";
  h << "DimSize = " << v.dims()[0] << ' ' << v.dims()[1] << ' ' << v.dims()[2] << '\n';
  h << "ElementSpacing = " << format_double(v.spacing[0]) << ' ' << format_double(v.spacing[1]) << ' '
    << format_double(v.spacing[2]) << '\n';
  h << "Offset = " << format_double(v.origin[0]) << ' ' << format_double(v.origin[1]) << ' '
    << format_double(v.origin[2]) << '\n';
  h << "ElementType = " << (type == MetaElementType::Short ? "MET_SHORT" : "MET_FLOAT") << '\n';
  h << "ElementByteOrderMSB = False\n";
  h << "ElementDataFile = " << raw.filename().string() << '\n';
  write_text_file(path, h.str());

  std::vector<unsigned char> out;
  out.reserve(v.voxels.size() * (type == MetaElementType::Short ? 2 : 4));
  for (float f : v.voxels.values) {
    if (type == MetaElementType::Short) bytes::put_le<std::int16_t>(out, to_hu16(f));
    else bytes::put_le<float>(out, f);
  }
  write_file_bytes(raw, out);
}

Volume read_metaimage(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::map<std::string, std::string> keys;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    keys[std::string(trim(std::string_view(line).substr(0, eq)))] = std::string(trim(std::string_view(line).substr(eq + 1)));
  }
  auto need = [&](const std::string& k) -> const std::string& {
    auto it = keys.find(k);
    if (it == keys.end()) throw FormatError(path.string() + ": missing MetaImage key " + k);
    return it->second;
  };
  auto triple = [&](const std::string& k) {
    std::istringstream is(need(k));
    Vec3 out{};
    std::string tok;
    for (int a = 0; a < 3; ++a) {
      if (!(is >> tok)) throw FormatError(path.string() + ": " + k + " needs three values");
      out[a] = parse_double(tok, path.string() + " " + k);
    }
    return out;
  };
  if (need("NDims") != "3") throw FormatError(path.string() + ": only 3D MetaImage volumes are supported");
  if (keys.count("ElementByteOrderMSB") && keys["ElementByteOrderMSB"] == "True")
    throw FormatError(path.string() + ": big-endian MetaImage data is not supported");

  Volume v;
  const Vec3 dimsd = triple("DimSize");
  Index3 dims;
  for (int a = 0; a < 3; ++a) {
    if (dimsd[a] < 1 || dimsd[a] != std::floor(dimsd[a])) throw FormatError(path.string() + ": bad DimSize");
    dims[a] = static_cast<std::size_t>(dimsd[a]);
  }
  v.spacing = keys.count("ElementSpacing") ? triple("ElementSpacing") : Vec3{1, 1, 1};
  v.origin = keys.count("Offset") ? triple("Offset") : Vec3{0, 0, 0};
  const std::string& type = need("ElementType");
  std::size_t width;
  if (type == "MET_SHORT") width = 2;
  else if (type == "MET_FLOAT") width = 4;
  else throw FormatError(path.string() + ": unsupported ElementType " + type);

  const std::filesystem::path raw = path.parent_path() / need("ElementDataFile");
  const std::vector<unsigned char> buf = read_file_bytes(raw);
  const std::size_t n = dims[0] * dims[1] * dims[2];
  if (buf.size() != n * width) throw FormatError(raw.string() + ": payload size does not match DimSize");
  v.voxels = Grid3(dims, 0.0f);
  for (std::size_t i = 0; i < n; ++i)
    v.voxels.values[i] = width == 2 ? static_cast<float>(bytes::get_le<std::int16_t>(&buf[2 * i]))
                                    : bytes::get_le<float>(&buf[4 * i]);
  v.validate();
  return v;
}

Volume read_volume(const std::filesystem::path& path) {
  const std::string ext = path.extension().string();
  if (ext == ".lrvol") return read_lrvol(path);
  if (ext == ".mhd") return read_metaimage(path);
  throw FormatError(path.string() + ": unknown volume file extension '" + ext + "'");
}

}  // namespace lungrisk
