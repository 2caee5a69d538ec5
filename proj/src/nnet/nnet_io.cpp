#include <zlib.h>

#include <algorithm>
#include <map>

#include "lungrisk/byte_io.hpp"
#include "lungrisk/errors.hpp"
#include "lungrisk/nnet.hpp"

namespace lungrisk {

namespace {

constexpr char kMagic[] = "LRNN1";
constexpr std::size_t kMagicBytes = 5;

std::uint32_t crc32_of(const unsigned char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks to stay portable
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<std::pair<std::string, const Tensor*>> tensors_of(const TrainedModel& m) {
  std::vector<std::pair<std::string, const Tensor*>> out;
  m.params.for_each_tensor([&](const std::string& name, const Tensor& t, bool) { out.emplace_back(name, &t); });
  return out;
}

class Reader {
 public:
  Reader(const std::vector<unsigned char>& b, const std::string& source) : bytes_(b), source_(source) {}

  template <class T>
  T get() {
    need(sizeof(T));
    const T v = bytes::get_le<T>(bytes_.data() + pos_);
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() < pos_ + n) throw TruncatedFileError(source_ + ": weight file is truncated");
  }
  const std::vector<unsigned char>& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<unsigned char> serialize_params(const TrainedModel& model) {
  auto tensors = tensors_of(model);
  const std::size_t md = model.params.metadata_dim();
  if (model.metadata_stats.mean.size() != md || model.metadata_stats.stddev.size() != md)
    throw DimensionError("metadata statistics do not match the network's metadata width");
  Tensor mean({md}), stddev({md});
  std::copy(model.metadata_stats.mean.begin(), model.metadata_stats.mean.end(), mean.data());
  std::copy(model.metadata_stats.stddev.begin(), model.metadata_stats.stddev.end(), stddev.data());
  tensors.emplace_back("metadata.mean", &mean);
  tensors.emplace_back("metadata.stddev", &stddev);

  std::vector<unsigned char> out;
  bytes::put_bytes(out, std::string(kMagic, kMagicBytes));
  bytes::put_le<std::uint16_t>(out, kWeightFormatVersion);
  bytes::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    bytes::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    bytes::put_bytes(out, name);
    bytes::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t->rank()));
    for (std::size_t d : t->shape()) bytes::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  }
  for (const auto& entry : tensors)
    for (double v : entry.second->values()) bytes::put_le<double>(out, v);
  bytes::put_le<std::uint32_t>(out, crc32_of(out.data(), out.size()));
  return out;
}

TrainedModel deserialize_params(const std::vector<unsigned char>& data, const std::string& source) {
  if (data.size() < kMagicBytes || std::string(data.begin(), data.begin() + kMagicBytes) != kMagic)
    throw FormatError(source + ": not a weight file (bad magic)");
  Reader in(data, source);
  in.get_string(kMagicBytes);
  const auto version = in.get<std::uint16_t>();
  if (version != kWeightFormatVersion)
    throw VersionError(source + ": unsupported weight format version " + std::to_string(version) + " (expected " +
                       std::to_string(kWeightFormatVersion) + ")");
  const auto count = in.get<std::uint32_t>();

  std::vector<std::pair<std::string, Shape>> manifest;
  std::size_t payload_values = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = in.get<std::uint16_t>();
    std::string name = in.get_string(len);
    const auto rank = in.get<std::uint8_t>();
    Shape shape;
    for (std::uint8_t r = 0; r < rank; ++r) shape.push_back(in.get<std::uint32_t>());
    if (rank == 0 || shape_size(shape) == 0) throw FormatError(source + ": tensor '" + name + "' has an empty shape");
    payload_values += shape_size(shape);
    manifest.emplace_back(std::move(name), std::move(shape));
  }
  const std::size_t expected = in.pos() + payload_values * sizeof(double) + sizeof(std::uint32_t);
  if (data.size() < expected) throw TruncatedFileError(source + ": weight file is truncated");
  if (data.size() > expected) throw FormatError(source + ": trailing bytes after checksum");
  const std::uint32_t stored = bytes::get_le<std::uint32_t>(data.data() + expected - 4);
  if (stored != crc32_of(data.data(), expected - 4)) throw ChecksumError(source + ": checksum mismatch");

  std::map<std::string, Tensor> by_name;
  for (const auto& [name, shape] : manifest) {
    Tensor t(shape);
    for (double& v : t.values()) v = in.get<double>();
    if (!by_name.emplace(name, std::move(t)).second) throw FormatError(source + ": duplicate tensor '" + name + "'");
  }
  auto take = [&](const std::string& name) -> Tensor {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError(source + ": missing tensor '" + name + "'");
    Tensor t = std::move(it->second);
    by_name.erase(it);
    return t;
  };

  TrainedModel m;
  Tensor mean = take("metadata.mean");
  Tensor stddev = take("metadata.stddev");
  NNetConfig shape_config;
  shape_config.metadata_dim = mean.size();
  shape_config.validate();
  // a zero-seeded skeleton provides the expected shapes
  Rng rng(0);
  m.params = init_params(shape_config, rng);
  m.params.for_each_tensor([&](const std::string& name, Tensor& slot, bool) {
    Tensor t = take(name);
    if (t.shape() != slot.shape())
      throw FormatError(source + ": tensor '" + name + "' has shape " + shape_string(t.shape()) + ", expected " +
                        shape_string(slot.shape()));
    slot = std::move(t);
  });
  if (!by_name.empty()) throw FormatError(source + ": unexpected tensor '" + by_name.begin()->first + "'");
  if (stddev.size() != mean.size()) throw FormatError(source + ": metadata statistics disagree in size");
  m.metadata_stats.mean.assign(mean.values().begin(), mean.values().end());
  m.metadata_stats.stddev.assign(stddev.values().begin(), stddev.values().end());
  return m;
}

void save_params(const TrainedModel& model, const std::filesystem::path& path) {
  write_file_bytes(path, serialize_params(model));
}

TrainedModel load_params(const std::filesystem::path& path) {
  return deserialize_params(read_file_bytes(path), path.string());
}

}  // namespace lungrisk
