#include "lungrisk/candidates.hpp"

#include <cmath>
#include <sstream>

#include "lungrisk/byte_io.hpp"
#include "lungrisk/csv.hpp"
#include "lungrisk/errors.hpp"

namespace lungrisk {

void NoduleCandidate::validate() const {
  if (!(radius_mm > 0.0)) throw FormatError("nodule radius must be positive");
  if (!std::isfinite(confidence)) throw FormatError("nodule confidence must be finite");
  if (lungrads_category && (*lungrads_category < 2 || *lungrads_category > 4))
    throw FormatError("Lung-RADS category must be 2, 3 or 4");
}

CandidateTable read_candidates(const std::filesystem::path& path) {
  const CsvTable t = read_csv(path);
  const std::size_t c_id = t.require_column("scan_id");
  const std::size_t c_x = t.require_column("x_mm"), c_y = t.require_column("y_mm"), c_z = t.require_column("z_mm");
  const std::size_t c_r = t.require_column("radius_mm"), c_conf = t.require_column("confidence");
  const auto c_sph = t.column("sphericity");
  const auto c_lr = t.column("lungrads");

  CandidateTable out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::string ctx = t.where(r);
    if (row[c_id].empty()) throw FormatError(ctx + ": empty scan_id");
    NoduleCandidate c;
    c.center = {parse_double(row[c_x], ctx), parse_double(row[c_y], ctx), parse_double(row[c_z], ctx)};
    c.radius_mm = parse_double(row[c_r], ctx);
    c.confidence = parse_double(row[c_conf], ctx);
    if (c_sph && !row[*c_sph].empty()) c.sphericity = parse_double(row[*c_sph], ctx);
    if (c_lr && !row[*c_lr].empty()) c.lungrads_category = static_cast<int>(parse_int(row[*c_lr], ctx));
    try {
      c.validate();
    } catch (const FormatError& e) {
      throw FormatError(ctx + ": " + e.what());
    }
    out[row[c_id]].push_back(c);
  }
  return out;
}

void write_candidates(const std::filesystem::path& path, const CandidateTable& table, bool with_sphericity,
                      bool with_lungrads) {
  std::ostringstream os;
  os << "scan_id,x_mm,y_mm,z_mm,radius_mm,confidence";
  if (with_sphericity) os << ",sphericity";
  if (with_lungrads) os << ",lungrads";
  os << '\n';
  for (const auto& [id, cands] : table)
    for (const NoduleCandidate& c : cands) {
      os << id << ',' << format_double(c.center[0]) << ',' << format_double(c.center[1]) << ','
         << format_double(c.center[2]) << ',' << format_double(c.radius_mm) << ',' << format_double(c.confidence);
      if (with_sphericity) os << ',' << (c.sphericity ? format_double(*c.sphericity) : "");
      if (with_lungrads) os << ',' << (c.lungrads_category ? std::to_string(*c.lungrads_category) : "");
      os << '\n';
    }
  write_text_file(path, os.str());
}

LabelTable read_labels(const std::filesystem::path& path) {
  const CsvTable t = read_csv(path);
  const std::size_t c_id = t.require_column("scan_id"), c_label = t.require_column("label");
  LabelTable out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const std::string ctx = t.where(r);
    const long long label = parse_int(t.rows[r][c_label], ctx);
    if (label != 0 && label != 1) throw FormatError(ctx + ": label must be 0 or 1");
    if (!out.emplace(t.rows[r][c_id], static_cast<int>(label)).second)
      throw FormatError(ctx + ": duplicate scan_id " + t.rows[r][c_id]);
  }
  return out;
}

void write_labels(const std::filesystem::path& path, const LabelTable& labels) {
  std::ostringstream os;
  os << "scan_id,label\n";
  for (const auto& [id, label] : labels) os << id << ',' << label << '\n';
  write_text_file(path, os.str());
}

}  // namespace lungrisk
