#include "lungrisk/pancan.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "lungrisk/byte_io.hpp"
#include "lungrisk/csv.hpp"
#include "lungrisk/errors.hpp"
#include "lungrisk/ops.hpp"

namespace lungrisk {

std::string to_string(NoduleType t) {
  switch (t) {
    case NoduleType::Nonsolid: return "nonsolid";
    case NoduleType::PartSolid: return "part_solid";
    case NoduleType::Solid: return "solid";
  }
  return "solid";
}

NoduleType parse_nodule_type(const std::string& text, const std::string& context) {
  if (text == "nonsolid") return NoduleType::Nonsolid;
  if (text == "part_solid") return NoduleType::PartSolid;
  if (text == "solid") return NoduleType::Solid;
  throw FormatError(context + ": nodule_type must be nonsolid, part_solid or solid, got '" + text + "'");
}

void PanCanFeatures::validate() const {
  if (!(diameter_mm > 0.0) || !std::isfinite(diameter_mm)) throw DataConsistencyError("diameter_mm must be positive");
  if (nodule_count < 1) throw DataConsistencyError("nodule_count must be at least 1");
  if (!std::isfinite(age) || age < 0.0) throw DataConsistencyError("age must be a non-negative number");
}

namespace {

const char* indicator_key(NoduleType t) {
  switch (t) {
    case NoduleType::Nonsolid: return "type_nonsolid";
    case NoduleType::PartSolid: return "type_part_solid";
    case NoduleType::Solid: return "type_solid";
  }
  return "type_solid";
}

}  // namespace

std::vector<std::string> PanCanWeights::required_keys(NoduleType type_reference) {
  std::vector<std::string> keys{"age", "sex_male", "family_history", "emphysema", "nodule_count", "diameter_mm"};
  for (NoduleType t : {NoduleType::PartSolid, NoduleType::Nonsolid, NoduleType::Solid})
    if (t != type_reference) keys.push_back(indicator_key(t));
  keys.push_back("upper_lobe");
  keys.push_back("spiculation");
  return keys;
}

double PanCanWeights::weight(const std::string& key) const {
  auto it = weights.find(key);
  if (it == weights.end()) throw ConfigError("PanCan weights: missing weight '" + key + "'");
  return it->second;
}

std::string PanCanWeights::to_text() const {
  std::ostringstream os;
  os << "format = lungrisk-pancan-weights\n"
     << "version = " << kPanCanWeightsVersion << '\n'
     << "intercept = " << format_double(intercept) << '\n'
     << "type_reference = " << to_string(type_reference) << '\n';
  for (const std::string& key : required_keys(type_reference)) os << key << " = " << format_double(weight(key)) << '\n';
  return os.str();
}

PanCanWeights parse_pancan_weights(const std::string& text, const std::string& source) {
  PanCanWeights w;
  std::map<std::string, std::string> raw;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string body = line.substr(0, line.find('#'));
    const std::string_view view = trim(body);
    if (view.empty()) continue;
    const auto eq = view.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError(source + ":" + std::to_string(line_no) + ": expected key = value");
    const std::string key(trim(view.substr(0, eq)));
    if (!raw.emplace(key, std::string(trim(view.substr(eq + 1)))).second)
      throw ConfigError(source + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
  }
  if (raw["format"] != "lungrisk-pancan-weights")
    throw ConfigError(source + ": not a PanCan weight file (missing 'format = lungrisk-pancan-weights')");
  if (raw["version"] != std::to_string(kPanCanWeightsVersion))
    throw ConfigError(source + ": unsupported PanCan weight version '" + raw["version"] + "'");
  raw.erase("format");
  raw.erase("version");

  auto number = [&](const std::string& key) {
    try {
      return parse_double(raw.at(key), source + ": " + key);
    } catch (const FormatError& e) {
      throw ConfigError(e.what());
    }
  };
  if (auto it = raw.find("type_reference"); it != raw.end()) {
    try {
      w.type_reference = parse_nodule_type(it->second, source);
    } catch (const FormatError& e) {
      throw ConfigError(e.what());
    }
    raw.erase(it);
  }
  if (raw.count("intercept")) {
    w.intercept = number("intercept");
    raw.erase("intercept");
  }
  for (const std::string& key : PanCanWeights::required_keys(w.type_reference)) {
    if (!raw.count(key)) throw ConfigError(source + ": missing weight '" + key + "'");
    w.weights[key] = number(key);
    raw.erase(key);
  }
  if (!raw.empty()) throw ConfigError(source + ": unknown key '" + raw.begin()->first + "'");
  return w;
}

PanCanWeights read_pancan_weights(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_pancan_weights(ss.str(), path.string());
}

void write_pancan_weights(const std::filesystem::path& path, const PanCanWeights& w) {
  write_text_file(path, "# PanCan logistic weights\n" + w.to_text());
}

PanCanWeights placeholder_pancan_weights() {
  // Signs follow the usual clinical direction; magnitudes are illustrative only.
  PanCanWeights w;
  w.intercept = -6.5;
  w.weights = {{"age", 0.03},          {"sex_male", -0.2},      {"family_history", 0.3},
               {"emphysema", 0.3},     {"nodule_count", -0.08}, {"diameter_mm", 0.25},
               {"type_part_solid", 0.4}, {"type_nonsolid", -0.1}, {"upper_lobe", 0.6},
               {"spiculation", 0.8}};
  return w;
}

double weighted_sum(const PanCanFeatures& f, const PanCanWeights& w) {
  double s = w.intercept;
  s += w.weight("age") * f.age;
  s += w.weight("sex_male") * (f.sex == Sex::Male ? 1.0 : 0.0);
  s += w.weight("family_history") * (f.family_history ? 1.0 : 0.0);
  s += w.weight("emphysema") * (f.emphysema ? 1.0 : 0.0);
  s += w.weight("nodule_count") * f.nodule_count;
  s += w.weight("diameter_mm") * f.diameter_mm;
  if (f.nodule_type != w.type_reference) s += w.weight(indicator_key(f.nodule_type));
  s += w.weight("upper_lobe") * (f.upper_lobe ? 1.0 : 0.0);
  s += w.weight("spiculation") * (f.spiculation ? 1.0 : 0.0);
  return s;
}

double nodule_score(const PanCanFeatures& f, const PanCanWeights& w) {
  f.validate();
  return sigmoid(weighted_sum(f, w));
}

Aggregation parse_aggregation(const std::string& text) {
  if (text == "max") return Aggregation::Max;
  if (text == "mean") return Aggregation::Mean;
  throw UsageError("aggregation must be max or mean, got '" + text + "'");
}

double patient_score(const std::vector<PanCanFeatures>& nodules, const PanCanWeights& w, Aggregation aggregation) {
  if (nodules.empty()) throw NoNoduleError("patient_score: no nodules");
  double best = 0.0, total = 0.0;
  for (const PanCanFeatures& f : nodules) {
    const double s = nodule_score(f, w);
    best = std::max(best, s);
    total += s;
  }
  return aggregation == Aggregation::Max ? best : total / static_cast<double>(nodules.size());
}

namespace {

bool parse_bool(const std::string& text, const std::string& context) {
  if (text == "1" || text == "true") return true;
  if (text == "0" || text == "false") return false;
  throw FormatError(context + ": expected 0/1, got '" + text + "'");
}

}  // namespace

PanCanTable read_pancan_features(const std::filesystem::path& path) {
  const CsvTable t = read_csv(path);
  const std::size_t c_id = t.require_column("scan_id"), c_age = t.require_column("age"),
                    c_sex = t.require_column("sex"), c_fh = t.require_column("family_history"),
                    c_emph = t.require_column("emphysema"), c_count = t.require_column("nodule_count"),
                    c_diam = t.require_column("diameter_mm"), c_type = t.require_column("nodule_type"),
                    c_upper = t.require_column("upper_lobe"), c_spic = t.require_column("spiculation");
  PanCanTable out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::string ctx = t.where(r);
    PanCanFeatures f;
    f.age = parse_double(row[c_age], ctx);
    if (row[c_sex] == "male") f.sex = Sex::Male;
    else if (row[c_sex] == "female") f.sex = Sex::Female;
    else throw FormatError(ctx + ": sex must be male or female");
    f.family_history = parse_bool(row[c_fh], ctx);
    f.emphysema = parse_bool(row[c_emph], ctx);
    f.nodule_count = static_cast<int>(parse_int(row[c_count], ctx));
    f.diameter_mm = parse_double(row[c_diam], ctx);
    f.nodule_type = parse_nodule_type(row[c_type], ctx);
    f.upper_lobe = parse_bool(row[c_upper], ctx);
    f.spiculation = parse_bool(row[c_spic], ctx);
    try {
      f.validate();
    } catch (const DataConsistencyError& e) {
      throw DataConsistencyError(ctx + ": " + e.what());
    }
    out[row[c_id]].push_back(f);
  }
  for (const auto& [id, rows] : out)
    for (const PanCanFeatures& f : rows)
      if (f.nodule_count != static_cast<int>(rows.size()))
        throw DataConsistencyError(path.string() + ": scan " + id + " has " + std::to_string(rows.size()) +
                                   " rows but nodule_count " + std::to_string(f.nodule_count));
  return out;
}

void write_pancan_features(const std::filesystem::path& path, const PanCanTable& table) {
  std::ostringstream os;
  os << "scan_id,age,sex,family_history,emphysema,nodule_count,diameter_mm,nodule_type,upper_lobe,spiculation\n";
  for (const auto& [id, rows] : table)
    for (const PanCanFeatures& f : rows)
      os << id << ',' << format_double(f.age) << ',' << (f.sex == Sex::Male ? "male" : "female") << ','
         << f.family_history << ',' << f.emphysema << ',' << f.nodule_count << ',' << format_double(f.diameter_mm)
         << ',' << to_string(f.nodule_type) << ',' << f.upper_lobe << ',' << f.spiculation << '\n';
  write_text_file(path, os.str());
}

}  // namespace lungrisk
