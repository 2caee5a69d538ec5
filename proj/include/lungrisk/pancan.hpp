#pragma once

// Nodule malignancy as a logistic over nine clinical and image inputs, and the
// patient score as the maximum over nodules.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace lungrisk {

enum class Sex { Male, Female };
enum class NoduleType { Nonsolid, PartSolid, Solid };

std::string to_string(NoduleType t);
NoduleType parse_nodule_type(const std::string& text, const std::string& context);

struct PanCanFeatures {
  double age = 0.0;
  Sex sex = Sex::Female;
  bool family_history = false;
  bool emphysema = false;
  int nodule_count = 1;       // nodules in the scan
  double diameter_mm = 0.0;   // longest in-slice axis
  NoduleType nodule_type = NoduleType::Solid;
  bool upper_lobe = false;
  bool spiculation = false;

  void validate() const;
  friend bool operator==(const PanCanFeatures&, const PanCanFeatures&) = default;
};

// Weight file (text):
//
//   format = lungrisk-pancan-weights
//   version = 1
//   intercept = -6.8           (optional, default 0)
//   age = 0.03
//   sex_male = ...  family_history = ...  emphysema = ...  nodule_count = ...
//   diameter_mm = ...  upper_lobe = ...  spiculation = ...
//   type_reference = solid     (optional; the category without an indicator)
//   type_part_solid = ...  type_nonsolid = ...   (indicators for the other two)
//
// Booleans enter as 0/1, sex as sex_male, nodule type as two indicators.
inline constexpr int kPanCanWeightsVersion = 1;

struct PanCanWeights {
  double intercept = 0.0;
  NoduleType type_reference = NoduleType::Solid;
  std::map<std::string, double> weights;  // every required key present

  static std::vector<std::string> required_keys(NoduleType type_reference);
  double weight(const std::string& key) const;  // ConfigError naming a missing key
  std::string to_text() const;
};

PanCanWeights parse_pancan_weights(const std::string& text, const std::string& source = "weights");
PanCanWeights read_pancan_weights(const std::filesystem::path& path);
void write_pancan_weights(const std::filesystem::path& path, const PanCanWeights& w);

// Placeholder coefficients for tests and demos. Not clinical values.
PanCanWeights placeholder_pancan_weights();

double weighted_sum(const PanCanFeatures& f, const PanCanWeights& w);
double nodule_score(const PanCanFeatures& f, const PanCanWeights& w);

enum class Aggregation { Max, Mean };
Aggregation parse_aggregation(const std::string& text);

// NoNoduleError on an empty list.
double patient_score(const std::vector<PanCanFeatures>& nodules, const PanCanWeights& w,
                     Aggregation aggregation = Aggregation::Max);

// scan_id,age,sex,family_history,emphysema,nodule_count,diameter_mm,nodule_type,upper_lobe,spiculation
using PanCanTable = std::map<std::string, std::vector<PanCanFeatures>>;
PanCanTable read_pancan_features(const std::filesystem::path& path);
void write_pancan_features(const std::filesystem::path& path, const PanCanTable& table);

}  // namespace lungrisk
