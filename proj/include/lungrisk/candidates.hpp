#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lungrisk/volume.hpp"

namespace lungrisk {

// One detector suggestion.
struct NoduleCandidate {
  Vec3 center{};  // world mm
  double radius_mm = 0.0;
  double confidence = 0.0;
  std::optional<double> sphericity;
  std::optional<int> lungrads_category;  // 2, 3 or 4

  void validate() const;
  friend bool operator==(const NoduleCandidate&, const NoduleCandidate&) = default;
};

using CandidateTable = std::map<std::string, std::vector<NoduleCandidate>>;
using LabelTable = std::map<std::string, int>;

// scan_id,x_mm,y_mm,z_mm,radius_mm,confidence[,sphericity][,lungrads]
CandidateTable read_candidates(const std::filesystem::path& path);
void write_candidates(const std::filesystem::path& path, const CandidateTable& table, bool with_sphericity,
                      bool with_lungrads);

// scan_id,label
LabelTable read_labels(const std::filesystem::path& path);
void write_labels(const std::filesystem::path& path, const LabelTable& labels);

}  // namespace lungrisk
