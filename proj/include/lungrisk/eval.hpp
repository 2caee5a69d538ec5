#pragma once

// ROC analysis, paired permutation comparison and fixed operating points.

#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lungrisk/candidates.hpp"

namespace lungrisk {

struct ScoredEntry {
  std::string scan_id;
  double score = 0.0;
  int label = 0;
  std::optional<int> lungrads_category;
};

struct ScoredCohort {
  std::vector<ScoredEntry> entries;

  std::vector<double> scores() const;
  std::vector<int> labels() const;
  std::size_t positives() const;
  std::size_t size() const { return entries.size(); }
};

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;  // predicted positive when score >= threshold
  friend bool operator==(const RocPoint&, const RocPoint&) = default;
};

// Mann-Whitney pair counts: AUC = (2 * wins + ties) / (2 * P * N).
struct PairCounts {
  std::int64_t twice_wins_plus_ties = 0;
  std::int64_t positives = 0;
  std::int64_t negatives = 0;
  double auc() const;
};

// Both classes required; otherwise DegenerateCohortError.
PairCounts pair_counts(std::span<const double> scores, std::span<const int> labels);
double auc(std::span<const double> scores, std::span<const int> labels);
double auc(const ScoredCohort& c);

// Starts at (0, 0, +inf), then one point per distinct score, descending.
std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels);
std::vector<RocPoint> roc_curve(const ScoredCohort& c);
double trapezoid_auc(const std::vector<RocPoint>& curve);

struct OperatingPoint {
  double threshold = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
};

inline constexpr double kDefaultTargetSpecificity = 0.80;
inline constexpr double kDefaultTargetSensitivity = 0.84;

// Smallest threshold whose specificity meets the target.
OperatingPoint operating_point_at_specificity(std::span<const double> scores, std::span<const int> labels,
                                              double target);
// Largest threshold whose sensitivity meets the target.
OperatingPoint operating_point_at_sensitivity(std::span<const double> scores, std::span<const int> labels,
                                              double target);
double sensitivity_at_specificity(const ScoredCohort& c, double target = kDefaultTargetSpecificity);
double specificity_at_sensitivity(const ScoredCohort& c, double target = kDefaultTargetSensitivity);

struct PermutationResult {
  double auc_a = 0.0;
  double auc_b = 0.0;
  double observed = 0.0;  // auc_a - auc_b
  std::size_t at_least_observed = 0;
  std::size_t n_perm = 0;
  double p_value = 1.0;
};

inline constexpr std::size_t kDefaultPermutations = 10000;

// One-sided (a better than b), paired: each replicate swaps the two models'
// scores per scan with probability 1/2, replicate r drawing from
// derive_seed(seed, r). p = (1 + count) / (1 + n_perm).
PermutationResult permutation_test_auc(const ScoredCohort& a, const ScoredCohort& b,
                                       std::size_t n_perm = kDefaultPermutations, std::uint64_t seed = 0,
                                       std::size_t threads = 1);

struct GroupMetrics {
  std::string group;
  std::size_t n = 0;
  std::size_t positives = 0;
  std::optional<double> auc;
  std::optional<double> sensitivity;  // at the target specificity
  std::optional<double> specificity;  // at the target sensitivity
};

// Metrics per Lung-RADS category; groups lacking a class report NA.
std::vector<GroupMetrics> grouped_metrics(const ScoredCohort& c, double target_specificity = kDefaultTargetSpecificity,
                                          double target_sensitivity = kDefaultTargetSensitivity);
GroupMetrics overall_metrics(const ScoredCohort& c, double target_specificity = kDefaultTargetSpecificity,
                             double target_sensitivity = kDefaultTargetSensitivity);

// --- files ---------------------------------------------------------------------

using ScoreTable = std::map<std::string, double>;

// scan_id,score
ScoreTable read_scores(const std::filesystem::path& path);
void write_scores(const std::filesystem::path& path, const ScoreTable& scores);

// Every scored scan needs a label (PairingError otherwise); categories come
// from the candidate table's Lung-RADS column when given.
ScoredCohort join_cohort(const ScoreTable& scores, const LabelTable& labels,
                         const CandidateTable* categories = nullptr);
// Highest Lung-RADS category among a scan's candidates.
std::map<std::string, int> scan_categories(const CandidateTable& candidates);

struct ReportRow {
  std::string metric;
  std::string group;
  std::optional<double> value;  // empty prints as NA
};

std::vector<ReportRow> evaluation_rows(const GroupMetrics& overall, const std::vector<GroupMetrics>& groups);
std::vector<ReportRow> comparison_rows(const PermutationResult& r);
// metric,group,value
void write_report_csv(const std::filesystem::path& path, const std::vector<ReportRow>& rows);
std::string format_report_text(const std::vector<ReportRow>& rows);
// fpr,tpr,threshold
void write_roc_csv(const std::filesystem::path& path, const std::vector<RocPoint>& curve);

}  // namespace lungrisk
