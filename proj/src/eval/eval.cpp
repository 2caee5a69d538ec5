#include "lungrisk/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <thread>

#include "lungrisk/byte_io.hpp"
#include "lungrisk/csv.hpp"
#include "lungrisk/errors.hpp"
#include "lungrisk/rng.hpp"

namespace lungrisk {

std::vector<double> ScoredCohort::scores() const {
  std::vector<double> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(e.score);
  return out;
}

std::vector<int> ScoredCohort::labels() const {
  std::vector<int> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(e.label);
  return out;
}

std::size_t ScoredCohort::positives() const {
  return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [](const auto& e) { return e.label == 1; }));
}

double PairCounts::auc() const {
  return static_cast<double>(twice_wins_plus_ties) / (2.0 * static_cast<double>(positives) * static_cast<double>(negatives));
}

namespace {

void check_cohort(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("scores and labels differ in length");
  std::size_t pos = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) throw NumericError("score " + std::to_string(i) + " is not finite");
    if (labels[i] != 0 && labels[i] != 1) throw DataConsistencyError("labels must be 0 or 1");
    pos += static_cast<std::size_t>(labels[i]);
  }
  if (pos == 0 || pos == labels.size())
    throw DegenerateCohortError("cohort needs both positive and negative cases (" + std::to_string(pos) +
                                " positive of " + std::to_string(labels.size()) + ")");
}

std::vector<std::size_t> order_descending(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

// Counts without validation; scores sorted through `idx` descending.
std::int64_t twice_wins(std::span<const double> scores, std::span<const int> labels, std::vector<std::size_t>& idx) {
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::int64_t twice = 0, neg_below = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    std::int64_t pos = 0, neg = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] ? pos : neg) += 1;
      ++j;
    }
    twice += pos * (2 * neg_below + neg);
    neg_below += neg;
    i = j;
  }
  return twice;
}

}  // namespace

PairCounts pair_counts(std::span<const double> scores, std::span<const int> labels) {
  check_cohort(scores, labels);
  PairCounts c;
  for (int l : labels) (l ? c.positives : c.negatives) += 1;
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  c.twice_wins_plus_ties = twice_wins(scores, labels, idx);
  return c;
}

double auc(std::span<const double> scores, std::span<const int> labels) { return pair_counts(scores, labels).auc(); }

double auc(const ScoredCohort& c) {
  const auto s = c.scores();
  const auto l = c.labels();
  return auc(s, l);
}

std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels) {
  check_cohort(scores, labels);
  const auto idx = order_descending(scores);
  const double P = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  const double N = static_cast<double>(labels.size()) - P;
  std::vector<RocPoint> curve{{0.0, 0.0, std::numeric_limits<double>::infinity()}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < idx.size();) {
    const double t = scores[idx[i]];
    while (i < idx.size() && scores[idx[i]] == t) {
      (labels[idx[i]] ? tp : fp) += 1;
      ++i;
    }
    curve.push_back({static_cast<double>(fp) / N, static_cast<double>(tp) / P, t});
  }
  return curve;
}

std::vector<RocPoint> roc_curve(const ScoredCohort& c) {
  const auto s = c.scores();
  const auto l = c.labels();
  return roc_curve(s, l);
}

double trapezoid_auc(const std::vector<RocPoint>& curve) {
  double area = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i)
    area += (curve[i].fpr - curve[i - 1].fpr) * (curve[i].tpr + curve[i - 1].tpr) / 2.0;
  return area;
}

namespace {

void check_target(double target, const char* what) {
  if (!(target >= 0.0 && target <= 1.0)) throw ConfigError(std::string(what) + " target must lie in [0, 1]");
}

// Operating points at +inf and at every distinct score, descending.
std::vector<OperatingPoint> sweep(std::span<const double> scores, std::span<const int> labels) {
  check_cohort(scores, labels);
  const auto idx = order_descending(scores);
  const std::size_t n_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t n_neg = labels.size() - n_pos;
  std::size_t tp = 0, fp = 0;
  auto point = [&](double t) {
    return OperatingPoint{t, static_cast<double>(tp) / static_cast<double>(n_pos),
                          static_cast<double>(n_neg - fp) / static_cast<double>(n_neg)};
  };
  std::vector<OperatingPoint> out{point(std::numeric_limits<double>::infinity())};
  for (std::size_t i = 0; i < idx.size();) {
    const double t = scores[idx[i]];
    while (i < idx.size() && scores[idx[i]] == t) {
      (labels[idx[i]] ? tp : fp) += 1;
      ++i;
    }
    out.push_back(point(t));
  }
  return out;
}

}  // namespace

OperatingPoint operating_point_at_specificity(std::span<const double> scores, std::span<const int> labels,
                                              double target) {
  check_target(target, "specificity");
  const auto points = sweep(scores, labels);
  OperatingPoint best = points.front();  // +inf always has specificity 1
  for (const OperatingPoint& p : points) {
    if (p.specificity < target) break;
    best = p;
  }
  return best;
}

OperatingPoint operating_point_at_sensitivity(std::span<const double> scores, std::span<const int> labels,
                                              double target) {
  check_target(target, "sensitivity");
  const auto points = sweep(scores, labels);
  for (const OperatingPoint& p : points)
    if (p.sensitivity >= target) return p;
  return points.back();
}

double sensitivity_at_specificity(const ScoredCohort& c, double target) {
  const auto s = c.scores();
  const auto l = c.labels();
  return operating_point_at_specificity(s, l, target).sensitivity;
}

double specificity_at_sensitivity(const ScoredCohort& c, double target) {
  const auto s = c.scores();
  const auto l = c.labels();
  return operating_point_at_sensitivity(s, l, target).specificity;
}

// --- permutation test ---------------------------------------------------------

PermutationResult permutation_test_auc(const ScoredCohort& a, const ScoredCohort& b, std::size_t n_perm,
                                       std::uint64_t seed, std::size_t threads) {
  if (n_perm == 0) throw ConfigError("permutation count must be at least 1");
  if (a.size() != b.size()) throw PairingError("paired cohorts differ in size");
  std::map<std::string, std::size_t> index_b;
  for (std::size_t i = 0; i < b.size(); ++i)
    if (!index_b.emplace(b.entries[i].scan_id, i).second)
      throw PairingError("duplicate scan_id " + b.entries[i].scan_id);
  std::vector<double> sa, sb;
  std::vector<int> labels;
  std::map<std::string, bool> seen;
  for (const ScoredEntry& e : a.entries) {
    auto it = index_b.find(e.scan_id);
    if (it == index_b.end()) throw PairingError("scan " + e.scan_id + " is scored by only one model");
    if (!seen.emplace(e.scan_id, true).second) throw PairingError("duplicate scan_id " + e.scan_id);
    const ScoredEntry& f = b.entries[it->second];
    if (f.label != e.label) throw PairingError("scan " + e.scan_id + " has different labels in the two cohorts");
    sa.push_back(e.score);
    sb.push_back(f.score);
    labels.push_back(e.label);
  }
  const PairCounts ca = pair_counts(sa, labels);
  const PairCounts cb = pair_counts(sb, labels);
  const std::int64_t observed = ca.twice_wins_plus_ties - cb.twice_wins_plus_ties;

  auto run_range = [&](std::size_t begin, std::size_t end) {
    std::size_t count = 0;
    std::vector<double> pa(sa.size()), pb(sb.size());
    std::vector<std::size_t> idx(sa.size());
    for (std::size_t r = begin; r < end; ++r) {
      Rng rng(derive_seed(seed, static_cast<std::uint64_t>(r)));
      for (std::size_t i = 0; i < sa.size(); ++i) {
        const bool swap = uniform01(rng) < 0.5;
        pa[i] = swap ? sb[i] : sa[i];
        pb[i] = swap ? sa[i] : sb[i];
      }
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      const std::int64_t wa = twice_wins(pa, labels, idx);
      const std::int64_t wb = twice_wins(pb, labels, idx);
      if (wa - wb >= observed) ++count;
    }
    return count;
  };

  std::size_t count = 0;
  const std::size_t n_threads = std::clamp<std::size_t>(threads, 1, n_perm);
  if (n_threads == 1) {
    count = run_range(0, n_perm);
  } else {
    std::atomic<std::size_t> total{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t)
      pool.emplace_back([&, t] { total += run_range(n_perm * t / n_threads, n_perm * (t + 1) / n_threads); });
    for (auto& th : pool) th.join();
    count = total;
  }

  PermutationResult r;
  r.auc_a = ca.auc();
  r.auc_b = cb.auc();
  r.observed = r.auc_a - r.auc_b;
  r.at_least_observed = count;
  r.n_perm = n_perm;
  r.p_value = static_cast<double>(1 + count) / static_cast<double>(1 + n_perm);
  return r;
}

// --- grouped metrics -------------------------------------------------------------

GroupMetrics overall_metrics(const ScoredCohort& c, double target_specificity, double target_sensitivity) {
  check_target(target_specificity, "specificity");
  check_target(target_sensitivity, "sensitivity");
  GroupMetrics g;
  g.group = "all";
  g.n = c.size();
  g.positives = c.positives();
  if (g.positives == 0 || g.positives == g.n) return g;
  g.auc = auc(c);
  g.sensitivity = sensitivity_at_specificity(c, target_specificity);
  g.specificity = specificity_at_sensitivity(c, target_sensitivity);
  return g;
}

std::vector<GroupMetrics> grouped_metrics(const ScoredCohort& c, double target_specificity,
                                          double target_sensitivity) {
  std::map<std::string, ScoredCohort> parts;
  for (const ScoredEntry& e : c.entries)
    parts[e.lungrads_category ? "lungrads_" + std::to_string(*e.lungrads_category) : "lungrads_unknown"]
        .entries.push_back(e);
  std::vector<GroupMetrics> out;
  for (const auto& [name, part] : parts) {
    GroupMetrics g = overall_metrics(part, target_specificity, target_sensitivity);
    g.group = name;
    out.push_back(std::move(g));
  }
  return out;
}

// --- files -------------------------------------------------------------------------

ScoreTable read_scores(const std::filesystem::path& path) {
  const CsvTable t = read_csv(path);
  const std::size_t c_id = t.require_column("scan_id"), c_score = t.require_column("score");
  ScoreTable out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const double s = parse_double(t.rows[r][c_score], t.where(r));
    if (!out.emplace(t.rows[r][c_id], s).second)
      throw DataConsistencyError(t.where(r) + ": duplicate scan_id " + t.rows[r][c_id]);
  }
  return out;
}

void write_scores(const std::filesystem::path& path, const ScoreTable& scores) {
  std::string text = "scan_id,score\n";
  for (const auto& [id, s] : scores) text += id + "," + format_double(s) + "\n";
  write_text_file(path, text);
}

std::map<std::string, int> scan_categories(const CandidateTable& candidates) {
  std::map<std::string, int> out;
  for (const auto& [id, list] : candidates)
    for (const NoduleCandidate& c : list)
      if (c.lungrads_category) out[id] = std::max(out.count(id) ? out[id] : 0, *c.lungrads_category);
  return out;
}

ScoredCohort join_cohort(const ScoreTable& scores, const LabelTable& labels, const CandidateTable* categories) {
  std::vector<std::string> unlabeled, unscored;
  for (const auto& [id, s] : scores)
    if (!labels.count(id)) unlabeled.push_back(id);
  for (const auto& [id, l] : labels)
    if (!scores.count(id)) unscored.push_back(id);
  auto list = [](const std::vector<std::string>& ids) {
    std::string s;
    for (std::size_t i = 0; i < ids.size() && i < 10; ++i) s += (i ? ", " : "") + ids[i];
    if (ids.size() > 10) s += ", ...";
    return s;
  };
  if (!unlabeled.empty()) throw PairingError("scores without labels: " + list(unlabeled));
  if (!unscored.empty()) throw PairingError("labels without scores: " + list(unscored));
  std::map<std::string, int> cats;
  if (categories) cats = scan_categories(*categories);
  ScoredCohort c;
  for (const auto& [id, s] : scores) {
    ScoredEntry e{id, s, labels.at(id), std::nullopt};
    if (auto it = cats.find(id); it != cats.end()) e.lungrads_category = it->second;
    c.entries.push_back(std::move(e));
  }
  return c;
}

std::vector<ReportRow> evaluation_rows(const GroupMetrics& overall, const std::vector<GroupMetrics>& groups) {
  std::vector<ReportRow> rows;
  auto add = [&](const GroupMetrics& g) {
    rows.push_back({"n", g.group, static_cast<double>(g.n)});
    rows.push_back({"positives", g.group, static_cast<double>(g.positives)});
    rows.push_back({"auc", g.group, g.auc});
    rows.push_back({"sensitivity_at_specificity", g.group, g.sensitivity});
    rows.push_back({"specificity_at_sensitivity", g.group, g.specificity});
  };
  add(overall);
  for (const GroupMetrics& g : groups) add(g);
  return rows;
}

std::vector<ReportRow> comparison_rows(const PermutationResult& r) {
  return {{"auc_a", "all", r.auc_a},
          {"auc_b", "all", r.auc_b},
          {"auc_difference", "all", r.observed},
          {"permutations", "all", static_cast<double>(r.n_perm)},
          {"p_value", "all", r.p_value}};
}

void write_report_csv(const std::filesystem::path& path, const std::vector<ReportRow>& rows) {
  std::string text = "metric,group,value\n";
  for (const ReportRow& r : rows) text += r.metric + "," + r.group + "," + (r.value ? format_double(*r.value) : "NA") + "\n";
  write_text_file(path, text);
}

std::string format_report_text(const std::vector<ReportRow>& rows) {
  std::size_t w_metric = 6, w_group = 5;
  for (const ReportRow& r : rows) {
    w_metric = std::max(w_metric, r.metric.size());
    w_group = std::max(w_group, r.group.size());
  }
  std::ostringstream os;
  auto pad = [](const std::string& s, std::size_t w) { return s + std::string(w - s.size() + 2, ' '); };
  os << pad("metric", w_metric) << pad("group", w_group) << "value\n";
  for (const ReportRow& r : rows) {
    std::string v = "NA";
    if (r.value) {
      const bool integral = r.metric == "n" || r.metric == "positives" || r.metric == "permutations";
      v = integral ? std::to_string(static_cast<long long>(*r.value)) : format_fixed(*r.value, 4);
    }
    os << pad(r.metric, w_metric) << pad(r.group, w_group) << v << '\n';
  }
  return os.str();
}

void write_roc_csv(const std::filesystem::path& path, const std::vector<RocPoint>& curve) {
  std::string text = "fpr,tpr,threshold\n";
  for (const RocPoint& p : curve)
    text += format_double(p.fpr) + "," + format_double(p.tpr) + "," +
            (std::isinf(p.threshold) ? std::string("inf") : format_double(p.threshold)) + "\n";
  write_text_file(path, text);
}

}  // namespace lungrisk
