// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance [--work DIR] [criterion numbers...]
//
// Thread count for the end-to-end runs comes from LUNGRISK_THREADS (default 1).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "eval_oracles.hpp"
#include "lungrisk/byte_io.hpp"
#include "lungrisk/cli.hpp"
#include "lungrisk/csv.hpp"
#include "lungrisk/errors.hpp"
#include "lungrisk/eval.hpp"
#include "lungrisk/nnet.hpp"
#include "lungrisk/pancan.hpp"
#include "lungrisk/synthdata.hpp"
#include "network_checks.hpp"
#include "op_gradchecks.hpp"

using namespace lungrisk;
using namespace lungrisk::testing;
namespace fs = std::filesystem;

namespace {

// --- pinned thresholds --------------------------------------------------------

// 1. gradients
constexpr double kGradTolerance = 1e-4;
constexpr int kGradInstances = 20;
constexpr double kGradBudgetSeconds = 120.0;
// 3. multi-instance invariants
constexpr int kInvariantCases = 200;
constexpr double kMaxPoolTolerance = 1e-12;
// 4. AUC dual oracle
constexpr int kAucCohorts = 100;
constexpr int kAucMaxN = 500;
constexpr double kAucTolerance = 1e-12;
constexpr int kBruteForceMaxN = 100;
// 5. permutation test
constexpr std::size_t kPermutations = 10000;
constexpr int kPowerTrials = 100;
constexpr std::size_t kPowerCohortSize = 200;
constexpr double kPowerGap = 0.05;
constexpr double kPowerAlpha = 0.05;
constexpr int kPowerRequired = 95;
constexpr double kPermBudgetSeconds = 180.0;
// 6. end-to-end synthetic experiment
constexpr std::size_t kTrainScans = 500;
constexpr std::size_t kHeldOutScans = 100;
constexpr double kPrevalence = 0.2;
constexpr std::uint64_t kDataSeed = 2024;
constexpr std::uint64_t kTrainSeed = 1;
constexpr double kDropout = 0.25;
constexpr double kLearningRate = 1e-3;
constexpr int kFolds = 5;
constexpr int kEpochs = 18;
constexpr int kBatchSize = 32;
constexpr double kMinEnsembleAuc = 0.85;
constexpr double kPanCanMargin = 0.05;
constexpr double kEndToEndBudgetSeconds = 15 * 60.0;
// 7. overfit
constexpr int kOverfitExamples = 8;
constexpr int kOverfitEpochs = 500;
constexpr double kOverfitLoss = 0.05;
// 8. PanCan
constexpr int kPanCanSets = 1000;
constexpr double kPanCanTolerance = 1e-12;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(double v, int decimals = 4) { return format_fixed(v, decimals); }
std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (code != 0) throw std::runtime_error(args.front() + " exited with " + std::to_string(code) + ": " + err.str());
}

std::string threads_flag() { return std::to_string(cli::resolve_threads(std::nullopt)); }

// --- criteria ------------------------------------------------------------------

Outcome gradient_correctness(const fs::path&) {
  const auto start = Clock::now();
  Rng rng(101);
  double op_worst = 0.0;
  std::string worst_op;
  for (const OpCheck& check : tensor_core_op_checks())
    for (int i = 0; i < kGradInstances; ++i) {
      const double e = check.run(rng);
      if (e > op_worst) {
        op_worst = e;
        worst_op = check.name;
      }
    }
  double net_worst = 0.0;
  std::size_t probes = 0, kinks = 0;
  for (int i = 0; i < kGradInstances; ++i) {
    const NetworkGradcheck r = network_gradcheck_instance(rng);
    net_worst = std::max(net_worst, r.max_error);
    probes += r.probes;
    kinks += r.kinks_skipped;
  }
  const double elapsed = seconds_since(start);
  const bool ok = op_worst < kGradTolerance && net_worst < kGradTolerance && elapsed < kGradBudgetSeconds;
  return {ok, "ops max rel err " + sci(op_worst) + " (" + worst_op + "), network max rel err " + sci(net_worst) +
                  " over " + std::to_string(probes) + " probes (" + std::to_string(kinks) +
                  " kink-straddling probes redrawn), " + fmt(elapsed, 1) + " s"};
}

Outcome architecture_conformance(const fs::path&) {
  Rng rng(202);
  bool ok = true;
  std::string detail;
  for (std::size_t md : {std::size_t{5}, std::size_t{6}}) {
    const auto trace = shape_trace(random_params(rng, md));
    const bool same = same_manifest(trace, expected_shape_manifest(md));
    ok = ok && same;
    detail += "metadata_dim " + std::to_string(md) + ": " + std::to_string(trace.size()) + " layers " +
              (same ? "match" : "MISMATCH") + "; ";
  }
  NNetParams p = random_params(rng);
  const auto scan = random_example(rng, kMaxNodules, 5);
  const BranchBatch b = BranchBatch::from_examples({&scan}, 5);
  ok = ok && b.size() == kMaxNodules;
  const ScanRisk r = forward_scan(p, scan);
  ok = ok && std::isfinite(r.risk) && !r.no_nodules;
  return {ok, detail + "forward_scan consumes " + std::to_string(b.size()) + " branches, emits one scalar"};
}

Outcome multi_instance_invariants(const fs::path&) {
  Rng rng(303);
  int perm_fail = 0, mask_fail = 0;
  double worst = 0.0;
  NNetParams p = random_params(rng);
  for (int i = 0; i < kInvariantCases; ++i) {
    if (i % 20 == 0) p = random_params(rng);
    const InstanceInvariants r = multi_instance_case(p, rng);
    perm_fail += !r.permutation_exact;
    mask_fail += !r.masked_noop_exact;
    worst = std::max(worst, r.max_pool_error);
  }
  const bool ok = perm_fail == 0 && mask_fail == 0 && worst <= kMaxPoolTolerance;
  return {ok, std::to_string(kInvariantCases) + " cases: permutation failures " + std::to_string(perm_fail) +
                  ", masked-slot failures " + std::to_string(mask_fail) + ", max |risk - max(prev, new)| " + sci(worst)};
}

Outcome auc_dual_oracle(const fs::path&) {
  Rng rng(404);
  double worst = 0.0;
  int op_checked = 0, op_fail = 0;
  auto check_ops = [&](const std::vector<double>& s, const std::vector<int>& y) {
    for (const auto& [ts, tn] : {std::pair{kDefaultTargetSpecificity, kDefaultTargetSensitivity},
                                 std::pair{uniform01(rng), uniform01(rng)}}) {
      const BruteOperatingPoints brute = brute_operating_points(s, y, ts, tn);
      ++op_checked;
      if (operating_point_at_specificity(s, y, ts).sensitivity != brute.sensitivity_at_specificity ||
          operating_point_at_sensitivity(s, y, tn).specificity != brute.specificity_at_sensitivity)
        ++op_fail;
    }
  };
  for (int i = 0; i < kAucCohorts; ++i) {
    std::vector<double> s;
    std::vector<int> y;
    random_cohort(rng, 2 + uniform_int(rng, 0, kAucMaxN - 2), i % 4 == 0 ? 0 : uniform_int(rng, 2, 25), s, y);
    const double pc = auc(s, y);
    worst = std::max({worst, std::abs(pc - trapezoid_auc(roc_curve(s, y))), std::abs(pc - pairwise_auc(s, y))});
    if (s.size() <= static_cast<std::size_t>(kBruteForceMaxN)) check_ops(s, y);
  }
  // the random sizes above leave few small cohorts; cover n <= 100 densely
  for (int i = 0; i < kAucCohorts; ++i) {
    std::vector<double> s;
    std::vector<int> y;
    random_cohort(rng, 2 + uniform_int(rng, 0, kBruteForceMaxN - 2), i % 2 ? uniform_int(rng, 2, 10) : 0, s, y);
    worst = std::max(worst, std::abs(auc(s, y) - trapezoid_auc(roc_curve(s, y))));
    check_ops(s, y);
  }
  const bool ok = worst <= kAucTolerance && op_fail == 0;
  return {ok, "max |pair-count - trapezoid| " + sci(worst) + "; operating points vs exhaustive sweep: " +
                  std::to_string(op_checked - op_fail) + "/" + std::to_string(op_checked) + " equal"};
}

Outcome permutation_test(const fs::path&) {
  const auto start = Clock::now();
  const std::size_t threads = cli::resolve_threads(std::nullopt);
  Rng rng(505);
  ScoredCohort a, b;
  power_cohorts(rng, kPowerCohortSize, kPowerGap, a, b);
  const double p_same = permutation_test_auc(a, a, kPermutations, 1, threads).p_value;
  const double p1 = permutation_test_auc(a, b, kPermutations, 77, 1).p_value;
  const double p2 = permutation_test_auc(a, b, kPermutations, 77, std::max<std::size_t>(threads, 2)).p_value;
  int significant = 0;
  for (int t = 0; t < kPowerTrials; ++t) {
    power_cohorts(rng, kPowerCohortSize, kPowerGap, a, b);
    if (permutation_test_auc(a, b, kPermutations, derive_seed(9, static_cast<std::uint64_t>(t)), threads).p_value <
        kPowerAlpha)
      ++significant;
  }
  const double elapsed = seconds_since(start);
  const bool ok = p_same == 1.0 && p1 == p2 && significant >= kPowerRequired && elapsed < kPermBudgetSeconds;
  return {ok, "identical cohorts p = " + fmt(p_same) + "; fixed seed p " + fmt(p1) + " == " + fmt(p2) + "; power " +
                  std::to_string(significant) + "/" + std::to_string(kPowerTrials) + " with p < 0.05; " +
                  fmt(elapsed, 1) + " s"};
}

Outcome end_to_end(const fs::path& work) {
  const auto start = Clock::now();
  const fs::path dir = work / "end_to_end";
  fs::remove_all(dir);
  const std::string threads = threads_flag();
  const std::uint64_t heldout_seed = derive_seed(kDataSeed, "held-out");

  run_cli({"simulate", "--n", std::to_string(kTrainScans), "--prevalence", format_double(kPrevalence), "--seed",
           std::to_string(kDataSeed), "--out", (dir / "train").string(), "--threads", threads});
  run_cli({"simulate", "--n", std::to_string(kHeldOutScans), "--prevalence", format_double(kPrevalence), "--seed",
           std::to_string(heldout_seed), "--out", (dir / "heldout").string(), "--threads", threads});
  const double t_data = seconds_since(start);
  run_cli({"train", "--data", (dir / "train").string(), "--folds", std::to_string(kFolds), "--dropout",
           format_double(kDropout), "--lr", format_double(kLearningRate), "--epochs", std::to_string(kEpochs),
           "--batch-size", std::to_string(kBatchSize), "--seed", std::to_string(kTrainSeed), "--out",
           (dir / "model").string(), "--threads", threads});
  const double t_train = seconds_since(start) - t_data;
  run_cli({"score", "--model", (dir / "model").string(), "--data", (dir / "heldout").string(), "--out",
           (dir / "nnet_scores.csv").string(), "--threads", threads});
  run_cli({"pancan", "--weights", (dir / "heldout" / "pancan_weights.txt").string(), "--features",
           (dir / "heldout" / "pancan_features.csv").string(), "--out", (dir / "pancan_scores.csv").string()});
  const fs::path labels = dir / "heldout" / "labels.csv";
  run_cli({"eval", "--scores", (dir / "nnet_scores.csv").string(), "--labels", labels.string(), "--report",
           (dir / "nnet_report.csv").string(), "--roc", (dir / "nnet_roc.csv").string()});
  run_cli({"eval", "--scores", (dir / "pancan_scores.csv").string(), "--labels", labels.string(), "--report",
           (dir / "pancan_report.csv").string()});
  const double elapsed = seconds_since(start);

  const LabelTable lt = read_labels(labels);
  const double nnet_auc = auc(join_cohort(read_scores(dir / "nnet_scores.csv"), lt));
  const double pancan_auc = auc(join_cohort(read_scores(dir / "pancan_scores.csv"), lt));
  std::size_t positives = 0;
  for (const auto& [id, l] : lt) positives += static_cast<std::size_t>(l);
  const bool ok = nnet_auc >= kMinEnsembleAuc && nnet_auc >= pancan_auc - kPanCanMargin &&
                  elapsed <= kEndToEndBudgetSeconds;
  return {ok, "held-out " + std::to_string(lt.size()) + " scans (" + std::to_string(positives) +
                  " positive): ensemble AUC " + fmt(nnet_auc) + ", PanCan AUC " + fmt(pancan_auc) + ", gap " +
                  fmt(pancan_auc - nnet_auc) + "; " + fmt(elapsed, 0) + " s total (data " + fmt(t_data, 0) +
                  " s, train " + fmt(t_train, 0) + " s, " + threads + " thread(s))"};
}

Outcome overfit(const fs::path&) {
  PhantomSpec spec;
  spec.seed = 31;
  spec.prevalence = 0.5;
  const double b0 = calibrate_intercept(spec);
  std::vector<PreparedScan> data;
  int pos = 0, neg = 0;
  for (std::size_t i = 0; static_cast<int>(data.size()) < kOverfitExamples; ++i) {
    PhantomScan s = generate_scan(spec, i, b0);
    int& count = s.label ? pos : neg;
    if (count >= kOverfitExamples / 2) continue;
    ++count;
    data.push_back(prepare_scan(s.scan_id, s.volume, s.candidates, s.label));
  }
  NNetConfig c;
  c.dropout_rate = 0.0;
  c.epochs = kOverfitEpochs;
  c.batch_size = kOverfitExamples;
  c.seed = 5;
  Rng rng(c.seed);
  std::size_t reached = 0;
  double best = 1e9;
  train(c, data, rng, [&](std::size_t epoch, double loss) {
    if (loss < kOverfitLoss && reached == 0) reached = epoch + 1;
    best = std::min(best, loss);
  });
  return {reached > 0, reached ? "mean BCE < 0.05 at epoch " + std::to_string(reached) + " (best " + sci(best) + ")"
                               : "best mean BCE " + fmt(best) + " after 500 epochs"};
}

Outcome pancan_conformance(const fs::path&) {
  PanCanWeights w;
  for (const auto& k : PanCanWeights::required_keys(NoduleType::Solid)) w.weights[k] = 0.0;
  PanCanFeatures f;
  f.diameter_mm = 9.0;
  f.age = 64;
  const double zero = nodule_score(f, w);
  w.weights["diameter_mm"] = std::log(9.0) / f.diameter_mm;
  const double ln9 = nodule_score(f, w);

  Rng rng(808);
  const PanCanWeights pw = placeholder_pancan_weights();
  int violations = 0, order_dependent = 0;
  for (int i = 0; i < kPanCanSets; ++i) {
    std::vector<PanCanFeatures> set;
    const int n = uniform_int(rng, 1, 8);
    for (int k = 0; k <= n; ++k) {
      PanCanFeatures g;
      g.age = 50 + 30 * uniform01(rng);
      g.sex = uniform01(rng) < 0.5 ? Sex::Male : Sex::Female;
      g.family_history = uniform01(rng) < 0.2;
      g.emphysema = uniform01(rng) < 0.3;
      g.nodule_count = n + 1;
      g.diameter_mm = 2 + 28 * uniform01(rng);
      g.nodule_type = static_cast<NoduleType>(uniform_int(rng, 0, 2));
      g.upper_lobe = uniform01(rng) < 0.5;
      g.spiculation = uniform01(rng) < 0.2;
      set.push_back(g);
    }
    const PanCanFeatures extra = set.back();
    set.pop_back();
    const double before = patient_score(set, pw);
    set.push_back(extra);
    const double after = patient_score(set, pw);
    if (after < before) ++violations;
    std::reverse(set.begin(), set.end());
    std::swap(set.front(), set[set.size() / 2]);
    if (patient_score(set, pw) != after) ++order_dependent;
  }
  const bool ok = zero == 0.5 && std::abs(ln9 - 0.9) <= kPanCanTolerance && violations == 0 && order_dependent == 0;
  return {ok, "zero weights -> " + format_double(zero) + "; sum ln 9 -> " + format_double(ln9) +
                  "; monotonicity violations " + std::to_string(violations) + "/" + std::to_string(kPanCanSets) +
                  ", order-dependent scores " + std::to_string(order_dependent)};
}

Outcome reproducibility(const fs::path& work) {
  const fs::path dir = work / "reproducibility";
  fs::remove_all(dir);
  run_cli({"simulate", "--n", "40", "--prevalence", "0.3", "--seed", "91", "--out", (dir / "data").string()});
  const fs::path data = dir / "data";
  std::vector<std::string> files;
  for (const std::string run : {"run1", "run2"}) {
    const fs::path r = dir / run;
    run_cli({"train", "--data", data.string(), "--folds", "2", "--epochs", "3", "--batch-size", "8", "--seed", "13",
             "--out", (r / "model").string(), "--threads", run == "run1" ? "1" : "2"});
    run_cli({"score", "--model", (r / "model").string(), "--data", data.string(), "--out", (r / "scores.csv").string()});
    run_cli({"eval", "--scores", (r / "scores.csv").string(), "--labels", (data / "labels.csv").string(),
             "--candidates", (data / "candidates.csv").string(), "--group-by", "lungrads", "--report",
             (r / "report.csv").string(), "--roc", (r / "roc.csv").string()});
  }
  bool identical = true;
  for (const char* f : {"scores.csv", "report.csv", "roc.csv", "model/fold_0.lrnn", "model/fold_1.lrnn"})
    identical = identical && slurp(dir / "run1" / f) == slurp(dir / "run2" / f);

  const fs::path weights = dir / "run1" / "model" / "fold_0.lrnn";
  const auto bytes = read_file_bytes(weights);
  const TrainedModel loaded = load_params(weights);
  const bool round_trip = serialize_params(loaded) == bytes;
  auto corrupt = bytes;
  corrupt[bytes.size() / 3] ^= 0x40;
  bool checksum_enforced = false;
  try {
    deserialize_params(corrupt);
  } catch (const ChecksumError&) {
    checksum_enforced = true;
  }
  const bool ok = identical && round_trip && checksum_enforced;
  return {ok, std::string("two train/score/eval runs byte-identical: ") + (identical ? "yes" : "NO") +
                  "; save/load bit-exact: " + (round_trip ? "yes" : "NO") +
                  "; corrupted byte rejected by checksum: " + (checksum_enforced ? "yes" : "NO")};
}

struct Criterion {
  int id;
  const char* title;
  std::function<Outcome(const fs::path&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "lungrisk_acceptance";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) work = argv[++i];
    else only.insert(std::stoi(a));
  }
  fs::create_directories(work);

  const std::vector<Criterion> criteria{
      {1, "gradient correctness", gradient_correctness},
      {2, "architecture conformance", architecture_conformance},
      {3, "multi-instance invariants", multi_instance_invariants},
      {4, "AUC dual oracle", auc_dual_oracle},
      {5, "permutation test", permutation_test},
      {6, "end-to-end synthetic experiment", end_to_end},
      {7, "overfit sanity", overfit},
      {8, "PanCan conformance", pancan_conformance},
      {9, "reproducibility", reproducibility},
  };
  int failed = 0;
  for (const Criterion& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    Outcome o;
    const auto start = Clock::now();
    try {
      o = c.run(work);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << c.id << " " << c.title << ": " << o.detail << " ["
              << fmt(seconds_since(start), 1) << " s]" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
