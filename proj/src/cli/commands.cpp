#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <ostream>
#include <sstream>
#include <thread>

#include "lungrisk/byte_io.hpp"
#include "lungrisk/candidates.hpp"
#include "lungrisk/cli.hpp"
#include "lungrisk/csv.hpp"
#include "lungrisk/errors.hpp"
#include "lungrisk/eval.hpp"
#include "lungrisk/synthdata.hpp"

namespace lungrisk::cli {

int exit_code_for(const std::exception& e) {
  const auto* err = dynamic_cast<const Error*>(&e);
  if (!err) return kExitOther;
  switch (err->kind()) {
    case ErrorKind::Usage:
    case ErrorKind::Config: return kExitUsage;
    case ErrorKind::DataConsistency: return kExitDataConsistency;
    case ErrorKind::Io: return kExitIo;
    case ErrorKind::Numeric: return kExitNumeric;
    case ErrorKind::Format: return kExitFormat;
    case ErrorKind::Dimension: return kExitDimension;
    case ErrorKind::Contract: return kExitOther;
  }
  return kExitOther;
}

std::size_t resolve_threads(std::optional<std::size_t> flag) {
  if (flag) {
    if (*flag == 0) throw UsageError("--threads must be at least 1");
    return *flag;
  }
  if (const char* env = std::getenv("LUNGRISK_THREADS"); env && *env) {
    long long n = 0;
    try {
      n = parse_int(env, "LUNGRISK_THREADS");
    } catch (const FormatError&) {
      throw UsageError(std::string("LUNGRISK_THREADS must be a positive integer, got '") + env + "'");
    }
    if (n < 1) throw UsageError("LUNGRISK_THREADS must be at least 1");
    return static_cast<std::size_t>(n);
  }
  return 1;
}

namespace {

template <class F>
void parallel_for(std::size_t n, std::size_t threads, F&& body) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        body(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t t = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  if (t == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < t; ++k) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::string id_list(const std::vector<std::string>& ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size() && i < 20; ++i) s += (i ? ", " : "") + ids[i];
  if (ids.size() > 20) s += " ... (" + std::to_string(ids.size()) + " total)";
  return s;
}

std::filesystem::path find_volume(const std::filesystem::path& data, const std::string& id) {
  for (const auto& dir : {data / "volumes", data})
    for (const char* ext : {".lrvol", ".mhd"}) {
      const auto p = dir / (id + ext);
      if (std::filesystem::exists(p)) return p;
    }
  throw DataConsistencyError("no volume found for scan '" + id + "' under " + data.string() +
                             " (expected volumes/" + id + ".lrvol or .mhd)");
}

void require_dir_writable(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir))
    throw IoError("cannot create output directory " + dir.string() + (ec ? ": " + ec.message() : ""));
  const auto probe = dir / ".lungrisk_write_probe";
  {
    std::ofstream f(probe);
    if (!f) throw IoError("output directory " + dir.string() + " is not writable");
  }
  std::filesystem::remove(probe, ec);
}

void require_file(const std::filesystem::path& p, const char* what) {
  if (!std::filesystem::is_regular_file(p)) throw IoError(std::string(what) + " not found: " + p.string());
}

// Prepares every requested scan; candidates referencing unlabeled scans are
// reported all at once.
std::vector<PreparedScan> load_scans(const std::filesystem::path& data, const std::vector<std::string>& ids,
                                     const LabelTable* labels, const PreprocessOptions& options,
                                     std::size_t threads) {
  require_file(data / "candidates.csv", "candidate file");
  const CandidateTable candidates = read_candidates(data / "candidates.csv");
  if (labels) {
    std::vector<std::string> unlabeled;
    for (const auto& [id, list] : candidates)
      if (!labels->count(id)) unlabeled.push_back(id);
    if (!unlabeled.empty())
      throw DataConsistencyError("label file is missing scans referenced by candidates: " + id_list(unlabeled));
  }
  std::vector<std::filesystem::path> paths;
  for (const std::string& id : ids) paths.push_back(find_volume(data, id));
  std::vector<PreparedScan> out(ids.size());
  parallel_for(ids.size(), threads, [&](std::size_t i) {
    const std::string& id = ids[i];
    const int label = labels ? labels->at(id) : 0;
    auto it = candidates.find(id);
    if (it == candidates.end() || it->second.empty()) {
      out[i] = PreparedScan{id, label, {}};
      return;
    }
    out[i] = prepare_scan(id, read_volume(paths[i]), it->second, label, options);
  });
  return out;
}

}  // namespace

// --- simulate ------------------------------------------------------------------

void cmd_simulate(const SimulateArgs& a, std::ostream& out) {
  if (!a.seed) throw UsageError("simulate: --seed is required");
  if (a.out.empty()) throw UsageError("simulate: --out is required");
  PhantomSpec spec;
  spec.n_scans = a.n;
  spec.prevalence = a.prevalence;
  spec.seed = *a.seed;
  spec.dims = {a.dims, a.dims, a.dims};
  spec.min_nodules = a.min_nodules;
  spec.max_nodules = a.max_nodules;
  spec.validate();
  require_dir_writable(a.out);
  const DatasetSummary s = write_dataset(spec, a.out, resolve_threads(a.threads));
  char hash[20];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(s.manifest_hash));
  out << "scans " << s.n_scans << "\n"
      << "positives " << s.positives << "\n"
      << "prevalence " << format_fixed(static_cast<double>(s.positives) / static_cast<double>(s.n_scans), 4) << "\n"
      << "nodules " << s.nodules << "\n"
      << "seed " << spec.seed << "\n"
      << "manifest_hash " << hash << "\n";
}

// --- train -----------------------------------------------------------------------

void cmd_train(const TrainArgs& a, std::ostream& out) {
  if (!a.seed) throw UsageError("train: --seed is required");
  if (a.data.empty() || a.out.empty()) throw UsageError("train: --data and --out are required");
  if (a.folds < 1) throw UsageError("train: --folds must be at least 1");
  NNetConfig config = a.config ? read_nnet_config(*a.config) : NNetConfig{};
  if (a.dropout) config.dropout_rate = *a.dropout;
  if (a.learning_rate) config.learning_rate = *a.learning_rate;
  if (a.epochs) config.epochs = *a.epochs;
  if (a.batch_size) config.batch_size = *a.batch_size;
  if (a.metadata_dim) config.metadata_dim = *a.metadata_dim;
  if (a.projection) {
    if (*a.projection == "slice") config.projection = Projection::CentralSlice;
    else if (*a.projection == "mip") config.projection = Projection::MaxIntensity;
    else throw UsageError("train: --projection must be slice or mip");
  }
  config.seed = *a.seed;
  config.validate();
  require_file(a.data / "labels.csv", "label file");
  require_dir_writable(a.out);
  const std::size_t threads = resolve_threads(a.threads);

  const LabelTable labels = read_labels(a.data / "labels.csv");
  std::vector<std::string> ids;
  for (const auto& [id, l] : labels) ids.push_back(id);
  const std::vector<PreparedScan> dataset = load_scans(a.data, ids, &labels, config.preprocess_options(), threads);

  std::ostringstream run;
  run << config.to_text() << "# folds = " << a.folds << "\n# data = " << a.data.string() << "\n# scans = " << ids.size()
      << '\n';
  out << "resolved configuration\n" << run.str();
  write_text_file(a.out / "config.txt", run.str());

  const KFoldResult result = kfold_train(config, dataset, a.folds, threads);
  std::string log = "fold,epoch,loss\n";
  for (std::size_t f = 0; f < result.loss_histories.size(); ++f)
    for (std::size_t e = 0; e < result.loss_histories[f].size(); ++e)
      log += std::to_string(f) + "," + std::to_string(e) + "," + format_double(result.loss_histories[f][e]) + "\n";
  write_text_file(a.out / "training_log.csv", log);
  std::string folds = "scan_id,fold\n";
  for (std::size_t i = 0; i < dataset.size(); ++i)
    folds += dataset[i].scan_id + "," + std::to_string(result.fold_of_example[i]) + "\n";
  write_text_file(a.out / "folds.csv", folds);
  for (std::size_t f = 0; f < result.ensemble.members.size(); ++f) {
    save_params(result.ensemble.members[f], a.out / ("fold_" + std::to_string(f) + ".lrnn"));
    out << "fold " << f << " final loss " << format_fixed(result.loss_histories[f].back(), 4) << "\n";
  }
  out << "wrote " << result.ensemble.members.size() << " weight files to " << a.out.string() << "\n";
}

// --- score -------------------------------------------------------------------------

namespace {

struct LoadedModel {
  FoldEnsemble ensemble;
  Projection projection = Projection::CentralSlice;
};

LoadedModel load_model(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("model directory not found: " + dir.string());
  LoadedModel m;
  if (std::filesystem::exists(dir / "config.txt")) m.projection = read_nnet_config(dir / "config.txt").projection;
  for (std::size_t f = 0;; ++f) {
    const auto p = dir / ("fold_" + std::to_string(f) + ".lrnn");
    if (!std::filesystem::exists(p)) break;
    m.ensemble.members.push_back(load_params(p));
  }
  if (m.ensemble.members.empty()) throw IoError("no weight files (fold_0.lrnn, ...) in " + dir.string());
  return m;
}

std::vector<std::string> read_scan_list(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open scan list " + p.string());
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    const std::string id(trim(line.substr(0, line.find(','))));
    if (id.empty() || id[0] == '#' || id == "scan_id") continue;
    ids.push_back(id);
  }
  return ids;
}

}  // namespace

void cmd_score(const ScoreArgs& a, std::ostream& out) {
  if (a.model.empty() || a.data.empty() || a.out.empty()) throw UsageError("score: --model, --data and --out are required");
  const std::size_t threads = resolve_threads(a.threads);
  const LoadedModel model = load_model(a.model);
  std::vector<std::string> ids;
  if (a.scans) {
    ids = read_scan_list(*a.scans);
  } else if (std::filesystem::exists(a.data / "labels.csv")) {
    for (const auto& [id, l] : read_labels(a.data / "labels.csv")) ids.push_back(id);
  } else {
    require_file(a.data / "candidates.csv", "candidate file");
    for (const auto& [id, l] : read_candidates(a.data / "candidates.csv")) ids.push_back(id);
  }
  if (ids.empty()) throw DataConsistencyError("score: no scans to score");
  PreprocessOptions opt;
  opt.projection = model.projection;
  opt.metadata_dim = model.ensemble.members.front().params.metadata_dim();
  const std::vector<PreparedScan> scans = load_scans(a.data, ids, nullptr, opt, threads);

  std::vector<double> scores(scans.size());
  std::vector<char> empty(scans.size(), 0);
  parallel_for(scans.size(), threads, [&](std::size_t i) {
    bool none = false;
    scores[i] = ensemble_predict(model.ensemble, scans[i], model.projection, &none);
    empty[i] = none;
  });
  ScoreTable table;
  std::size_t n_empty = 0;
  for (std::size_t i = 0; i < scans.size(); ++i) {
    if (!table.emplace(scans[i].scan_id, scores[i]).second)
      throw DataConsistencyError("score: scan " + scans[i].scan_id + " listed twice");
    n_empty += static_cast<std::size_t>(empty[i]);
  }
  write_scores(a.out, table);
  out << "scored " << table.size() << " scans with " << model.ensemble.members.size() << " models";
  if (n_empty) out << " (" << n_empty << " without nodule candidates scored 0)";
  out << "\n";
}

// --- eval / compare -----------------------------------------------------------------

void cmd_eval(const EvalArgs& a, std::ostream& out) {
  if (a.scores.empty() || a.labels.empty()) throw UsageError("eval: --scores and --labels are required");
  if (a.group_by && *a.group_by != "lungrads") throw UsageError("eval: --group-by supports only 'lungrads'");
  if (a.group_by && !a.candidates) throw UsageError("eval: --group-by lungrads needs --candidates with a lungrads column");
  const ScoreTable scores = read_scores(a.scores);
  const LabelTable labels = read_labels(a.labels);
  std::optional<CandidateTable> cands;
  if (a.candidates) cands = read_candidates(*a.candidates);
  const ScoredCohort cohort = join_cohort(scores, labels, cands ? &*cands : nullptr);
  const std::size_t pos = cohort.positives();
  if (pos == 0 || pos == cohort.size())
    throw DegenerateCohortError("eval: the cohort has " + std::to_string(pos) + " positive and " +
                                std::to_string(cohort.size() - pos) +
                                " negative scans; AUC and operating points need both classes");
  const GroupMetrics overall = overall_metrics(cohort, a.specificity, a.sensitivity);
  const std::vector<GroupMetrics> groups =
      a.group_by ? grouped_metrics(cohort, a.specificity, a.sensitivity) : std::vector<GroupMetrics>{};
  std::vector<ReportRow> rows = evaluation_rows(overall, groups);
  rows.insert(rows.begin(), {{"target_specificity", "all", a.specificity}, {"target_sensitivity", "all", a.sensitivity}});
  out << format_report_text(rows);
  if (a.report) write_report_csv(*a.report, rows);
  if (a.roc) write_roc_csv(*a.roc, roc_curve(cohort));
}

void cmd_compare(const CompareArgs& a, std::ostream& out) {
  if (!a.seed) throw UsageError("compare: --seed is required");
  if (a.a.empty() || a.b.empty() || a.labels.empty()) throw UsageError("compare: --a, --b and --labels are required");
  const LabelTable labels = read_labels(a.labels);
  const ScoredCohort ca = join_cohort(read_scores(a.a), labels);
  const ScoredCohort cb = join_cohort(read_scores(a.b), labels);
  const PermutationResult r = permutation_test_auc(ca, cb, a.perms, *a.seed, resolve_threads(a.threads));
  const auto rows = comparison_rows(r);
  out << format_report_text(rows);
  out << "one-sided p-value (a better than b): " << format_fixed(r.p_value, 4) << "\n";
  if (a.report) write_report_csv(*a.report, rows);
}

// --- pancan --------------------------------------------------------------------------

void cmd_pancan(const PancanArgs& a, std::ostream& out) {
  if (a.weights.empty() || a.features.empty() || a.out.empty())
    throw UsageError("pancan: --weights, --features and --out are required");
  const Aggregation agg = parse_aggregation(a.aggregation);
  const PanCanWeights w = read_pancan_weights(a.weights);
  const PanCanTable features = read_pancan_features(a.features);
  ScoreTable table;
  for (const auto& [id, nodules] : features) table[id] = patient_score(nodules, w, agg);
  write_scores(a.out, table);
  out << "scored " << table.size() << " scans (" << a.aggregation << " aggregation)\n";
}

}  // namespace lungrisk::cli
