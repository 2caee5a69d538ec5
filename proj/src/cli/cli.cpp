#include <CLI11.hpp>

#include <ostream>

#include "lungrisk/cli.hpp"

namespace lungrisk::cli {

namespace {

void add_threads(CLI::App* cmd, std::optional<std::size_t>& threads) {
  cmd->add_option("--threads", threads, "Worker threads (default: LUNGRISK_THREADS or 1)");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Lung cancer risk from nodule candidates: simulate, train, score, evaluate, compare"};
  app.name("lungrisk");
  app.require_subcommand(1);

  SimulateArgs sim;
  auto* simulate = app.add_subcommand("simulate", "Generate a synthetic CT dataset");
  simulate->add_option("--n", sim.n, "Number of scans")->capture_default_str();
  simulate->add_option("--prevalence", sim.prevalence, "Target fraction of positive scans")->capture_default_str();
  simulate->add_option("--seed", sim.seed, "Random seed (required)");
  simulate->add_option("--dims", sim.dims, "Volume side length in voxels (1 mm)")->capture_default_str();
  simulate->add_option("--min-nodules", sim.min_nodules)->capture_default_str();
  simulate->add_option("--max-nodules", sim.max_nodules)->capture_default_str();
  simulate->add_option("--out", sim.out, "Output directory")->required();
  add_threads(simulate, sim.threads);

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train the network, one model per fold");
  train->add_option("--data", tr.data, "Dataset directory (volumes/, candidates.csv, labels.csv)")->required();
  train->add_option("--config", tr.config, "Base configuration file (flags override it)");
  train->add_option("--folds", tr.folds, "Cross-validation folds; 1 trains a single model")->capture_default_str();
  train->add_option("--dropout", tr.dropout);
  train->add_option("--lr", tr.learning_rate);
  train->add_option("--epochs", tr.epochs);
  train->add_option("--batch-size", tr.batch_size);
  train->add_option("--metadata-dim", tr.metadata_dim, "5, or 6 to include sphericity");
  train->add_option("--projection", tr.projection, "slice or mip");
  train->add_option("--seed", tr.seed, "Random seed (required)");
  train->add_option("--out", tr.out, "Model output directory")->required();
  add_threads(train, tr.threads);

  ScoreArgs sc;
  auto* score = app.add_subcommand("score", "Score scans with a trained ensemble");
  score->add_option("--model", sc.model, "Model directory from train")->required();
  score->add_option("--data", sc.data, "Dataset directory")->required();
  score->add_option("--scans", sc.scans, "File with one scan_id per line");
  score->add_option("--out", sc.out, "Output scores CSV")->required();
  add_threads(score, sc.threads);

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "AUC, ROC and operating-point metrics");
  eval->add_option("--scores", ev.scores)->required();
  eval->add_option("--labels", ev.labels)->required();
  eval->add_option("--candidates", ev.candidates, "Candidate CSV with a lungrads column");
  eval->add_option("--group-by", ev.group_by, "lungrads");
  eval->add_option("--spec", ev.specificity, "Target specificity")->capture_default_str();
  eval->add_option("--sens", ev.sensitivity, "Target sensitivity")->capture_default_str();
  eval->add_option("--report", ev.report, "Report CSV (metric,group,value)");
  eval->add_option("--roc", ev.roc, "ROC CSV (fpr,tpr,threshold)");

  CompareArgs cmp;
  auto* compare = app.add_subcommand("compare", "One-sided paired permutation test on AUC");
  compare->add_option("--a", cmp.a, "Scores of the model expected to be better")->required();
  compare->add_option("--b", cmp.b)->required();
  compare->add_option("--labels", cmp.labels)->required();
  compare->add_option("--perms", cmp.perms)->capture_default_str();
  compare->add_option("--seed", cmp.seed, "Random seed (required)");
  compare->add_option("--report", cmp.report);
  add_threads(compare, cmp.threads);

  PancanArgs pc;
  auto* pancan = app.add_subcommand("pancan", "PanCan logistic scores per scan");
  pancan->add_option("--weights", pc.weights)->required();
  pancan->add_option("--features", pc.features)->required();
  pancan->add_option("--agg", pc.aggregation, "max or mean")->capture_default_str();
  pancan->add_option("--out", pc.out)->required();

  std::vector<std::string> storage{"lungrisk"};
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& s : storage) argv.push_back(s.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "lungrisk: " << e.what() << "\n";
    if (app.get_subcommands().size() == 1) err << app.get_subcommands().front()->help();
    return kExitUsage;
  }

  try {
    if (simulate->parsed()) cmd_simulate(sim, out);
    else if (train->parsed()) cmd_train(tr, out);
    else if (score->parsed()) cmd_score(sc, out);
    else if (eval->parsed()) cmd_eval(ev, out);
    else if (compare->parsed()) cmd_compare(cmp, out);
    else if (pancan->parsed()) cmd_pancan(pc, out);
  } catch (const std::exception& e) {
    err << "lungrisk: error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return kExitOk;
}

}  // namespace lungrisk::cli
