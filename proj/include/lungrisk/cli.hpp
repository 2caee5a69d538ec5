#pragma once

// The lungrisk command line: simulate | train | score | eval | compare | pancan.
// Each subcommand is also callable directly with a filled-in argument struct.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "lungrisk/nnet.hpp"
#include "lungrisk/pancan.hpp"

namespace lungrisk::cli {

// Exit statuses.
inline constexpr int kExitOk = 0;
inline constexpr int kExitOther = 1;
inline constexpr int kExitUsage = 2;           // bad flags or configuration
inline constexpr int kExitDataConsistency = 3;  // inputs disagree with each other
inline constexpr int kExitIo = 4;              // missing or unwritable files
inline constexpr int kExitNumeric = 5;         // non-finite values during compute
inline constexpr int kExitFormat = 6;          // corrupt or unsupported file contents
inline constexpr int kExitDimension = 7;       // shape mismatches

int exit_code_for(const std::exception& e);

// --threads when given, else LUNGRISK_THREADS, else 1.
std::size_t resolve_threads(std::optional<std::size_t> flag);

struct SimulateArgs {
  std::size_t n = 100;
  double prevalence = 0.2;
  std::optional<std::uint64_t> seed;
  std::size_t dims = 96;
  int min_nodules = 1;
  int max_nodules = 4;
  std::filesystem::path out;
  std::optional<std::size_t> threads;
};

struct TrainArgs {
  std::filesystem::path data;
  std::optional<std::filesystem::path> config;
  std::size_t folds = 5;
  std::optional<double> dropout;
  std::optional<double> learning_rate;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch_size;
  std::optional<std::size_t> metadata_dim;
  std::optional<std::string> projection;
  std::optional<std::uint64_t> seed;
  std::filesystem::path out;
  std::optional<std::size_t> threads;
};

struct ScoreArgs {
  std::filesystem::path model;
  std::filesystem::path data;
  std::optional<std::filesystem::path> scans;  // one scan_id per line; default: every labeled scan
  std::filesystem::path out;
  std::optional<std::size_t> threads;
};

struct EvalArgs {
  std::filesystem::path scores;
  std::filesystem::path labels;
  std::optional<std::filesystem::path> candidates;  // Lung-RADS source for --group-by
  std::optional<std::string> group_by;
  double specificity = 0.80;
  double sensitivity = 0.84;
  std::optional<std::filesystem::path> report;
  std::optional<std::filesystem::path> roc;
};

struct CompareArgs {
  std::filesystem::path a, b, labels;
  std::size_t perms = 10000;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> report;
  std::optional<std::size_t> threads;
};

struct PancanArgs {
  std::filesystem::path weights;
  std::filesystem::path features;
  std::string aggregation = "max";
  std::filesystem::path out;
};

void cmd_simulate(const SimulateArgs& args, std::ostream& out);
void cmd_train(const TrainArgs& args, std::ostream& out);
void cmd_score(const ScoreArgs& args, std::ostream& out);
void cmd_eval(const EvalArgs& args, std::ostream& out);
void cmd_compare(const CompareArgs& args, std::ostream& out);
void cmd_pancan(const PancanArgs& args, std::ostream& out);

// Parses `args` (without the program name), runs the subcommand and returns
// the exit status. Diagnostics go to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace lungrisk::cli
