#pragma once

// The deep-and-wide multi-instance network. One weight-shared branch scores
// each nodule patch; the scan risk is the maximum over unmasked branches.
//
//   row  2  conv1  + BN + ReLU        8x28x28
//   row  3  conv2  + BN + ReLU        8x28x28
//   row  4  conv3  + BN + ReLU        8x28x28
//   row  5  conv_skip + BN (raw input) 8x28x28
//   row  6  add(4, 5) + BN + ReLU     8x28x28
//   row  7  dropout + BN, flatten     6272
//   row  8  dense1 + BN + ReLU        64
//   row  9  dropout + BN              64
//   row 10  dense2 + BN + ReLU        64
//   row 14  concat with metadata      64 + metadata_dim
//   row 15  dense_out + sigmoid       1
//   row 16  max over branches         1

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "lungrisk/adam.hpp"
#include "lungrisk/autodiff.hpp"
#include "lungrisk/ops.hpp"
#include "lungrisk/preprocess.hpp"

namespace lungrisk {

inline constexpr std::size_t kConvChannels = 8;
inline constexpr std::size_t kDenseUnits = 64;
inline constexpr std::size_t kFlatFeatures = kConvChannels * kCropSide * kCropSide;

struct NNetConfig {
  double dropout_rate = 0.25;
  std::size_t metadata_dim = 5;
  double learning_rate = 1e-3;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::size_t n_branches = kMaxNodules;
  Projection projection = Projection::CentralSlice;

  void validate() const;
  PreprocessOptions preprocess_options() const;
  // key = value lines, the same keys read_nnet_config accepts.
  std::string to_text() const;
};

// Keys: dropout_rate, metadata_dim, learning_rate, epochs, batch_size, seed,
// n_branches, projection (slice|mip). '#' starts a comment.
NNetConfig parse_nnet_config(const std::string& text, const std::string& source = "config");
NNetConfig read_nnet_config(const std::filesystem::path& path);

struct ConvLayer {
  Tensor kernels;  // 8 x C x 3 x 3
  Tensor bias;     // 8
};

struct DenseLayer {
  Tensor weights;  // in x out
  Tensor bias;     // out
};

struct NNetParams {
  ConvLayer conv1, conv2, conv3, conv_skip;
  BatchNormState bn1, bn2, bn3, bn_skip, bn_merge, bn_drop1, bn_dense1, bn_drop2, bn_dense2;
  DenseLayer dense1, dense2, dense_out;

  std::size_t metadata_dim() const { return dense_out.weights.dim(0) - kDenseUnits; }

  // Visits every tensor in a fixed order: f(name, tensor, learnable).
  template <class F>
  void for_each_tensor(F&& f);
  template <class F>
  void for_each_tensor(F&& f) const;

  std::vector<NamedParam> learnable();
  std::vector<BatchNormState*> batch_norms();

  friend bool operator==(const NNetParams& a, const NNetParams& b);
};

// He-style uniform fan-in initialization; BN at identity.
NNetParams init_params(const NNetConfig& config, Rng& rng);

struct TrainedModel {
  NNetParams params;
  MetadataStats metadata_stats;
};

struct FoldEnsemble {
  std::vector<TrainedModel> members;
};

// --- forward -----------------------------------------------------------------

struct ShapeTraceEntry {
  std::string layer;
  Shape shape;  // per branch
};

struct ForwardOptions {
  Mode mode = Mode::Infer;
  double dropout_rate = 0.0;
  Rng* rng = nullptr;                              // required for dropout > 0 in train mode
  std::vector<BatchStats>* batch_stats = nullptr;  // train mode: one entry per BN layer
  std::vector<ShapeTraceEntry>* trace = nullptr;
  std::vector<Tensor>* relu_inputs = nullptr;     // diagnostics: pre-activation of every ReLU
};

// Unmasked branches of a set of scans, stacked for one batched pass.
struct BranchBatch {
  Tensor planes;    // N x 3 x 28 x 28
  Tensor metadata;  // N x metadata_dim
  std::vector<std::size_t> scan_of_branch;
  std::size_t n_scans = 0;

  static BranchBatch from_examples(const std::vector<const ScanExample*>& examples, std::size_t metadata_dim);
  std::size_t size() const { return scan_of_branch.size(); }
};

// Registers the parameters on `g` and returns the N x 1 branch scores.
Graph::Var forward_branches(Graph& g, const NNetParams& params, const BranchBatch& batch,
                            const ForwardOptions& options);

double forward_branch(const NNetParams& params, const NodulePatch& patch, const ForwardOptions& options = {});

struct ScanRisk {
  double risk = 0.0;
  bool no_nodules = false;  // all branches masked; risk is 0 by convention
};

ScanRisk forward_scan(const NNetParams& params, const ScanExample& example, const ForwardOptions& options = {});

// Layer-by-layer output shapes of one branch plus the scan-level pooling.
std::vector<ShapeTraceEntry> shape_trace(const NNetParams& params);

// --- training ----------------------------------------------------------------

struct LossAndGradients {
  double loss = 0.0;
  std::vector<Tensor> gradients;  // aligned with NNetParams::learnable()
  std::vector<BatchStats> batch_stats;
  bool has_gradient = false;      // false when every scan in the batch is masked
};

// Mean BCE of scan risks against labels. Train mode uses batch statistics and
// does not touch the running statistics.
LossAndGradients loss_and_gradients(NNetParams& params, const std::vector<ScanExample>& batch,
                                    const ForwardOptions& options);
double batch_loss(const NNetParams& params, const std::vector<ScanExample>& batch, const ForwardOptions& options);

struct TrainResult {
  TrainedModel model;
  std::vector<double> loss_history;  // mean BCE per epoch
};

using EpochCallback = std::function<void(std::size_t epoch, double mean_loss)>;

TrainResult train(const NNetConfig& config, const std::vector<PreparedScan>& dataset, Rng& rng,
                  const EpochCallback& on_epoch = {});

// Stratified fold index per example; deterministic given rng state.
std::vector<std::size_t> stratified_folds(const std::vector<int>& labels, std::size_t k, Rng& rng);

struct KFoldResult {
  FoldEnsemble ensemble;
  std::vector<std::size_t> fold_of_example;
  std::vector<std::vector<double>> loss_histories;
};

// Member f is trained on every fold except f with seed derive_seed(config.seed, f).
// Folds run on up to `threads` threads with identical results.
KFoldResult kfold_train(const NNetConfig& config, const std::vector<PreparedScan>& dataset, std::size_t k,
                        std::size_t threads = 1,
                        const std::function<void(std::size_t fold, std::size_t epoch, double loss)>& on_epoch = {});

double ensemble_mean(const std::vector<double>& member_outputs);
// Mean of member risks, each member standardizing metadata with its own stats.
double ensemble_predict(const FoldEnsemble& ensemble, const PreparedScan& scan, Projection projection,
                        bool* no_nodules = nullptr);

// --- persistence ---------------------------------------------------------------
//
// "LRNN1", u16 version, u32 tensor count, manifest (u16 name length, name,
// u8 rank, u32 dims), f64 payload in manifest order, u32 CRC-32 of all
// preceding bytes. Little-endian throughout.

inline constexpr std::uint16_t kWeightFormatVersion = 1;

void save_params(const TrainedModel& model, const std::filesystem::path& path);
TrainedModel load_params(const std::filesystem::path& path);
std::vector<unsigned char> serialize_params(const TrainedModel& model);
TrainedModel deserialize_params(const std::vector<unsigned char>& bytes, const std::string& source = "weights");

// --- template definitions --------------------------------------------------------

namespace detail {
template <class P, class F>
void visit_params(P& p, F&& f) {
  auto conv = [&](const char* n, auto& layer) {
    f(std::string(n) + ".kernels", layer.kernels, true);
    f(std::string(n) + ".bias", layer.bias, true);
  };
  auto dense = [&](const char* n, auto& layer) {
    f(std::string(n) + ".weights", layer.weights, true);
    f(std::string(n) + ".bias", layer.bias, true);
  };
  auto bn = [&](const char* n, auto& s) {
    f(std::string(n) + ".gamma", s.gamma, true);
    f(std::string(n) + ".beta", s.beta, true);
    f(std::string(n) + ".running_mean", s.running_mean, false);
    f(std::string(n) + ".running_var", s.running_var, false);
  };
  conv("conv1", p.conv1);
  bn("bn1", p.bn1);
  conv("conv2", p.conv2);
  bn("bn2", p.bn2);
  conv("conv3", p.conv3);
  bn("bn3", p.bn3);
  conv("conv_skip", p.conv_skip);
  bn("bn_skip", p.bn_skip);
  bn("bn_merge", p.bn_merge);
  bn("bn_drop1", p.bn_drop1);
  dense("dense1", p.dense1);
  bn("bn_dense1", p.bn_dense1);
  bn("bn_drop2", p.bn_drop2);
  dense("dense2", p.dense2);
  bn("bn_dense2", p.bn_dense2);
  dense("dense_out", p.dense_out);
}
}  // namespace detail

template <class F>
void NNetParams::for_each_tensor(F&& f) {
  detail::visit_params(*this, f);
}
template <class F>
void NNetParams::for_each_tensor(F&& f) const {
  detail::visit_params(*this, f);
}

}  // namespace lungrisk
