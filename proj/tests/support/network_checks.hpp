#pragma once

// Whole-network checks shared by the unit tests and the acceptance suite:
// finite-difference gradients, multi-instance invariants, shape manifest.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "lungrisk/nnet.hpp"
#include "op_gradchecks.hpp"

namespace lungrisk::testing {

inline NodulePatch random_patch(Rng& rng, std::size_t metadata_dim) {
  NodulePatch p;
  p.planes = random_tensor({3, kCropSide, kCropSide}, rng, 0.0, 1.0);
  p.metadata.resize(metadata_dim);
  for (double& v : p.metadata) v = normal01(rng);
  p.masked = false;
  return p;
}

inline ScanExample random_example(Rng& rng, std::size_t n_unmasked, std::size_t metadata_dim, int label = 0) {
  ScanExample e;
  e.label = label;
  for (std::size_t i = 0; i < kMaxNodules; ++i)
    e.patches.push_back(i < n_unmasked ? random_patch(rng, metadata_dim) : NodulePatch::masked_slot(metadata_dim));
  return e;
}

// Initialized weights with BN layers moved away from identity.
inline NNetParams random_params(Rng& rng, std::size_t metadata_dim = 5) {
  NNetConfig c;
  c.metadata_dim = metadata_dim;
  NNetParams p = init_params(c, rng);
  for (BatchNormState* bn : p.batch_norms()) {
    for (double& v : bn->gamma.values()) v = 0.5 + uniform01(rng);
    for (double& v : bn->beta.values()) v = uniform01(rng) - 0.5;
    for (double& v : bn->running_mean.values()) v = 0.2 * normal01(rng);
    for (double& v : bn->running_var.values()) v = 0.5 + uniform01(rng);
  }
  return p;
}

// Loss plus the piecewise-linear "region" it was evaluated in: the sign of
// every ReLU input and the winning branch of every scan.
struct RegionLoss {
  double loss = 0.0;
  std::vector<bool> region;
};

inline RegionLoss region_loss(const NNetParams& params, const std::vector<ScanExample>& batch,
                              const ForwardOptions& options) {
  std::vector<const ScanExample*> ptrs;
  std::vector<int> labels;
  for (const auto& e : batch) {
    ptrs.push_back(&e);
    labels.push_back(e.label);
  }
  const BranchBatch b = BranchBatch::from_examples(ptrs, params.metadata_dim());
  std::vector<Tensor> pre;
  ForwardOptions o = options;
  o.relu_inputs = &pre;
  Graph g;
  Graph::Var scores = forward_branches(g, params, b, o);
  Graph::Var loss = g.bce_mean(g.group_max(scores, b.scan_of_branch, b.n_scans, 0.0), labels);
  RegionLoss out;
  out.loss = g.value(loss)[0];
  for (const Tensor& t : pre)
    for (double v : t.values()) out.region.push_back(v > 0.0);
  std::vector<double> best(b.n_scans, -1.0);
  std::vector<std::size_t> arg(b.n_scans, 0);
  for (std::size_t i = 0; i < b.size(); ++i)
    if (g.value(scores)[i] > best[b.scan_of_branch[i]]) {
      best[b.scan_of_branch[i]] = g.value(scores)[i];
      arg[b.scan_of_branch[i]] = i;
    }
  for (std::size_t a : arg)
    for (int bit = 0; bit < 16; ++bit) out.region.push_back((a >> bit) & 1u);
  return out;
}

struct NetworkGradcheck {
  double max_error = 0.0;
  std::size_t probes = 0;
  std::size_t kinks_skipped = 0;  // probes whose +-h step crossed a ReLU or max boundary
};

// One instance: two scans with a few live branches each, train-mode BN,
// dropout off. Every learnable tensor is probed at `per_tensor` random entries.
// A central difference straddling a ReLU kink measures the average of two
// one-sided slopes rather than the derivative, so such probes are redrawn.
inline NetworkGradcheck network_gradcheck_instance(Rng& rng, std::size_t per_tensor = 4) {
  NNetParams params = random_params(rng);
  std::vector<ScanExample> batch{random_example(rng, 2 + uniform_int(rng, 0, 2), 5, 1),
                                 random_example(rng, 2 + uniform_int(rng, 0, 2), 5, 0)};
  ForwardOptions opt;
  opt.mode = Mode::Train;
  const LossAndGradients lg = loss_and_gradients(params, batch, opt);
  const std::vector<bool> base_region = region_loss(params, batch, opt).region;
  std::vector<NamedParam> learnable = params.learnable();
  NetworkGradcheck out;
  for (std::size_t k = 0; k < learnable.size(); ++k) {
    Tensor& t = *learnable[k].tensor;
    std::size_t accepted = 0;
    for (std::size_t attempt = 0; accepted < std::min(per_tensor, t.size()) && attempt < 20 * per_tensor; ++attempt) {
      const auto i = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(t.size() - 1)));
      const double orig = t[i];
      t[i] = orig + kFdStep;
      const RegionLoss up = region_loss(params, batch, opt);
      t[i] = orig - kFdStep;
      const RegionLoss down = region_loss(params, batch, opt);
      t[i] = orig;
      if (up.region != base_region || down.region != base_region) {
        ++out.kinks_skipped;
        continue;
      }
      const double numeric = (up.loss - down.loss) / (2.0 * kFdStep);
      out.max_error = std::max(out.max_error, relative_error(lg.gradients[k][i], numeric));
      ++accepted;
      ++out.probes;
    }
  }
  return out;
}

struct InstanceInvariants {
  bool permutation_exact = true;
  bool masked_noop_exact = true;
  double max_pool_error = 0.0;
};

// Randomized scan; checks permutation invariance, masked-slot no-op and
// that adding a patch yields max(previous risk, new branch score).
inline InstanceInvariants multi_instance_case(const NNetParams& params, Rng& rng) {
  InstanceInvariants out;
  const std::size_t md = params.metadata_dim();
  const std::size_t n = static_cast<std::size_t>(uniform_int(rng, 1, static_cast<int>(kMaxNodules) - 1));
  ScanExample base = random_example(rng, n, md);
  const double risk = forward_scan(params, base).risk;

  ScanExample shuffled = base;
  for (std::size_t i = shuffled.patches.size(); i > 1; --i)
    std::swap(shuffled.patches[i - 1], shuffled.patches[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(i - 1)))]);
  out.permutation_exact = forward_scan(params, shuffled).risk == risk;

  // masked slots carry garbage content that must be ignored
  ScanExample noisy = base;
  for (std::size_t i = n; i < kMaxNodules; ++i) {
    noisy.patches[i] = random_patch(rng, md);
    noisy.patches[i].masked = true;
  }
  out.masked_noop_exact = forward_scan(params, noisy).risk == risk;

  ScanExample grown = base;
  const NodulePatch extra = random_patch(rng, md);
  grown.patches[n] = extra;
  const double expected = std::max(risk, forward_branch(params, extra));
  out.max_pool_error = std::abs(forward_scan(params, grown).risk - expected);
  return out;
}

// Per-branch output shapes the architecture must produce, then pooling.
inline std::vector<ShapeTraceEntry> expected_shape_manifest(std::size_t metadata_dim) {
  const Shape image{kConvChannels, kCropSide, kCropSide};
  return {{"input", {3, kCropSide, kCropSide}},
          {"conv1", image},
          {"conv2", image},
          {"conv3", image},
          {"conv_skip", image},
          {"merge", image},
          {"dropout1", image},
          {"flatten", {kFlatFeatures}},
          {"dense1", {kDenseUnits}},
          {"dropout2", {kDenseUnits}},
          {"dense2", {kDenseUnits}},
          {"concat", {kDenseUnits + metadata_dim}},
          {"output", {1}},
          {"branches", {kMaxNodules}},
          {"global_max", {1}}};
}

inline bool same_manifest(const std::vector<ShapeTraceEntry>& a, const std::vector<ShapeTraceEntry>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].layer != b[i].layer || a[i].shape != b[i].shape) return false;
  return true;
}

}  // namespace lungrisk::testing
