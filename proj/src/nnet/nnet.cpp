#include "lungrisk/nnet.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "lungrisk/csv.hpp"
#include "lungrisk/errors.hpp"

namespace lungrisk {

// --- config --------------------------------------------------------------------

void NNetConfig::validate() const {
  validate_dropout_rate(dropout_rate);
  if (metadata_dim != 5 && metadata_dim != 6) throw ConfigError("metadata_dim must be 5 or 6");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (n_branches != kMaxNodules) throw ConfigError("n_branches is fixed at 10");
}

PreprocessOptions NNetConfig::preprocess_options() const {
  PreprocessOptions o;
  o.projection = projection;
  o.metadata_dim = metadata_dim;
  return o;
}

std::string NNetConfig::to_text() const {
  std::ostringstream os;
  os << "dropout_rate = " << format_double(dropout_rate) << '\n'
     << "metadata_dim = " << metadata_dim << '\n'
     << "learning_rate = " << format_double(learning_rate) << '\n'
     << "epochs = " << epochs << '\n'
     << "batch_size = " << batch_size << '\n'
     << "seed = " << seed << '\n'
     << "n_branches = " << n_branches << '\n'
     << "projection = " << (projection == Projection::CentralSlice ? "slice" : "mip") << '\n';
  return os.str();
}

NNetConfig parse_nnet_config(const std::string& text, const std::string& source) {
  NNetConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  auto unsigned_value = [](const std::string& v, const std::string& ctx) {
    const long long x = parse_int(v, ctx);
    if (x < 0) throw ConfigError(ctx + ": value must be non-negative");
    return static_cast<std::size_t>(x);
  };
  while (std::getline(in, line)) {
    ++line_no;
    const std::string body = line.substr(0, line.find('#'));
    std::string_view view = trim(body);
    if (view.empty()) continue;
    const auto eq = view.find('=');
    const std::string ctx = source + ":" + std::to_string(line_no);
    if (eq == std::string_view::npos) throw ConfigError(ctx + ": expected key = value");
    const std::string key(trim(view.substr(0, eq)));
    const std::string value(trim(view.substr(eq + 1)));
    try {
      if (key == "dropout_rate") c.dropout_rate = parse_double(value, ctx);
      else if (key == "metadata_dim") c.metadata_dim = unsigned_value(value, ctx);
      else if (key == "learning_rate") c.learning_rate = parse_double(value, ctx);
      else if (key == "epochs") c.epochs = unsigned_value(value, ctx);
      else if (key == "batch_size") c.batch_size = unsigned_value(value, ctx);
      else if (key == "seed") c.seed = static_cast<std::uint64_t>(unsigned_value(value, ctx));
      else if (key == "n_branches") c.n_branches = unsigned_value(value, ctx);
      else if (key == "projection") {
        if (value == "slice") c.projection = Projection::CentralSlice;
        else if (value == "mip") c.projection = Projection::MaxIntensity;
        else throw ConfigError(ctx + ": projection must be slice or mip");
      } else {
        throw ConfigError(ctx + ": unknown key '" + key + "'");
      }
    } catch (const FormatError& e) {
      throw ConfigError(e.what());
    }
  }
  c.validate();
  return c;
}

NNetConfig read_nnet_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_nnet_config(ss.str(), path.string());
}

// --- parameters ------------------------------------------------------------------

std::vector<NamedParam> NNetParams::learnable() {
  std::vector<NamedParam> out;
  for_each_tensor([&](const std::string& name, Tensor& t, bool learn) {
    if (learn) out.push_back({name, &t});
  });
  return out;
}

std::vector<BatchNormState*> NNetParams::batch_norms() {
  return {&bn1, &bn2, &bn3, &bn_skip, &bn_merge, &bn_drop1, &bn_dense1, &bn_drop2, &bn_dense2};
}

bool operator==(const NNetParams& a, const NNetParams& b) {
  std::vector<const Tensor*> ta, tb;
  a.for_each_tensor([&](const std::string&, const Tensor& t, bool) { ta.push_back(&t); });
  b.for_each_tensor([&](const std::string&, const Tensor& t, bool) { tb.push_back(&t); });
  for (std::size_t i = 0; i < ta.size(); ++i)
    if (!(*ta[i] == *tb[i])) return false;
  return true;
}

namespace {

Tensor he_uniform(const Shape& shape, std::size_t fan_in, Rng& rng) {
  Tensor t(shape);
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (double& v : t.values()) v = (2.0 * uniform01(rng) - 1.0) * limit;
  return t;
}

ConvLayer init_conv(std::size_t in_channels, Rng& rng) {
  return {he_uniform({kConvChannels, in_channels, 3, 3}, in_channels * 9, rng), Tensor({kConvChannels})};
}

DenseLayer init_dense(std::size_t in, std::size_t out, Rng& rng) {
  return {he_uniform({in, out}, in, rng), Tensor({out})};
}

}  // namespace

NNetParams init_params(const NNetConfig& config, Rng& rng) {
  config.validate();
  NNetParams p;
  p.conv1 = init_conv(3, rng);
  p.conv2 = init_conv(kConvChannels, rng);
  p.conv3 = init_conv(kConvChannels, rng);
  p.conv_skip = init_conv(3, rng);
  p.dense1 = init_dense(kFlatFeatures, kDenseUnits, rng);
  p.dense2 = init_dense(kDenseUnits, kDenseUnits, rng);
  p.dense_out = init_dense(kDenseUnits + config.metadata_dim, 1, rng);
  for (BatchNormState* bn : {&p.bn1, &p.bn2, &p.bn3, &p.bn_skip, &p.bn_merge, &p.bn_drop1})
    *bn = BatchNormState::fresh(kConvChannels);
  for (BatchNormState* bn : {&p.bn_dense1, &p.bn_drop2, &p.bn_dense2}) *bn = BatchNormState::fresh(kDenseUnits);
  return p;
}

// --- forward -----------------------------------------------------------------------

BranchBatch BranchBatch::from_examples(const std::vector<const ScanExample*>& examples, std::size_t metadata_dim) {
  BranchBatch b;
  b.n_scans = examples.size();
  std::vector<const NodulePatch*> live;
  for (std::size_t s = 0; s < examples.size(); ++s)
    for (const NodulePatch& p : examples[s]->patches)
      if (!p.masked) {
        live.push_back(&p);
        b.scan_of_branch.push_back(s);
      }
  if (live.empty()) return b;
  const std::size_t plane = 3 * kCropSide * kCropSide;
  b.planes = Tensor({live.size(), 3, kCropSide, kCropSide});
  b.metadata = Tensor({live.size(), metadata_dim});
  for (std::size_t i = 0; i < live.size(); ++i) {
    if (live[i]->planes.size() != plane) throw DimensionError("branch input must be 3 x 28 x 28");
    if (live[i]->metadata.size() != metadata_dim)
      throw DimensionError("branch metadata has " + std::to_string(live[i]->metadata.size()) +
                           " features, network expects " + std::to_string(metadata_dim));
    std::copy_n(live[i]->planes.data(), plane, b.planes.data() + i * plane);
    std::copy_n(live[i]->metadata.data(), metadata_dim, b.metadata.data() + i * metadata_dim);
  }
  return b;
}

Graph::Var forward_branches(Graph& g, const NNetParams& p, const BranchBatch& batch, const ForwardOptions& o) {
  using Var = Graph::Var;
  if (batch.size() == 0) throw ContractError("forward_branches: no unmasked branches");
  const std::size_t n = batch.size();
  const bool train = o.mode == Mode::Train;
  if (train && o.dropout_rate > 0.0 && o.rng == nullptr)
    throw ContractError("forward_branches: train-mode dropout needs an rng");
  validate_dropout_rate(o.dropout_rate);

  auto trace = [&](const char* layer, Var v) {
    if (!o.trace) return;
    Shape s = g.value(v).shape();
    s.erase(s.begin());
    o.trace->push_back({layer, s});
  };
  auto conv = [&](Var x, const ConvLayer& l, const std::string& name) {
    return g.conv2d(x, g.parameter(name + ".kernels", l.kernels), g.parameter(name + ".bias", l.bias));
  };
  auto dense = [&](Var x, const DenseLayer& l, const std::string& name) {
    return g.dense(x, g.parameter(name + ".weights", l.weights), g.parameter(name + ".bias", l.bias));
  };
  auto bn = [&](Var x, const BatchNormState& s, const std::string& name) {
    Var gamma = g.parameter(name + ".gamma", s.gamma);
    Var beta = g.parameter(name + ".beta", s.beta);
    if (!train) return g.batch_norm_infer(x, gamma, beta, s.running_mean, s.running_var, s.epsilon);
    BatchStats stats;
    Var y = g.batch_norm_train(x, gamma, beta, s.epsilon, &stats);
    if (o.batch_stats) o.batch_stats->push_back(std::move(stats));
    return y;
  };
  auto relu = [&](Var x) {
    if (o.relu_inputs) o.relu_inputs->push_back(g.value(x));
    return g.relu(x);
  };
  auto drop = [&](Var x) {
    if (!train || o.dropout_rate == 0.0) return x;
    return g.multiply_constant(x, dropout_mask(g.value(x).shape(), o.dropout_rate, *o.rng));
  };

  Var input = g.constant(batch.planes);
  trace("input", input);
  Var h = relu(bn(conv(input, p.conv1, "conv1"), p.bn1, "bn1"));
  trace("conv1", h);
  h = relu(bn(conv(h, p.conv2, "conv2"), p.bn2, "bn2"));
  trace("conv2", h);
  h = relu(bn(conv(h, p.conv3, "conv3"), p.bn3, "bn3"));
  trace("conv3", h);
  Var skip = bn(conv(input, p.conv_skip, "conv_skip"), p.bn_skip, "bn_skip");
  trace("conv_skip", skip);
  Var merged = relu(bn(g.add(h, skip), p.bn_merge, "bn_merge"));
  trace("merge", merged);
  Var d1 = bn(drop(merged), p.bn_drop1, "bn_drop1");
  trace("dropout1", d1);
  Var flat = g.reshape(d1, {n, kFlatFeatures});
  trace("flatten", flat);
  Var e1 = relu(bn(dense(flat, p.dense1, "dense1"), p.bn_dense1, "bn_dense1"));
  trace("dense1", e1);
  Var d2 = bn(drop(e1), p.bn_drop2, "bn_drop2");
  trace("dropout2", d2);
  Var e2 = relu(bn(dense(d2, p.dense2, "dense2"), p.bn_dense2, "bn_dense2"));
  trace("dense2", e2);
  Var wide = g.concat_columns(e2, batch.metadata);
  trace("concat", wide);
  Var score = g.sigmoid(dense(wide, p.dense_out, "dense_out"));
  trace("output", score);
  return score;
}

double forward_branch(const NNetParams& params, const NodulePatch& patch, const ForwardOptions& options) {
  if (patch.masked) throw ContractError("forward_branch: patch is masked");
  ScanExample one;
  one.patches.push_back(patch);
  const BranchBatch b = BranchBatch::from_examples({&one}, params.metadata_dim());
  Graph g;
  return g.value(forward_branches(g, params, b, options))[0];
}

ScanRisk forward_scan(const NNetParams& params, const ScanExample& example, const ForwardOptions& options) {
  const BranchBatch b = BranchBatch::from_examples({&example}, params.metadata_dim());
  if (b.size() == 0) return {0.0, true};
  Graph g;
  const Tensor& scores = g.value(forward_branches(g, params, b, options));
  return {*std::max_element(scores.values().begin(), scores.values().end()), false};
}

std::vector<ShapeTraceEntry> shape_trace(const NNetParams& params) {
  ScanExample ex;
  for (std::size_t i = 0; i < kMaxNodules; ++i) {
    NodulePatch p;
    p.planes = Tensor({3, kCropSide, kCropSide}, 0.5);
    p.metadata.assign(params.metadata_dim(), 0.0);
    p.masked = false;
    ex.patches.push_back(std::move(p));
  }
  std::vector<ShapeTraceEntry> trace;
  ForwardOptions o;
  o.trace = &trace;
  const BranchBatch b = BranchBatch::from_examples({&ex}, params.metadata_dim());
  Graph g;
  Graph::Var scores = forward_branches(g, params, b, o);
  Graph::Var risk = g.group_max(scores, b.scan_of_branch, 1, 0.0);
  trace.push_back({"branches", {b.size()}});
  trace.push_back({"global_max", g.value(risk).shape()});
  return trace;
}

// --- training ------------------------------------------------------------------------

namespace {

std::vector<const ScanExample*> pointers(const std::vector<ScanExample>& v) {
  std::vector<const ScanExample*> out;
  for (const auto& e : v) out.push_back(&e);
  return out;
}

std::vector<int> labels_of(const std::vector<ScanExample>& v) {
  std::vector<int> out;
  for (const auto& e : v) out.push_back(e.label);
  return out;
}

double masked_only_loss(const std::vector<ScanExample>& batch) {
  double total = 0.0;
  for (const auto& e : batch) total += bce_loss(0.0, e.label);
  return total / static_cast<double>(batch.size());
}

}  // namespace

LossAndGradients loss_and_gradients(NNetParams& params, const std::vector<ScanExample>& batch,
                                    const ForwardOptions& options) {
  if (batch.empty()) throw InvalidBatchError("loss_and_gradients: empty batch");
  LossAndGradients out;
  const BranchBatch b = BranchBatch::from_examples(pointers(batch), params.metadata_dim());
  if (b.size() == 0) {
    out.loss = masked_only_loss(batch);
    return out;
  }
  ForwardOptions o = options;
  o.batch_stats = &out.batch_stats;
  Graph g;
  Graph::Var scores = forward_branches(g, params, b, o);
  Graph::Var risks = g.group_max(scores, b.scan_of_branch, b.n_scans, 0.0);
  Graph::Var loss = g.bce_mean(risks, labels_of(batch));
  out.loss = g.value(loss)[0];
  g.backward(loss);
  for (const NamedParam& p : params.learnable()) out.gradients.push_back(g.gradient(p.name));
  out.has_gradient = true;
  return out;
}

double batch_loss(const NNetParams& params, const std::vector<ScanExample>& batch, const ForwardOptions& options) {
  if (batch.empty()) throw InvalidBatchError("batch_loss: empty batch");
  const BranchBatch b = BranchBatch::from_examples(pointers(batch), params.metadata_dim());
  if (b.size() == 0) return masked_only_loss(batch);
  ForwardOptions o = options;
  o.batch_stats = nullptr;
  Graph g;
  Graph::Var risks = g.group_max(forward_branches(g, params, b, o), b.scan_of_branch, b.n_scans, 0.0);
  return g.value(g.bce_mean(risks, labels_of(batch)))[0];
}

namespace {

void shuffle_indices(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(i - 1)))]);
}

void require_both_classes(const std::vector<PreparedScan>& dataset) {
  if (dataset.empty()) throw ConfigError("training set is empty");
  bool pos = false, neg = false;
  for (const auto& s : dataset) (s.label == 1 ? pos : neg) = true;
  if (!pos || !neg) throw ConfigError("training set must contain both positive and negative scans");
}

}  // namespace

TrainResult train(const NNetConfig& config, const std::vector<PreparedScan>& dataset, Rng& rng,
                  const EpochCallback& on_epoch) {
  config.validate();
  require_both_classes(dataset);
  const PreprocessOptions popt = config.preprocess_options();

  TrainResult result;
  result.model.metadata_stats = metadata_stats_for(dataset, config.metadata_dim);
  result.model.params = init_params(config, rng);
  NNetParams& params = result.model.params;
  std::vector<NamedParam> learnable = params.learnable();
  std::vector<BatchNormState*> bns = params.batch_norms();
  AdamState adam;
  adam.config.learning_rate = config.learning_rate;

  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  ForwardOptions fwd;
  fwd.mode = Mode::Train;
  fwd.dropout_rate = config.dropout_rate;
  fwd.rng = &rng;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle_indices(order, rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<ScanExample> batch;
      batch.reserve(end - start);
      // fresh random crops every iteration
      for (std::size_t i = start; i < end; ++i)
        batch.push_back(make_example(dataset[order[i]], Mode::Train, rng, result.model.metadata_stats, popt));
      LossAndGradients lg = loss_and_gradients(params, batch, fwd);
      total += lg.loss * static_cast<double>(batch.size());
      if (!lg.has_gradient) continue;
      adam_step(learnable, lg.gradients, adam);
      for (std::size_t k = 0; k < bns.size(); ++k) update_running_stats(*bns[k], lg.batch_stats[k]);
    }
    const double mean = total / static_cast<double>(dataset.size());
    if (!std::isfinite(mean)) throw NumericError("training loss became non-finite at epoch " + std::to_string(epoch));
    result.loss_history.push_back(mean);
    if (on_epoch) on_epoch(epoch, mean);
  }
  return result;
}

std::vector<std::size_t> stratified_folds(const std::vector<int>& labels, std::size_t k, Rng& rng) {
  if (k == 0) throw ConfigError("number of folds must be at least 1");
  if (labels.size() < k)
    throw ConfigError("cannot split " + std::to_string(labels.size()) + " scans into " + std::to_string(k) + " folds");
  std::vector<std::size_t> fold(labels.size(), 0);
  std::size_t next = 0;
  // deal each class round-robin after shuffling so fold sizes differ by at most one
  for (int cls : {1, 0}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == cls) idx.push_back(i);
    shuffle_indices(idx, rng);
    for (std::size_t i : idx) fold[i] = next++ % k;
  }
  return fold;
}

KFoldResult kfold_train(const NNetConfig& config, const std::vector<PreparedScan>& dataset, std::size_t k,
                        std::size_t threads,
                        const std::function<void(std::size_t, std::size_t, double)>& on_epoch) {
  config.validate();
  std::vector<int> labels;
  for (const auto& s : dataset) labels.push_back(s.label);
  Rng split_rng(derive_seed(config.seed, "folds"));
  KFoldResult result;
  result.fold_of_example = stratified_folds(labels, k, split_rng);

  // a single fold trains one model on everything
  std::vector<std::vector<PreparedScan>> subsets(k);
  for (std::size_t f = 0; f < k; ++f) {
    for (std::size_t i = 0; i < dataset.size(); ++i)
      if (k == 1 || result.fold_of_example[i] != f) subsets[f].push_back(dataset[i]);
    require_both_classes(subsets[f]);
  }

  std::vector<TrainResult> trained(k);
  std::vector<std::exception_ptr> errors(k);
  std::mutex callback_mutex;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t f = next++; f < k; f = next++) {
      try {
        Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(f)));
        trained[f] = train(config, subsets[f], rng, [&](std::size_t epoch, double loss) {
          if (!on_epoch) return;
          std::lock_guard<std::mutex> lock(callback_mutex);
          on_epoch(f, epoch, loss);
        });
      } catch (...) {
        errors[f] = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(threads, 1, k);
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  for (auto& t : trained) {
    result.ensemble.members.push_back(std::move(t.model));
    result.loss_histories.push_back(std::move(t.loss_history));
  }
  return result;
}

double ensemble_mean(const std::vector<double>& member_outputs) {
  if (member_outputs.empty()) throw ContractError("ensemble_mean: no members");
  double total = 0.0;
  for (double v : member_outputs) total += v;
  return total / static_cast<double>(member_outputs.size());
}

double ensemble_predict(const FoldEnsemble& ensemble, const PreparedScan& scan, Projection projection,
                        bool* no_nodules) {
  if (ensemble.members.empty()) throw ContractError("ensemble_predict: empty ensemble");
  std::vector<double> outputs;
  bool empty = false;
  for (const TrainedModel& m : ensemble.members) {
    PreprocessOptions opt;
    opt.projection = projection;
    opt.metadata_dim = m.params.metadata_dim();
    Rng unused(0);
    const ScanExample ex = make_example(scan, Mode::Infer, unused, m.metadata_stats, opt);
    const ScanRisk r = forward_scan(m.params, ex);
    empty = r.no_nodules;
    outputs.push_back(r.risk);
  }
  if (no_nodules) *no_nodules = empty;
  return ensemble_mean(outputs);
}

}  // namespace lungrisk
