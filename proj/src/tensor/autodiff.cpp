#include "lungrisk/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "lungrisk/errors.hpp"

namespace lungrisk {

Graph::Var Graph::push(Tensor value, bool requires_grad, std::function<void(Graph&, Node&)> backward) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Graph::Node& Graph::node(Var v) {
  if (v.id >= nodes_.size()) throw ContractError("graph: unknown variable");
  return nodes_[v.id];
}

const Tensor& Graph::value(Var v) const {
  if (v.id >= nodes_.size()) throw ContractError("graph: unknown variable");
  return nodes_[v.id].value();
}

void Graph::accumulate(Var v, const Tensor& g) {
  Node& n = nodes_[v.id];
  if (!n.requires_grad) return;
  if (!n.grad_reached) {
    n.grad = g;
    n.grad_reached = true;
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

Graph::Var Graph::constant(Tensor value) { return push(std::move(value), false, nullptr); }

Graph::Var Graph::parameter(const std::string& name, const Tensor& value) {
  if (params_.count(name)) throw ContractError("graph: parameter registered twice: " + name);
  Node n;
  n.external = &value;
  n.requires_grad = true;
  n.backward = [](Graph&, Node&) {};
  nodes_.push_back(std::move(n));
  params_[name] = nodes_.size() - 1;
  return Var{nodes_.size() - 1};
}

Graph::Var Graph::conv2d(Var input, Var kernels, Var bias) {
  Tensor out = conv2d_same(value(input), value(kernels), value(bias));
  const bool rg = needs_grad(input) || needs_grad(kernels) || needs_grad(bias);
  return push(std::move(out), rg, [input, kernels, bias](Graph& g, Node& self) {
    Conv2dGrads d = conv2d_same_backward(g.value(input), g.value(kernels), self.grad, g.needs_grad(input));
    if (g.needs_grad(input)) g.accumulate(input, d.input);
    g.accumulate(kernels, d.kernels);
    g.accumulate(bias, d.bias);
  });
}

Graph::Var Graph::batch_norm_train(Var x, Var gamma, Var beta, double epsilon, BatchStats* stats) {
  BatchNormTrainForward f = batch_norm_train_forward(value(x), value(gamma), value(beta), epsilon);
  if (stats) *stats = f.stats;
  const bool rg = needs_grad(x) || needs_grad(gamma) || needs_grad(beta);
  return push(std::move(f.output), rg,
              [x, gamma, beta, epsilon, normalized = std::move(f.normalized),
               batch = std::move(f.stats)](Graph& g, Node& self) {
                BatchNormGrads d = batch_norm_train_backward(self.grad, normalized, g.value(gamma), batch, epsilon);
                g.accumulate(x, d.input);
                g.accumulate(gamma, d.gamma);
                g.accumulate(beta, d.beta);
              });
}

Graph::Var Graph::batch_norm_infer(Var x, Var gamma, Var beta, const Tensor& running_mean,
                                   const Tensor& running_var, double epsilon) {
  Tensor out = batch_norm_infer_forward(value(x), value(gamma), value(beta), running_mean, running_var, epsilon);
  const bool rg = needs_grad(x) || needs_grad(gamma) || needs_grad(beta);
  return push(std::move(out), rg, [x, gamma, beta, &running_mean, &running_var, epsilon](Graph& g, Node& self) {
    BatchNormGrads d =
        batch_norm_infer_backward(self.grad, g.value(x), g.value(gamma), running_mean, running_var, epsilon);
    g.accumulate(x, d.input);
    g.accumulate(gamma, d.gamma);
    g.accumulate(beta, d.beta);
  });
}

Graph::Var Graph::dense(Var x, Var weights, Var bias) {
  Tensor out = lungrisk::dense(value(x), value(weights), value(bias));
  const bool rg = needs_grad(x) || needs_grad(weights) || needs_grad(bias);
  return push(std::move(out), rg, [x, weights, bias](Graph& g, Node& self) {
    DenseGrads d = dense_backward(g.value(x), g.value(weights), self.grad, g.needs_grad(x));
    if (g.needs_grad(x)) g.accumulate(x, d.input);
    g.accumulate(weights, d.weights);
    g.accumulate(bias, d.bias);
  });
}

Graph::Var Graph::relu(Var x) {
  Tensor out = lungrisk::relu(value(x));
  return push(std::move(out), needs_grad(x), [x](Graph& g, Node& self) {
    const Tensor& in = g.value(x);
    Tensor d(in.shape());
    for (std::size_t i = 0; i < in.size(); ++i) d[i] = in[i] > 0.0 ? self.grad[i] : 0.0;
    g.accumulate(x, d);
  });
}

Graph::Var Graph::sigmoid(Var x) {
  Tensor out = lungrisk::sigmoid(value(x));
  return push(std::move(out), needs_grad(x), [x](Graph& g, Node& self) {
    const Tensor& s = self.owned;
    Tensor d(s.shape());
    for (std::size_t i = 0; i < s.size(); ++i) d[i] = self.grad[i] * s[i] * (1.0 - s[i]);
    g.accumulate(x, d);
  });
}

Graph::Var Graph::add(Var a, Var b) {
  Tensor out = residual_add(value(a), value(b));
  return push(std::move(out), needs_grad(a) || needs_grad(b), [a, b](Graph& g, Node& self) {
    g.accumulate(a, self.grad);
    g.accumulate(b, self.grad);
  });
}

Graph::Var Graph::multiply_constant(Var x, Tensor factor) {
  require_same_shape(value(x), factor, "multiply_constant");
  const Tensor& in = value(x);
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * factor[i];
  return push(std::move(out), needs_grad(x), [x, factor = std::move(factor)](Graph& g, Node& self) {
    Tensor d(factor.shape());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = self.grad[i] * factor[i];
    g.accumulate(x, d);
  });
}

Graph::Var Graph::reshape(Var x, Shape shape) {
  Tensor out = value(x).reshaped(std::move(shape));
  return push(std::move(out), needs_grad(x), [x](Graph& g, Node& self) {
    g.accumulate(x, self.grad.reshaped(g.value(x).shape()));
  });
}

Graph::Var Graph::concat_columns(Var x, Tensor extra) {
  const Tensor& a = value(x);
  if (a.rank() != 2 || extra.rank() != 2 || a.dim(0) != extra.dim(0))
    throw DimensionError("concat_columns: expected N x A and N x B, got " + shape_string(a.shape()) + " and " +
                         shape_string(extra.shape()));
  const std::size_t rows = a.dim(0), ca = a.dim(1), cb = extra.dim(1);
  Tensor out({rows, ca + cb});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data() + r * ca, ca, out.data() + r * (ca + cb));
    std::copy_n(extra.data() + r * cb, cb, out.data() + r * (ca + cb) + ca);
  }
  return push(std::move(out), needs_grad(x), [x, rows, ca, cb](Graph& g, Node& self) {
    Tensor d({rows, ca});
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(self.grad.data() + r * (ca + cb), ca, d.data() + r * ca);
    g.accumulate(x, d);
  });
}

Graph::Var Graph::group_max(Var scores, std::vector<std::size_t> group_of_row, std::size_t n_groups,
                            double empty_value) {
  const Tensor& s = value(scores);
  if (s.size() != group_of_row.size()) throw DimensionError("group_max: one group index per row required");
  std::vector<std::size_t> argmax(n_groups, static_cast<std::size_t>(-1));
  for (std::size_t r = 0; r < s.size(); ++r) {
    const std::size_t grp = group_of_row[r];
    if (grp >= n_groups) throw DimensionError("group_max: group index out of range");
    if (argmax[grp] == static_cast<std::size_t>(-1) || s[r] > s[argmax[grp]]) argmax[grp] = r;
  }
  Tensor out({n_groups}, empty_value);
  for (std::size_t grp = 0; grp < n_groups; ++grp)
    if (argmax[grp] != static_cast<std::size_t>(-1)) out[grp] = s[argmax[grp]];
  return push(std::move(out), needs_grad(scores), [scores, argmax = std::move(argmax)](Graph& g, Node& self) {
    Tensor d(g.value(scores).shape());
    for (std::size_t grp = 0; grp < argmax.size(); ++grp)
      if (argmax[grp] != static_cast<std::size_t>(-1)) d[argmax[grp]] += self.grad[grp];
    g.accumulate(scores, d);
  });
}

Graph::Var Graph::bce_mean(Var probabilities, std::vector<int> labels) {
  const Tensor& p = value(probabilities);
  if (p.size() != labels.size()) throw DimensionError("bce_mean: one label per prediction required");
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += bce_loss(p[i], labels[i]);
  const double n = static_cast<double>(p.size());
  return push(Tensor::scalar(total / n), needs_grad(probabilities),
              [probabilities, labels = std::move(labels), n](Graph& g, Node& self) {
                const Tensor& pv = g.value(probabilities);
                Tensor d(pv.shape());
                for (std::size_t i = 0; i < pv.size(); ++i) d[i] = self.grad[0] * bce_loss_grad(pv[i], labels[i]) / n;
                g.accumulate(probabilities, d);
              });
}

Graph::Var Graph::weighted_sum(Var x, Tensor weights) {
  const Tensor& in = value(x);
  if (in.size() != weights.size()) throw DimensionError("weighted_sum: weight count mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < in.size(); ++i) s += in[i] * weights[i];
  return push(Tensor::scalar(s), needs_grad(x), [x, weights = std::move(weights)](Graph& g, Node& self) {
    Tensor d(g.value(x).shape());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = self.grad[0] * weights[i];
    g.accumulate(x, d);
  });
}

void Graph::backward(Var loss) {
  Node& root = node(loss);
  if (root.value().size() != 1) throw ContractError("backward: loss must be a scalar");
  for (Node& n : nodes_) {
    n.grad = Tensor();
    n.grad_reached = false;
  }
  if (!root.requires_grad) return;
  root.grad = Tensor(root.value().shape(), 1.0);
  root.grad_reached = true;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad_reached && n.backward) n.backward(*this, n);
  }
}

bool Graph::has_gradient(const std::string& name) const {
  auto it = params_.find(name);
  return it != params_.end() && nodes_[it->second].grad_reached;
}

const Tensor& Graph::gradient(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw MissingGradientError("no parameter named '" + name + "' is tracked by this graph");
  const Node& n = nodes_[it->second];
  if (!n.grad_reached) throw MissingGradientError("parameter '" + name + "' received no gradient");
  return n.grad;
}

}  // namespace lungrisk
