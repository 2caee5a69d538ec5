#pragma once

// Tape-based reverse-mode differentiation over the kernels in ops.hpp.
// A Graph records one forward pass; backward() replays it in reverse.

#include <cstddef>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "lungrisk/ops.hpp"
#include "lungrisk/tensor.hpp"

namespace lungrisk {

class Graph {
 public:
  struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  // `value` must outlive the graph. Gradients are reported under `name`.
  Var parameter(const std::string& name, const Tensor& value);

  Var conv2d(Var input, Var kernels, Var bias);
  // Train-mode batch norm; batch statistics are written to `stats` when non-null.
  Var batch_norm_train(Var x, Var gamma, Var beta, double epsilon, BatchStats* stats = nullptr);
  Var batch_norm_infer(Var x, Var gamma, Var beta, const Tensor& running_mean, const Tensor& running_var,
                       double epsilon);
  Var dense(Var x, Var weights, Var bias);
  Var relu(Var x);
  Var sigmoid(Var x);
  Var add(Var a, Var b);
  Var multiply_constant(Var x, Tensor factor);  // elementwise, e.g. a dropout mask
  Var reshape(Var x, Shape shape);
  // N x A and constant N x B -> N x (A + B)
  Var concat_columns(Var x, Tensor extra);
  // Rows of an N x 1 column grouped by `group_of_row`; each group's maximum.
  // Groups without rows take `empty_value` and receive no gradient.
  Var group_max(Var scores, std::vector<std::size_t> group_of_row, std::size_t n_groups, double empty_value);
  // Mean binary cross-entropy of a vector of probabilities.
  Var bce_mean(Var probabilities, std::vector<int> labels);
  // sum(x * weights) with constant weights; handy for scalarizing test losses.
  Var weighted_sum(Var x, Tensor weights);

  const Tensor& value(Var v) const;
  void backward(Var loss);

  // Gradient of the last backward() loss w.r.t. a named parameter.
  // Throws MissingGradientError if the parameter was never reached.
  const Tensor& gradient(const std::string& name) const;
  bool has_gradient(const std::string& name) const;

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    bool grad_reached = false;
    std::function<void(Graph&, Node&)> backward;
    const Tensor& value() const { return external ? *external : owned; }
  };

  Var push(Tensor value, bool requires_grad, std::function<void(Graph&, Node&)> backward);
  bool needs_grad(Var v) const { return nodes_[v.id].requires_grad; }
  void accumulate(Var v, const Tensor& g);
  Node& node(Var v);

  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> params_;
};

}  // namespace lungrisk
