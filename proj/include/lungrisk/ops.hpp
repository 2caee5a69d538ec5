#pragma once

// Forward kernels and their hand-written derivatives. Layouts are row-major:
// images are N x C x H x W (a single image may be passed as C x H x W),
// feature batches are N x F.

#include <cstddef>
#include <vector>

#include "lungrisk/rng.hpp"
#include "lungrisk/tensor.hpp"

namespace lungrisk {

enum class Mode { Train, Infer };

struct BatchNormState {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double epsilon = 1e-5;
  double momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch

  // gamma = 1, beta = 0, running stats (0, 1).
  static BatchNormState fresh(std::size_t channels);
  std::size_t channels() const { return gamma.size(); }
};

// Per-channel statistics of one training batch (variance is the biased estimate).
struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;
};

// --- convolution -----------------------------------------------------------

// 3x3 convolution, stride 1, zero padding 1 ("same" output size).
Tensor conv2d_same(const Tensor& input, const Tensor& kernels, const Tensor& bias);

struct Conv2dGrads {
  Tensor input;  // empty unless requested
  Tensor kernels;
  Tensor bias;
};
Conv2dGrads conv2d_same_backward(const Tensor& input, const Tensor& kernels, const Tensor& grad_output,
                                 bool want_input_grad);

// --- batch normalization ---------------------------------------------------

// Channel axis is 1 for rank 2 and rank 4 tensors, 0 for rank 1 and rank 3.
Tensor batch_norm(const Tensor& x, BatchNormState& state, Mode mode, BatchStats* batch_stats = nullptr);

struct BatchNormTrainForward {
  Tensor output;
  Tensor normalized;  // x_hat
  BatchStats stats;
};
BatchNormTrainForward batch_norm_train_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                               double epsilon);
Tensor batch_norm_infer_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                const Tensor& running_mean, const Tensor& running_var, double epsilon);

struct BatchNormGrads {
  Tensor input;
  Tensor gamma;
  Tensor beta;
};
BatchNormGrads batch_norm_train_backward(const Tensor& grad_output, const Tensor& normalized,
                                         const Tensor& gamma, const BatchStats& stats, double epsilon);
BatchNormGrads batch_norm_infer_backward(const Tensor& grad_output, const Tensor& x, const Tensor& gamma,
                                         const Tensor& running_mean, const Tensor& running_var,
                                         double epsilon);

void update_running_stats(BatchNormState& state, const BatchStats& stats);

// --- dense -----------------------------------------------------------------

// x is a length-n vector or an N x n batch; weights n x m; bias m.
Tensor dense(const Tensor& x, const Tensor& weights, const Tensor& bias);

struct DenseGrads {
  Tensor input;
  Tensor weights;
  Tensor bias;
};
DenseGrads dense_backward(const Tensor& x, const Tensor& weights, const Tensor& grad_output,
                          bool want_input_grad);

// --- elementwise -----------------------------------------------------------

double sigmoid(double x);
Tensor sigmoid(const Tensor& x);
double relu(double x);
Tensor relu(const Tensor& x);

Tensor residual_add(const Tensor& a, const Tensor& b);

// Inverted dropout: survivors are scaled by 1 / (1 - rate).
Tensor dropout_mask(const Shape& shape, double rate, Rng& rng);
Tensor dropout(const Tensor& x, double rate, Mode mode, Rng& rng);
void validate_dropout_rate(double rate);

// --- loss ------------------------------------------------------------------

inline constexpr double kBceClamp = 1e-7;

double bce_loss(double prediction, int label);
// d(bce)/dp evaluated at the clamped prediction.
double bce_loss_grad(double prediction, int label);

}  // namespace lungrisk
