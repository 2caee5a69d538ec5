#include "lungrisk/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "lungrisk/errors.hpp"

namespace lungrisk {

namespace {

struct ImageLayout {
  std::size_t batch, channels, height, width;
};

ImageLayout image_layout(const Tensor& t, const char* what) {
  if (t.rank() == 4) return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
  if (t.rank() == 3) return {1, t.dim(0), t.dim(1), t.dim(2)};
  throw DimensionError(std::string(what) + ": expected C x H x W or N x C x H x W, got " +
                       shape_string(t.shape()));
}

// Channel-major view used by batch norm: element (o, c, i) lives at (o * C + c) * inner + i.
struct ChannelLayout {
  std::size_t outer, channels, inner;
};

ChannelLayout channel_layout(const Tensor& x) {
  switch (x.rank()) {
    case 1: return {1, x.dim(0), 1};
    case 2: return {x.dim(0), x.dim(1), 1};
    case 3: return {1, x.dim(0), x.dim(1) * x.dim(2)};
    case 4: return {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)};
    default: throw DimensionError("batch_norm: unsupported rank " + std::to_string(x.rank()));
  }
}

void check_bn_params(const ChannelLayout& l, const Tensor& gamma, const Tensor& beta) {
  if (gamma.size() != l.channels || beta.size() != l.channels)
    throw DimensionError("batch_norm: " + std::to_string(l.channels) + " channels but parameters of length " +
                         std::to_string(gamma.size()) + "/" + std::to_string(beta.size()));
}

}  // namespace

BatchNormState BatchNormState::fresh(std::size_t channels) {
  BatchNormState s;
  s.gamma = Tensor({channels}, 1.0);
  s.beta = Tensor({channels}, 0.0);
  s.running_mean = Tensor({channels}, 0.0);
  s.running_var = Tensor({channels}, 1.0);
  return s;
}

// ---------------------------------------------------------------------------

Tensor conv2d_same(const Tensor& input, const Tensor& kernels, const Tensor& bias) {
  const ImageLayout in = image_layout(input, "conv2d_same");
  if (kernels.rank() != 4 || kernels.dim(2) != 3 || kernels.dim(3) != 3)
    throw DimensionError("conv2d_same: kernels must be O x C x 3 x 3, got " + shape_string(kernels.shape()));
  if (kernels.dim(1) != in.channels)
    throw DimensionError("conv2d_same: input has " + std::to_string(in.channels) + " channels, kernels expect " +
                         std::to_string(kernels.dim(1)));
  const std::size_t out_ch = kernels.dim(0);
  if (bias.size() != out_ch)
    throw DimensionError("conv2d_same: bias length " + std::to_string(bias.size()) + " != " +
                         std::to_string(out_ch));

  const std::size_t H = in.height, W = in.width, plane = H * W;
  Tensor out = input.rank() == 4 ? Tensor({in.batch, out_ch, H, W}) : Tensor({out_ch, H, W});
  const double* x = input.data();
  const double* k = kernels.data();
  double* y = out.data();

  for (std::size_t n = 0; n < in.batch; ++n) {
    for (std::size_t o = 0; o < out_ch; ++o) {
      double* dst_plane = y + (n * out_ch + o) * plane;
      std::fill(dst_plane, dst_plane + plane, bias[o]);
      for (std::size_t c = 0; c < in.channels; ++c) {
        const double* src_plane = x + (n * in.channels + c) * plane;
        const double* kk = k + (o * in.channels + c) * 9;
        for (int di = 0; di < 3; ++di) {
          const std::size_t i_lo = di == 0 ? 1 : 0;
          const std::size_t i_hi = di == 2 ? H - 1 : H;
          for (int dj = 0; dj < 3; ++dj) {
            const double w = kk[di * 3 + dj];
            if (w == 0.0) continue;
            const std::size_t j_lo = dj == 0 ? 1 : 0;
            const std::size_t j_hi = dj == 2 ? W - 1 : W;
            for (std::size_t i = i_lo; i < i_hi; ++i) {
              double* dst = dst_plane + i * W;
              const double* src = src_plane + (i + di - 1) * W + dj - 1;
              for (std::size_t j = j_lo; j < j_hi; ++j) dst[j] += w * src[j];
            }
          }
        }
      }
    }
  }
  return out;
}

Conv2dGrads conv2d_same_backward(const Tensor& input, const Tensor& kernels, const Tensor& grad_output,
                                 bool want_input_grad) {
  const ImageLayout in = image_layout(input, "conv2d_same_backward");
  const std::size_t out_ch = kernels.dim(0);
  const std::size_t H = in.height, W = in.width, plane = H * W;
  if (grad_output.size() != in.batch * out_ch * plane)
    throw DimensionError("conv2d_same_backward: gradient shape " + shape_string(grad_output.shape()));

  Conv2dGrads g;
  g.kernels = Tensor(kernels.shape());
  g.bias = Tensor({out_ch});
  if (want_input_grad) g.input = Tensor(input.shape());

  const double* x = input.data();
  const double* k = kernels.data();
  const double* dy = grad_output.data();
  double* dk = g.kernels.data();
  double* dx = want_input_grad ? g.input.data() : nullptr;

  for (std::size_t n = 0; n < in.batch; ++n) {
    for (std::size_t o = 0; o < out_ch; ++o) {
      const double* gy = dy + (n * out_ch + o) * plane;
      double bsum = 0.0;
      for (std::size_t p = 0; p < plane; ++p) bsum += gy[p];
      g.bias[o] += bsum;
      for (std::size_t c = 0; c < in.channels; ++c) {
        const double* src_plane = x + (n * in.channels + c) * plane;
        double* dsrc_plane = dx ? dx + (n * in.channels + c) * plane : nullptr;
        const double* kk = k + (o * in.channels + c) * 9;
        double* dkk = dk + (o * in.channels + c) * 9;
        for (int di = 0; di < 3; ++di) {
          const std::size_t i_lo = di == 0 ? 1 : 0;
          const std::size_t i_hi = di == 2 ? H - 1 : H;
          for (int dj = 0; dj < 3; ++dj) {
            const std::size_t j_lo = dj == 0 ? 1 : 0;
            const std::size_t j_hi = dj == 2 ? W - 1 : W;
            const double w = kk[di * 3 + dj];
            double acc = 0.0;
            for (std::size_t i = i_lo; i < i_hi; ++i) {
              const double* g_row = gy + i * W;
              const double* src = src_plane + (i + di - 1) * W + dj - 1;
              for (std::size_t j = j_lo; j < j_hi; ++j) acc += g_row[j] * src[j];
              if (dsrc_plane) {
                double* dsrc = dsrc_plane + (i + di - 1) * W + dj - 1;
                for (std::size_t j = j_lo; j < j_hi; ++j) dsrc[j] += w * g_row[j];
              }
            }
            dkk[di * 3 + dj] += acc;
          }
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------

BatchNormTrainForward batch_norm_train_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                               double epsilon) {
  if (x.empty()) throw InvalidBatchError("batch_norm: empty batch in train mode");
  const ChannelLayout l = channel_layout(x);
  check_bn_params(l, gamma, beta);
  const double count = static_cast<double>(l.outer * l.inner);

  BatchNormTrainForward r;
  r.stats.mean.assign(l.channels, 0.0);
  r.stats.var.assign(l.channels, 0.0);
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t c = 0; c < l.channels; ++c) {
      const double* p = x.data() + (o * l.channels + c) * l.inner;
      double s = 0.0;
      for (std::size_t i = 0; i < l.inner; ++i) s += p[i];
      r.stats.mean[c] += s;
    }
  for (double& m : r.stats.mean) m /= count;
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t c = 0; c < l.channels; ++c) {
      const double* p = x.data() + (o * l.channels + c) * l.inner;
      const double m = r.stats.mean[c];
      double s = 0.0;
      for (std::size_t i = 0; i < l.inner; ++i) s += (p[i] - m) * (p[i] - m);
      r.stats.var[c] += s;
    }
  for (double& v : r.stats.var) v /= count;

  r.output = Tensor(x.shape());
  r.normalized = Tensor(x.shape());
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t c = 0; c < l.channels; ++c) {
      const std::size_t base = (o * l.channels + c) * l.inner;
      const double m = r.stats.mean[c];
      const double inv_std = 1.0 / std::sqrt(r.stats.var[c] + epsilon);
      for (std::size_t i = 0; i < l.inner; ++i) {
        const double xh = (x[base + i] - m) * inv_std;
        r.normalized[base + i] = xh;
        r.output[base + i] = gamma[c] * xh + beta[c];
      }
    }
  return r;
}

Tensor batch_norm_infer_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                const Tensor& running_mean, const Tensor& running_var, double epsilon) {
  const ChannelLayout l = channel_layout(x);
  check_bn_params(l, gamma, beta);
  if (running_mean.size() != l.channels || running_var.size() != l.channels)
    throw DimensionError("batch_norm: running statistics do not match channel count");
  Tensor out(x.shape());
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t c = 0; c < l.channels; ++c) {
      const std::size_t base = (o * l.channels + c) * l.inner;
      const double scale = gamma[c] / std::sqrt(running_var[c] + epsilon);
      const double m = running_mean[c];
      const double b = beta[c];
      for (std::size_t i = 0; i < l.inner; ++i) out[base + i] = (x[base + i] - m) * scale + b;
    }
  return out;
}

BatchNormGrads batch_norm_train_backward(const Tensor& grad_output, const Tensor& normalized,
                                         const Tensor& gamma, const BatchStats& stats, double epsilon) {
  const ChannelLayout l = channel_layout(normalized);
  const double count = static_cast<double>(l.outer * l.inner);
  BatchNormGrads g;
  g.gamma = Tensor({l.channels});
  g.beta = Tensor({l.channels});
  g.input = Tensor(normalized.shape());
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t c = 0; c < l.channels; ++c) {
      const std::size_t base = (o * l.channels + c) * l.inner;
      double sg = 0.0, sgx = 0.0;
      for (std::size_t i = 0; i < l.inner; ++i) {
        sg += grad_output[base + i];
        sgx += grad_output[base + i] * normalized[base + i];
      }
      g.beta[c] += sg;
      g.gamma[c] += sgx;
    }
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t c = 0; c < l.channels; ++c) {
      const std::size_t base = (o * l.channels + c) * l.inner;
      const double inv_std = 1.0 / std::sqrt(stats.var[c] + epsilon);
      const double mean_g = g.beta[c] / count;
      const double mean_gx = g.gamma[c] / count;
      const double scale = gamma[c] * inv_std;
      for (std::size_t i = 0; i < l.inner; ++i)
        g.input[base + i] = scale * (grad_output[base + i] - mean_g - normalized[base + i] * mean_gx);
    }
  return g;
}

BatchNormGrads batch_norm_infer_backward(const Tensor& grad_output, const Tensor& x, const Tensor& gamma,
                                         const Tensor& running_mean, const Tensor& running_var,
                                         double epsilon) {
  const ChannelLayout l = channel_layout(x);
  BatchNormGrads g;
  g.gamma = Tensor({l.channels});
  g.beta = Tensor({l.channels});
  g.input = Tensor(x.shape());
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t c = 0; c < l.channels; ++c) {
      const std::size_t base = (o * l.channels + c) * l.inner;
      const double inv_std = 1.0 / std::sqrt(running_var[c] + epsilon);
      for (std::size_t i = 0; i < l.inner; ++i) {
        const double gy = grad_output[base + i];
        g.beta[c] += gy;
        g.gamma[c] += gy * (x[base + i] - running_mean[c]) * inv_std;
        g.input[base + i] = gy * gamma[c] * inv_std;
      }
    }
  return g;
}

void update_running_stats(BatchNormState& state, const BatchStats& stats) {
  const double m = state.momentum;
  for (std::size_t c = 0; c < state.channels(); ++c) {
    state.running_mean[c] = m * state.running_mean[c] + (1.0 - m) * stats.mean[c];
    state.running_var[c] = m * state.running_var[c] + (1.0 - m) * stats.var[c];
  }
}

Tensor batch_norm(const Tensor& x, BatchNormState& state, Mode mode, BatchStats* batch_stats) {
  if (mode == Mode::Infer)
    return batch_norm_infer_forward(x, state.gamma, state.beta, state.running_mean, state.running_var,
                                    state.epsilon);
  BatchNormTrainForward r = batch_norm_train_forward(x, state.gamma, state.beta, state.epsilon);
  update_running_stats(state, r.stats);
  if (batch_stats) *batch_stats = r.stats;
  return std::move(r.output);
}

// ---------------------------------------------------------------------------

Tensor dense(const Tensor& x, const Tensor& weights, const Tensor& bias) {
  if (weights.rank() != 2) throw DimensionError("dense: weights must be n x m");
  const std::size_t n_in = weights.dim(0), n_out = weights.dim(1);
  if (bias.size() != n_out) throw DimensionError("dense: bias length does not match weight columns");
  std::size_t rows;
  if (x.rank() == 1) rows = 1;
  else if (x.rank() == 2) rows = x.dim(0);
  else throw DimensionError("dense: input must be a vector or a batch of vectors");
  if (x.size() != rows * n_in)
    throw DimensionError("dense: input " + shape_string(x.shape()) + " incompatible with weights " +
                         shape_string(weights.shape()));

  Tensor out = x.rank() == 1 ? Tensor({n_out}) : Tensor({rows, n_out});
  const double* W = weights.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double* y = out.data() + r * n_out;
    std::copy(bias.data(), bias.data() + n_out, y);
    const double* xr = x.data() + r * n_in;
    for (std::size_t f = 0; f < n_in; ++f) {
      const double xv = xr[f];
      if (xv == 0.0) continue;
      const double* wrow = W + f * n_out;
      for (std::size_t m = 0; m < n_out; ++m) y[m] += xv * wrow[m];
    }
  }
  return out;
}

DenseGrads dense_backward(const Tensor& x, const Tensor& weights, const Tensor& grad_output,
                          bool want_input_grad) {
  const std::size_t n_in = weights.dim(0), n_out = weights.dim(1);
  const std::size_t rows = x.size() / n_in;
  DenseGrads g;
  g.weights = Tensor(weights.shape());
  g.bias = Tensor({n_out});
  if (want_input_grad) g.input = Tensor(x.shape());
  const double* W = weights.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* gy = grad_output.data() + r * n_out;
    const double* xr = x.data() + r * n_in;
    for (std::size_t m = 0; m < n_out; ++m) g.bias[m] += gy[m];
    for (std::size_t f = 0; f < n_in; ++f) {
      const double xv = xr[f];
      const double* wrow = W + f * n_out;
      if (xv != 0.0) {
        double* dw = g.weights.data() + f * n_out;
        for (std::size_t m = 0; m < n_out; ++m) dw[m] += xv * gy[m];
      }
      if (want_input_grad) {
        double acc = 0.0;
        for (std::size_t m = 0; m < n_out; ++m) acc += wrow[m] * gy[m];
        g.input[r * n_in + f] = acc;
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = sigmoid(x[i]);
  return out;
}

double relu(double x) { return x > 0.0 ? x : 0.0; }

Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = relu(x[i]);
  return out;
}

Tensor residual_add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "residual_add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

void validate_dropout_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
}

Tensor dropout_mask(const Shape& shape, double rate, Rng& rng) {
  validate_dropout_rate(rate);
  Tensor mask(shape, 1.0);
  if (rate == 0.0) return mask;
  const double keep_scale = 1.0 / (1.0 - rate);
  for (double& m : mask.values()) m = uniform01(rng) < rate ? 0.0 : keep_scale;
  return mask;
}

Tensor dropout(const Tensor& x, double rate, Mode mode, Rng& rng) {
  validate_dropout_rate(rate);
  if (mode == Mode::Infer || rate == 0.0) return x;
  const Tensor mask = dropout_mask(x.shape(), rate, rng);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * mask[i];
  return out;
}

// ---------------------------------------------------------------------------

double bce_loss(double prediction, int label) {
  const double p = std::clamp(prediction, kBceClamp, 1.0 - kBceClamp);
  return label == 1 ? -std::log(p) : -std::log1p(-p);
}

double bce_loss_grad(double prediction, int label) {
  const double p = std::clamp(prediction, kBceClamp, 1.0 - kBceClamp);
  return label == 1 ? -1.0 / p : 1.0 / (1.0 - p);
}

}  // namespace lungrisk
