#pragma once

// Differentiable tensor operations. Activations use NCHW layout.

#include <cstdint>
#include <span>
#include <vector>

#include "hwnas/tensor.hpp"

namespace hwnas {

// Elementwise / algebraic.
Tensor add(const Tensor& a, const Tensor& b);
Tensor add_n(const std::vector<Tensor>& xs);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& a, Real s);
Tensor add_const(const Tensor& a, std::span<const Real> c);  // c has a's element count
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

// Reductions.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// <x, c> for a constant vector c.
Tensor dot_const(const Tensor& x, std::span<const Real> c);
// sum_k w[k] * xs[k]; w is a 1-D tensor of length xs.size().
Tensor weighted_sum(const std::vector<Tensor>& xs, const Tensor& w);

Tensor softmax(const Tensor& x, int dim);
// -sum_c p_c log p_c over `dim` with p = softmax(x, dim); the reduced dim is kept with extent 1.
Tensor softmax_entropy(const Tensor& x, int dim);
Tensor concat(const std::vector<Tensor>& xs, int dim);

// Convolution family. Weights are [Cout, Cin/groups, k, k].
struct Conv2dOptions {
  int stride = 1;
  int dilation = 1;
  int padding = 0;
  int groups = 1;
};
Tensor conv2d(const Tensor& x, const Tensor& weight, const Conv2dOptions& opt);
// Stride-2, 3x3, padding 1, output padding 1: output spatial dims are exactly
// double the input. Weight is [Cin, Cout, 3, 3], the same tensor a stride-2
// conv2d from Cout to Cin channels would use.
Tensor conv2d_transpose(const Tensor& x, const Tensor& weight);
int conv_out_extent(int in, int kernel, int stride, int dilation, int padding);

enum class PoolKind { Max, Avg };
// Avg pooling always divides by kernel*kernel (padded cells count as zero);
// max pooling ignores padding and routes gradient to the first maximal cell.
Tensor pool2d(const Tensor& x, PoolKind kind, int kernel = 3, int stride = 2, int padding = 1);
Tensor upsample_nearest2x(const Tensor& x);
Tensor global_avg_pool(const Tensor& x);  // [N,C,H,W] -> [N,C]

// x [N,in], weight [out,in], bias [out] (bias may be undefined).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Per-channel batch norm over (N,H,W). In training mode the batch statistics
// normalize and the running statistics (biased mean, unbiased variance) are
// blended with `momentum`; in eval mode the running statistics are used.
struct BatchNormState {
  std::vector<Real> running_mean;
  std::vector<Real> running_var;
};
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                  bool training, Real momentum = Real(0.1), Real eps = Real(1e-5));

// Losses.
// logits [N,C,H,W]; target holds class ids in [0,C) for each of N*H*W pixels.
Tensor cross_entropy_2d(const Tensor& logits, std::span<const std::uint8_t> target);
Tensor mse(const Tensor& pred, const Tensor& target);

}  // namespace hwnas
