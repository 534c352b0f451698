#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "hwnas/functional.hpp"

namespace hwnas {

using Rng = std::mt19937_64;

// Named views of a network's state. Parameters are trainable tensors;
// buffers are non-trainable arrays such as batch-norm running statistics.
struct ParamRef {
  std::string name;
  Tensor tensor;
};
struct BufferRef {
  std::string name;
  std::vector<Real>* data;
};
struct StateDict {
  std::vector<ParamRef> params;
  std::vector<BufferRef> buffers;

  std::vector<Tensor> param_tensors() const;
};

// Copies every entry of `src` whose name also exists in `dst`; returns the
// number of copied entries. Shapes must agree for matching names.
std::size_t copy_matching(const StateDict& src, StateDict& dst);

// Kaiming-uniform (fan-in, relu gain) initialization.
Tensor kaiming_uniform(Shape shape, int fan_in, Rng& rng);

struct Conv2d {
  Conv2d() = default;
  Conv2d(int cin, int cout, int kernel, Conv2dOptions opt, Rng& rng, bool bias = false);

  Tensor forward(const Tensor& x) const;
  std::int64_t flops(const Shape& in) const;
  Shape output_shape(const Shape& in) const;
  void collect(StateDict& sd, const std::string& prefix);

  int cin = 0, cout = 0, kernel = 0;
  Conv2dOptions opt;
  Tensor weight;
  Tensor bias;  // optional, [cout]
};

// Stride-2 transpose convolution doubling spatial dims.
struct ConvTranspose2d {
  ConvTranspose2d() = default;
  ConvTranspose2d(int cin, int cout, Rng& rng);

  Tensor forward(const Tensor& x) const { return conv2d_transpose(x, weight); }
  std::int64_t flops(const Shape& in) const;
  void collect(StateDict& sd, const std::string& prefix);

  int cin = 0, cout = 0;
  Tensor weight;  // [cin, cout, 3, 3]
};

struct BatchNorm2d {
  BatchNorm2d() = default;
  BatchNorm2d(int channels, bool affine);

  Tensor forward(const Tensor& x, bool training);
  void collect(StateDict& sd, const std::string& prefix);

  int channels = 0;
  Tensor gamma, beta;  // undefined when not affine
  BatchNormState state;
};

struct Linear {
  Linear() = default;
  Linear(int in, int out, Rng& rng);

  Tensor forward(const Tensor& x) const { return linear(x, weight, bias); }
  std::int64_t flops(int batch) const { return std::int64_t(2) * batch * in * out; }
  void collect(StateDict& sd, const std::string& prefix);

  int in = 0, out = 0;
  Tensor weight, bias;
};

// Adds a per-channel bias to an NCHW tensor.
Tensor channel_bias(const Tensor& x, const Tensor& bias);

}  // namespace hwnas
