#pragma once

// The three candidate-operation sets searched on cell edges.
//
//   Down   : down_conv, down_dilated_conv, down_separable_conv, max_pool, avg_pool   (H,W -> H/2,W/2)
//   Up     : up_conv, up_dilated_conv, up_separable_conv                           (H,W -> 2H,2W)
//   Normal : conv, dilated_conv, separable_conv, identity, zero                     (H,W preserved)
//
// All kernels are 3x3; dilated variants use dilation 2. Conv-bearing ops
// are ReLU -> conv -> BN (BN without affine parameters). up_dilated_conv
// and up_separable_conv are a nearest 2x upsample followed by the stride-1
// conv of the same name; up_conv is a true stride-2 transpose convolution.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "hwnas/nn.hpp"

namespace hwnas {

enum class OpSet { Down, Up, Normal };

enum class PrimitiveOp : std::uint8_t {
  DownConv,
  DownDilatedConv,
  DownSeparableConv,
  MaxPool,
  AvgPool,
  UpConv,
  UpDilatedConv,
  UpSeparableConv,
  Conv,
  DilatedConv,
  SeparableConv,
  Identity,
  Zero,
};

inline constexpr int kPrimitiveCount = 13;

std::span<const PrimitiveOp> ops_in(OpSet set);
OpSet set_of(PrimitiveOp op);
std::string_view op_name(PrimitiveOp op);
std::optional<PrimitiveOp> parse_op(std::string_view name);
std::string_view set_name(OpSet set);
// Index of `op` within its set's candidate list.
int index_in_set(PrimitiveOp op);

// Spatial extent after applying an op of `set` to an input of extent `in`.
int spatial_out(OpSet set, int in);

class OpInstance {
 public:
  OpInstance(PrimitiveOp id, int cin, int cout, Rng& rng);

  PrimitiveOp id() const { return id_; }
  int cin() const { return cin_; }
  int cout() const { return cout_; }

  Tensor apply(const Tensor& x, bool training);
  Shape output_shape(const Shape& in) const;
  // Multiply-accumulates x 2 for conv layers, k^2 * H' * W' * C for pooling.
  std::int64_t flops(const Shape& in) const;
  void collect(StateDict& sd, const std::string& prefix);

 private:
  PrimitiveOp id_;
  int cin_, cout_;
  Conv2d conv_;                // dense or depthwise conv
  Conv2d pointwise_;           // separable variants only
  ConvTranspose2d transpose_;  // up_conv only
  BatchNorm2d bn_;
};

}  // namespace hwnas
