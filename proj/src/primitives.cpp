#include "hwnas/primitives.hpp"

#include <stdexcept>

namespace hwnas {

namespace {

constexpr std::array<PrimitiveOp, 5> kDown{PrimitiveOp::DownConv, PrimitiveOp::DownDilatedConv,
                                           PrimitiveOp::DownSeparableConv, PrimitiveOp::MaxPool,
                                           PrimitiveOp::AvgPool};
constexpr std::array<PrimitiveOp, 3> kUp{PrimitiveOp::UpConv, PrimitiveOp::UpDilatedConv, PrimitiveOp::UpSeparableConv};
constexpr std::array<PrimitiveOp, 5> kNormal{PrimitiveOp::Conv, PrimitiveOp::DilatedConv, PrimitiveOp::SeparableConv,
                                             PrimitiveOp::Identity, PrimitiveOp::Zero};

constexpr std::array<std::string_view, kPrimitiveCount> kNames{
    "down_conv", "down_dilated_conv", "down_separable_conv", "max_pool", "avg_pool",
    "up_conv",   "up_dilated_conv",   "up_separable_conv",   "conv",     "dilated_conv",
    "separable_conv", "identity", "zero"};

bool is_separable(PrimitiveOp op) {
  return op == PrimitiveOp::DownSeparableConv || op == PrimitiveOp::UpSeparableConv || op == PrimitiveOp::SeparableConv;
}

bool is_upsampled(PrimitiveOp op) { return op == PrimitiveOp::UpDilatedConv || op == PrimitiveOp::UpSeparableConv; }

bool has_params(PrimitiveOp op) {
  return op != PrimitiveOp::MaxPool && op != PrimitiveOp::AvgPool && op != PrimitiveOp::Identity &&
         op != PrimitiveOp::Zero;
}

}  // namespace

std::span<const PrimitiveOp> ops_in(OpSet set) {
  switch (set) {
    case OpSet::Down: return kDown;
    case OpSet::Up: return kUp;
    case OpSet::Normal: return kNormal;
  }
  throw std::logic_error("unknown op set");
}

OpSet set_of(PrimitiveOp op) {
  const auto i = static_cast<int>(op);
  if (i < 5) return OpSet::Down;
  if (i < 8) return OpSet::Up;
  return OpSet::Normal;
}

std::string_view op_name(PrimitiveOp op) { return kNames[static_cast<std::size_t>(op)]; }

std::optional<PrimitiveOp> parse_op(std::string_view name) {
  for (std::size_t i = 0; i < kNames.size(); ++i)
    if (kNames[i] == name) return static_cast<PrimitiveOp>(i);
  return std::nullopt;
}

std::string_view set_name(OpSet set) {
  switch (set) {
    case OpSet::Down: return "down";
    case OpSet::Up: return "up";
    case OpSet::Normal: return "normal";
  }
  return "?";
}

int index_in_set(PrimitiveOp op) {
  const auto ops = ops_in(set_of(op));
  for (std::size_t i = 0; i < ops.size(); ++i)
    if (ops[i] == op) return static_cast<int>(i);
  throw std::logic_error("op not in its own set");
}

int spatial_out(OpSet set, int in) {
  switch (set) {
    case OpSet::Down: return (in + 2 - 3) / 2 + 1;
    case OpSet::Up: return 2 * in;
    case OpSet::Normal: return in;
  }
  return in;
}

OpInstance::OpInstance(PrimitiveOp id, int cin, int cout, Rng& rng) : id_(id), cin_(cin), cout_(cout) {
  if (cin <= 0 || cout <= 0) throw std::invalid_argument("OpInstance: channel counts must be positive");
  if (!has_params(id) && cin != cout) {
    throw std::invalid_argument(std::string(op_name(id)) + " requires cin == cout, got " + std::to_string(cin) + " and " +
                                std::to_string(cout));
  }
  switch (id) {
    case PrimitiveOp::DownConv: conv_ = Conv2d(cin, cout, 3, {.stride = 2, .padding = 1}, rng); break;
    case PrimitiveOp::DownDilatedConv: conv_ = Conv2d(cin, cout, 3, {.stride = 2, .dilation = 2, .padding = 2}, rng); break;
    case PrimitiveOp::DownSeparableConv:
      conv_ = Conv2d(cin, cin, 3, {.stride = 2, .padding = 1, .groups = cin}, rng);
      break;
    case PrimitiveOp::UpConv: transpose_ = ConvTranspose2d(cin, cout, rng); break;
    case PrimitiveOp::UpDilatedConv:
    case PrimitiveOp::DilatedConv: conv_ = Conv2d(cin, cout, 3, {.dilation = 2, .padding = 2}, rng); break;
    case PrimitiveOp::UpSeparableConv:
    case PrimitiveOp::SeparableConv: conv_ = Conv2d(cin, cin, 3, {.padding = 1, .groups = cin}, rng); break;
    case PrimitiveOp::Conv: conv_ = Conv2d(cin, cout, 3, {.padding = 1}, rng); break;
    default: break;
  }
  if (is_separable(id)) pointwise_ = Conv2d(cin, cout, 1, {}, rng);
  if (has_params(id)) bn_ = BatchNorm2d(cout, false);
}

Tensor OpInstance::apply(const Tensor& x, bool training) {
  if (x.ndim() != 4 || x.dim(1) != cin_) {
    throw std::invalid_argument(std::string(op_name(id_)) + ": expected " + std::to_string(cin_) +
                                " input channels, got " + shape_str(x.shape()));
  }
  switch (id_) {
    case PrimitiveOp::MaxPool: return pool2d(x, PoolKind::Max);
    case PrimitiveOp::AvgPool: return pool2d(x, PoolKind::Avg);
    case PrimitiveOp::Identity: return x;
    case PrimitiveOp::Zero: return mul_scalar(x, Real(0));
    default: break;
  }
  Tensor h = relu(x);
  if (id_ == PrimitiveOp::UpConv) {
    h = transpose_.forward(h);
  } else {
    if (is_upsampled(id_)) h = upsample_nearest2x(h);
    h = conv_.forward(h);
    if (is_separable(id_)) h = pointwise_.forward(h);
  }
  return bn_.forward(h, training);
}

Shape OpInstance::output_shape(const Shape& in) const {
  const OpSet s = set_of(id_);
  return {in[0], cout_, spatial_out(s, in[2]), spatial_out(s, in[3])};
}

std::int64_t OpInstance::flops(const Shape& in) const {
  const Shape out = output_shape(in);
  switch (id_) {
    case PrimitiveOp::Identity:
    case PrimitiveOp::Zero: return 0;
    case PrimitiveOp::MaxPool:
    case PrimitiveOp::AvgPool: return std::int64_t(9) * out[0] * out[1] * out[2] * out[3];
    case PrimitiveOp::UpConv: return transpose_.flops(in);
    default: break;
  }
  const Shape conv_in = is_upsampled(id_) ? Shape{in[0], in[1], 2 * in[2], 2 * in[3]} : in;
  std::int64_t f = conv_.flops(conv_in);
  if (is_separable(id_)) f += pointwise_.flops(conv_.output_shape(conv_in));
  return f;
}

void OpInstance::collect(StateDict& sd, const std::string& prefix) {
  if (!has_params(id_)) return;
  if (id_ == PrimitiveOp::UpConv) {
    transpose_.collect(sd, prefix + "tconv.");
  } else {
    conv_.collect(sd, prefix + (is_separable(id_) ? "dw." : "conv."));
    if (is_separable(id_)) pointwise_.collect(sd, prefix + "pw.");
  }
  bn_.collect(sd, prefix + "bn.");
}

}  // namespace hwnas
