#include <random>
#include <set>

#include "doctest.h"
#include "gradcheck.hpp"
#include "op_catalog.hpp"
#include "hwnas/primitives.hpp"

using namespace hwnas;
using hwnas::testing::check_primitive;
using hwnas::testing::gradcheck;
using hwnas::testing::projected;
using hwnas::testing::random_tensor;

TEST_CASE("op sets have the catalog sizes and stable ids") {
  CHECK(ops_in(OpSet::Down).size() == 5);
  CHECK(ops_in(OpSet::Up).size() == 3);
  CHECK(ops_in(OpSet::Normal).size() == 5);

  std::set<std::string_view> names;
  for (int i = 0; i < kPrimitiveCount; ++i) {
    const auto op = static_cast<PrimitiveOp>(i);
    names.insert(op_name(op));
    REQUIRE(parse_op(op_name(op)).has_value());
    CHECK(*parse_op(op_name(op)) == op);
    CHECK(ops_in(set_of(op))[index_in_set(op)] == op);
  }
  CHECK(names.size() == kPrimitiveCount);
  CHECK_FALSE(parse_op("max_pooling").has_value());

  const std::vector<std::string_view> expected{"down_conv", "down_dilated_conv", "down_separable_conv", "max_pool",
                                               "avg_pool",  "up_conv",           "up_dilated_conv",     "up_separable_conv",
                                               "conv",      "dilated_conv",      "separable_conv",      "identity",
                                               "zero"};
  for (std::size_t i = 0; i < expected.size(); ++i) CHECK(op_name(static_cast<PrimitiveOp>(i)) == expected[i]);
}

TEST_CASE("spatial contract over random shapes") {
  Rng rng(11);
  std::uniform_int_distribution<int> half(1, 8), ch(1, 4);
  for (int t = 0; t < 100; ++t) {
    const int h = 2 * half(rng), w = 2 * half(rng), c = ch(rng), co = ch(rng), n = 1 + t % 2;
    for (int i = 0; i < kPrimitiveCount; ++i) {
      const auto op = static_cast<PrimitiveOp>(i);
      const bool bare = op == PrimitiveOp::MaxPool || op == PrimitiveOp::AvgPool || op == PrimitiveOp::Identity ||
                        op == PrimitiveOp::Zero;
      const int cout = bare ? c : co;
      OpInstance inst(op, c, cout, rng);
      Tensor x = random_tensor({n, c, h, w}, rng, -1, 1, false);
      const Tensor y = inst.apply(x, true);
      int eh = h, ew = w;
      if (set_of(op) == OpSet::Down) eh /= 2, ew /= 2;
      if (set_of(op) == OpSet::Up) eh *= 2, ew *= 2;
      CHECK(y.shape() == Shape{n, cout, eh, ew});
      CHECK(inst.output_shape(x.shape()) == y.shape());
    }
  }
}

TEST_CASE("zero absorbs values and gradients; identity passes through") {
  Rng rng(3);
  OpInstance zero(PrimitiveOp::Zero, 4, 4, rng);
  OpInstance id(PrimitiveOp::Identity, 4, 4, rng);
  Tensor x = random_tensor({2, 4, 6, 6}, rng);
  const Tensor z = zero.apply(x, true);
  CHECK(z.shape() == x.shape());
  for (Real v : z.values()) CHECK(v == 0);
  sum(z).backward();
  for (Real g : x.grad()) CHECK(g == 0);

  const Tensor y = id.apply(id.apply(x, true), true);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));
}

TEST_CASE("max pool on 8x16x16 gives 8x8x8; down conv halves 32x32") {
  Rng rng(4);
  OpInstance mp(PrimitiveOp::MaxPool, 8, 8, rng);
  CHECK(mp.apply(random_tensor({1, 8, 16, 16}, rng), true).shape() == Shape{1, 8, 8, 8});
  OpInstance dc(PrimitiveOp::DownConv, 4, 6, rng);
  CHECK(dc.apply(random_tensor({1, 4, 32, 32}, rng), true).shape() == Shape{1, 6, 16, 16});
}

TEST_CASE("instantiation and apply errors") {
  Rng rng(5);
  CHECK_THROWS_AS(OpInstance(PrimitiveOp::MaxPool, 4, 8, rng), std::invalid_argument);
  CHECK_THROWS_AS(OpInstance(PrimitiveOp::Identity, 2, 3, rng), std::invalid_argument);
  CHECK_THROWS_AS(OpInstance(PrimitiveOp::Conv, 0, 3, rng), std::invalid_argument);
  OpInstance conv(PrimitiveOp::Conv, 4, 4, rng);
  CHECK_THROWS_AS(conv.apply(random_tensor({1, 3, 8, 8}, rng), true), std::invalid_argument);
}

TEST_CASE("flop counts") {
  Rng rng(6);
  CHECK(OpInstance(PrimitiveOp::Zero, 4, 4, rng).flops({1, 4, 8, 8}) == 0);
  CHECK(OpInstance(PrimitiveOp::Identity, 4, 4, rng).flops({1, 4, 8, 8}) == 0);
  CHECK(OpInstance(PrimitiveOp::Conv, 1, 1, rng).flops({1, 1, 1, 1}) == 18);
  // max pool 4x8x8 -> 4x4x4: 9 * 64
  CHECK(OpInstance(PrimitiveOp::MaxPool, 4, 4, rng).flops({1, 4, 8, 8}) == 9 * 64);
  // dense 3x3 conv: 2 * cout * cin * 9 * H' * W'
  CHECK(OpInstance(PrimitiveOp::DownConv, 3, 5, rng).flops({2, 3, 8, 8}) == 2LL * 2 * 5 * 3 * 9 * 16);
  // up_dilated: conv at doubled resolution
  CHECK(OpInstance(PrimitiveOp::UpDilatedConv, 2, 2, rng).flops({1, 2, 4, 4}) == 2LL * 2 * 2 * 9 * 64);
  // separable: depthwise 2*C*9*HW + pointwise 2*C*C*HW
  CHECK(OpInstance(PrimitiveOp::SeparableConv, 4, 4, rng).flops({1, 4, 5, 5}) == 2LL * 4 * 9 * 25 + 2LL * 16 * 25);
  for (int c = 2; c <= 16; c *= 2) {
    const Shape s{1, c, 8, 8};
    CHECK(OpInstance(PrimitiveOp::SeparableConv, c, c, rng).flops(s) < OpInstance(PrimitiveOp::Conv, c, c, rng).flops(s));
    CHECK(OpInstance(PrimitiveOp::DownSeparableConv, c, c, rng).flops(s) <
          OpInstance(PrimitiveOp::DownConv, c, c, rng).flops(s));
  }
}

TEST_CASE("flops do not depend on weights") {
  Rng a(1), b(2);
  for (int i = 0; i < kPrimitiveCount; ++i) {
    const auto op = static_cast<PrimitiveOp>(i);
    CHECK(OpInstance(op, 4, 4, a).flops({1, 4, 8, 8}) == OpInstance(op, 4, 4, b).flops({1, 4, 8, 8}));
  }
}

TEST_CASE("separable conv equals the explicit depthwise then pointwise composition") {
  Rng rng(7);
  OpInstance sep(PrimitiveOp::SeparableConv, 3, 5, rng);
  StateDict sd;
  sep.collect(sd, "");
  Tensor dw, pw;
  for (auto& p : sd.params) {
    if (p.name == "dw.weight") dw = p.tensor;
    if (p.name == "pw.weight") pw = p.tensor;
  }
  REQUIRE(dw.defined());
  REQUIRE(pw.defined());
  CHECK(dw.shape() == Shape{3, 1, 3, 3});
  CHECK(pw.shape() == Shape{5, 3, 1, 1});

  Tensor x = random_tensor({2, 3, 6, 6}, rng, -1, 1, false);
  const Tensor y = sep.apply(x, false);

  // Direct loops: relu, per-channel 3x3 (pad 1), then channel mixing.
  const int n = 2, c = 3, co = 5, h = 6, w = 6;
  std::vector<double> mid(n * c * h * w, 0.0);
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          double s = 0;
          for (int ki = 0; ki < 3; ++ki)
            for (int kj = 0; kj < 3; ++kj) {
              const int ii = i + ki - 1, jj = j + kj - 1;
              if (ii < 0 || jj < 0 || ii >= h || jj >= w) continue;
              s += std::max<double>(0, x.at(((b * c + ch) * h + ii) * w + jj)) * dw.at(ch * 9 + ki * 3 + kj);
            }
          mid[((b * c + ch) * h + i) * w + j] = s;
        }
  std::vector<double> out(n * co * h * w, 0.0);
  for (int b = 0; b < n; ++b)
    for (int o = 0; o < co; ++o)
      for (int p = 0; p < h * w; ++p) {
        double s = 0;
        for (int ch = 0; ch < c; ++ch) s += pw.at(o * c + ch) * mid[(b * c + ch) * h * w + p];
        out[(b * co + o) * h * w + p] = s;
      }
  // Eval-mode BN with fresh running stats (mean 0, var 1) scales by 1/sqrt(1+eps).
  const double scale = 1.0 / std::sqrt(1.0 + 1e-5);
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(y.at(i) == doctest::Approx(out[i] * scale).epsilon(1e-10));
}

TEST_CASE("separable with delta depthwise and identity pointwise is relu followed by BN") {
  Rng rng(8);
  OpInstance sep(PrimitiveOp::SeparableConv, 2, 2, rng);
  StateDict sd;
  sep.collect(sd, "");
  for (auto& p : sd.params) {
    auto v = p.tensor.values();
    std::fill(v.begin(), v.end(), Real(0));
    if (p.name == "dw.weight") v[4] = v[13] = 1;
    if (p.name == "pw.weight") v[0] = v[3] = 1;
  }
  Tensor x = random_tensor({1, 2, 4, 4}, rng, 0.1, 1.0, false);
  const Tensor y = sep.apply(x, false);
  const double scale = 1.0 / std::sqrt(1.0 + 1e-5);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == doctest::Approx(x.at(i) * scale).epsilon(1e-12));
}

TEST_CASE("every primitive passes finite-difference checks") {
  for (int i = 0; i < kPrimitiveCount; ++i) {
    const auto op = static_cast<PrimitiveOp>(i);
    CHECK_MESSAGE(check_primitive(op, 20, 9 + i) <= 1e-3, op_name(op));
  }
}
