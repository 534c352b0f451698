#pragma once

// Every differentiable op of the engine with a gradient-check recipe.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "hwnas/latency.hpp"
#include "hwnas/primitives.hpp"

namespace hwnas::testing {

struct OpCase {
  std::string name;
  // Maps inputs to a tensor; `rng` supplies any fixed auxiliary data and is
  // reseeded identically before every evaluation.
  std::function<Tensor(const std::vector<Tensor>&, Rng&)> op;
  std::vector<Shape> shapes;
  double lo = -1, hi = 1;
  // Non-smooth ops get well-separated distinct input values so that no
  // finite-difference probe crosses a kink.
  bool separated = false;
  // Inputs kept clear of zero, for ops with a kink there.
  bool kink_at_zero = false;
};

inline void separate(Tensor& t, std::mt19937_64& rng) {
  std::vector<Real> levels(t.numel());
  for (std::size_t i = 0; i < levels.size(); ++i) levels[i] = static_cast<Real>(-1.0 + 0.01 * static_cast<double>(i));
  std::shuffle(levels.begin(), levels.end(), rng);
  t.raw() = levels;
}

// Pushes values within `margin` of zero out to +-margin.
inline void clear_of_zero(Tensor& t, double margin = 1e-3) {
  for (Real& v : t.raw())
    if (std::abs(v) < margin) v = static_cast<Real>(v < 0 ? -margin : margin);
}

inline std::vector<OpCase> op_catalog() {
  using V = const std::vector<Tensor>&;
  std::vector<OpCase> c;
  c.push_back({"add", [](V in, Rng&) { return add(in[0], in[1]); }, {{2, 3, 4}, {2, 3, 4}}});
  c.push_back({"add_n", [](V in, Rng&) { return add_n({in[0], in[1], in[2]}); }, {{2, 5}, {2, 5}, {2, 5}}});
  c.push_back({"sub", [](V in, Rng&) { return sub(in[0], in[1]); }, {{2, 3, 4}, {2, 3, 4}}});
  c.push_back({"mul", [](V in, Rng&) { return mul(in[0], in[1]); }, {{2, 3, 4}, {2, 3, 4}}});
  c.push_back({"mul_scalar", [](V in, Rng&) { return mul_scalar(in[0], Real(-2.5)); }, {{7}}});
  c.push_back({"add_const",
               [](V in, Rng& r) { return add_const(in[0], random_vector(in[0].numel(), r)); },
               {{3, 4}}});
  c.push_back({"relu", [](V in, Rng&) { return relu(in[0]); }, {{2, 3, 4, 4}}, -1, 1, false, true});
  c.push_back({"sigmoid", [](V in, Rng&) { return sigmoid(in[0]); }, {{2, 5}}, -4, 4});
  c.push_back({"reshape", [](V in, Rng&) { return reshape(in[0], {6, 4}); }, {{2, 3, 4}}});
  c.push_back({"sum", [](V in, Rng&) { return sum(in[0]); }, {{3, 5}}});
  c.push_back({"mean", [](V in, Rng&) { return mean(in[0]); }, {{3, 5}}});
  c.push_back({"dot_const", [](V in, Rng& r) { return dot_const(in[0], random_vector(in[0].numel(), r)); }, {{9}}});
  c.push_back({"weighted_sum", [](V in, Rng&) { return weighted_sum({in[0], in[1], in[2]}, in[3]); },
               {{2, 3}, {2, 3}, {2, 3}, {3}}});
  c.push_back({"softmax", [](V in, Rng&) { return softmax(in[0], 1); }, {{2, 4, 3, 3}}, -3, 3});
  c.push_back({"softmax_entropy", [](V in, Rng&) { return softmax_entropy(in[0], 1); }, {{2, 2, 3, 3}}, -3, 3});
  c.push_back({"concat", [](V in, Rng&) { return concat({in[0], in[1]}, 1); }, {{2, 1, 3, 3}, {2, 2, 3, 3}}});
  c.push_back({"conv2d", [](V in, Rng&) { return conv2d(in[0], in[1], {.padding = 1}); }, {{2, 3, 6, 6}, {4, 3, 3, 3}}});
  c.push_back({"conv2d_strided_dilated",
               [](V in, Rng&) { return conv2d(in[0], in[1], {.stride = 2, .dilation = 2, .padding = 2}); },
               {{2, 3, 8, 8}, {2, 3, 3, 3}}});
  c.push_back({"conv2d_depthwise",
               [](V in, Rng&) { return conv2d(in[0], in[1], {.stride = 2, .padding = 1, .groups = 3}); },
               {{2, 3, 8, 8}, {3, 1, 3, 3}}});
  c.push_back({"conv2d_transpose", [](V in, Rng&) { return conv2d_transpose(in[0], in[1]); },
               {{2, 3, 3, 3}, {3, 2, 3, 3}}});
  c.push_back({"max_pool", [](V in, Rng&) { return pool2d(in[0], PoolKind::Max); }, {{2, 3, 6, 6}}, -1, 1, true});
  c.push_back({"avg_pool", [](V in, Rng&) { return pool2d(in[0], PoolKind::Avg); }, {{2, 3, 6, 6}}});
  c.push_back({"upsample_nearest2x", [](V in, Rng&) { return upsample_nearest2x(in[0]); }, {{1, 2, 3, 3}}});
  c.push_back({"global_avg_pool", [](V in, Rng&) { return global_avg_pool(in[0]); }, {{2, 3, 4, 4}}});
  c.push_back({"linear", [](V in, Rng&) { return linear(in[0], in[1], in[2]); }, {{3, 5}, {4, 5}, {4}}});
  c.push_back({"channel_bias", [](V in, Rng&) { return channel_bias(in[0], in[1]); }, {{2, 3, 2, 2}, {3}}});
  c.push_back({"batch_norm_train",
               [](V in, Rng&) {
                 BatchNormState st{std::vector<Real>(3, 0), std::vector<Real>(3, 1)};
                 return batch_norm(in[0], in[1], in[2], st, true);
               },
               {{4, 3, 3, 3}, {3}, {3}}});
  c.push_back({"batch_norm_eval",
               [](V in, Rng&) {
                 BatchNormState st{std::vector<Real>(3, 0.2), std::vector<Real>(3, 1.5)};
                 return batch_norm(in[0], in[1], in[2], st, false);
               },
               {{2, 3, 3, 3}, {3}, {3}}});
  c.push_back({"cross_entropy_2d",
               [](V in, Rng& r) {
                 std::vector<std::uint8_t> t(in[0].numel() / 2);
                 for (auto& v : t) v = static_cast<std::uint8_t>(r() % 2);
                 return cross_entropy_2d(in[0], t);
               },
               {{2, 2, 4, 4}}, -3, 3});
  c.push_back({"mse", [](V in, Rng&) { return mse(in[0], in[1]); }, {{6}, {6}}});
  c.push_back({"gumbel_edge_latency",
               [](V in, Rng& r) {
                 const std::vector<Real> lut{1, 2.5, 4, 0.5};
                 return edge_latency(in[0], lut, Real(0.7), r);
               },
               {{4}}, -2, 2});
  return c;
}

// Worst norm-wise relative error over `trials` random draws.
inline double check_case(const OpCase& c, int trials, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double worst = 0;
  for (int t = 0; t < trials; ++t) {
    std::vector<Tensor> in;
    for (const auto& s : c.shapes) {
      in.push_back(random_tensor(s, rng, c.lo, c.hi));
      if (c.separated) separate(in.back(), rng);
      if (c.kink_at_zero) clear_of_zero(in.back());
    }
    const std::uint64_t aux = rng();
    auto fixed = [&c, aux](const std::vector<Tensor>& v) {
      Rng r(aux);
      return c.op(v, r);
    };
    std::size_t out_numel;
    {
      NoGradGuard ng;
      out_numel = fixed(in).numel();
    }
    const auto f = out_numel == 1 ? std::function<Tensor(const std::vector<Tensor>&)>(fixed)
                                  : projected(fixed, out_numel, rng);
    worst = std::max(worst, gradcheck(f, in).worst_relative_error);
  }
  return worst;
}

// Same check for one primitive op instance at 2 channels, 4x4 input.
inline double check_primitive(PrimitiveOp op, int trials, std::uint64_t seed) {
  Rng rng(seed);
  OpInstance inst(op, 2, 2, rng);
  const Shape in{2, 2, 4, 4};
  const auto out = numel(inst.output_shape(in));
  double worst = 0;
  for (int t = 0; t < trials; ++t) {
    Tensor x = random_tensor(in, rng);
    if (op == PrimitiveOp::MaxPool) separate(x, rng);
    clear_of_zero(x);  // conv-bearing ops start with relu
    auto f = projected([&inst](const std::vector<Tensor>& v) { return inst.apply(v[0], true); }, out, rng);
    worst = std::max(worst, gradcheck(f, {x}).worst_relative_error);
  }
  return worst;
}

}  // namespace hwnas::testing
