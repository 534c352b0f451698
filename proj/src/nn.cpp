#include "hwnas/nn.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_map>

namespace hwnas {

std::vector<Tensor> StateDict::param_tensors() const {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

std::size_t copy_matching(const StateDict& src, StateDict& dst) {
  std::unordered_map<std::string, const std::vector<Real>*> lookup;
  for (const auto& p : src.params) lookup.emplace(p.name, &p.tensor.raw());
  for (const auto& b : src.buffers) lookup.emplace(b.name, b.data);
  std::size_t copied = 0;
  auto copy_into = [&](const std::string& name, std::vector<Real>& target) {
    auto it = lookup.find(name);
    if (it == lookup.end()) return;
    if (it->second->size() != target.size()) throw std::invalid_argument("copy_matching: size mismatch for " + name);
    target = *it->second;
    ++copied;
  };
  for (auto& p : dst.params) copy_into(p.name, p.tensor.raw());
  for (auto& b : dst.buffers) copy_into(b.name, *b.data);
  return copied;
}

Tensor kaiming_uniform(Shape shape, int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<Real> v(numel(shape));
  for (auto& x : v) x = static_cast<Real>(dist(rng));
  return Tensor(std::move(shape), std::move(v), true);
}

Conv2d::Conv2d(int cin_, int cout_, int kernel_, Conv2dOptions opt_, Rng& rng, bool with_bias)
    : cin(cin_), cout(cout_), kernel(kernel_), opt(opt_) {
  if (cin % opt.groups || cout % opt.groups) throw std::invalid_argument("Conv2d: channels not divisible by groups");
  const int cin_g = cin / opt.groups;
  weight = kaiming_uniform({cout, cin_g, kernel, kernel}, cin_g * kernel * kernel, rng);
  if (with_bias) bias = Tensor({cout}, Real(0), true);
}

Tensor Conv2d::forward(const Tensor& x) const {
  Tensor y = conv2d(x, weight, opt);
  return bias.defined() ? channel_bias(y, bias) : y;
}

Shape Conv2d::output_shape(const Shape& in) const {
  return {in[0], cout, conv_out_extent(in[2], kernel, opt.stride, opt.dilation, opt.padding),
          conv_out_extent(in[3], kernel, opt.stride, opt.dilation, opt.padding)};
}

std::int64_t Conv2d::flops(const Shape& in) const {
  const Shape o = output_shape(in);
  return std::int64_t(2) * o[0] * cout * (cin / opt.groups) * kernel * kernel * o[2] * o[3];
}

void Conv2d::collect(StateDict& sd, const std::string& prefix) {
  sd.params.push_back({prefix + "weight", weight});
  if (bias.defined()) sd.params.push_back({prefix + "bias", bias});
}

ConvTranspose2d::ConvTranspose2d(int cin_, int cout_, Rng& rng) : cin(cin_), cout(cout_) {
  // Each output cell sees roughly cin*9/4 taps under stride 2.
  weight = kaiming_uniform({cin, cout, 3, 3}, std::max(1, cin * 9 / 4), rng);
}

std::int64_t ConvTranspose2d::flops(const Shape& in) const {
  return std::int64_t(2) * in[0] * cin * cout * 9 * in[2] * in[3];
}

void ConvTranspose2d::collect(StateDict& sd, const std::string& prefix) { sd.params.push_back({prefix + "weight", weight}); }

BatchNorm2d::BatchNorm2d(int channels_, bool affine) : channels(channels_) {
  state.running_mean.assign(static_cast<std::size_t>(channels), Real(0));
  state.running_var.assign(static_cast<std::size_t>(channels), Real(1));
  if (affine) {
    gamma = Tensor({channels}, Real(1), true);
    beta = Tensor({channels}, Real(0), true);
  }
}

Tensor BatchNorm2d::forward(const Tensor& x, bool training) { return batch_norm(x, gamma, beta, state, training); }

void BatchNorm2d::collect(StateDict& sd, const std::string& prefix) {
  if (gamma.defined()) {
    sd.params.push_back({prefix + "gamma", gamma});
    sd.params.push_back({prefix + "beta", beta});
  }
  sd.buffers.push_back({prefix + "running_mean", &state.running_mean});
  sd.buffers.push_back({prefix + "running_var", &state.running_var});
}

Linear::Linear(int in_, int out_, Rng& rng) : in(in_), out(out_) {
  weight = kaiming_uniform({out, in}, in, rng);
  bias = Tensor({out}, Real(0), true);
}

void Linear::collect(StateDict& sd, const std::string& prefix) {
  sd.params.push_back({prefix + "weight", weight});
  sd.params.push_back({prefix + "bias", bias});
}

Tensor channel_bias(const Tensor& x, const Tensor& bias) {
  if (x.ndim() != 4 || bias.ndim() != 1 || bias.dim(0) != x.dim(1)) {
    throw std::invalid_argument("channel_bias: " + shape_str(x.shape()) + " with bias " + shape_str(bias.shape()));
  }
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  std::vector<Real> out(x.raw());
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (std::size_t q = 0; q < hw; ++q) out[(static_cast<std::size_t>(i) * c + ch) * hw + q] += bias.at(ch);
  return make_result(x.shape(), std::move(out), {x, bias}, [n, c, hw](const TensorNode& self) {
    auto pg = [&](std::size_t i) -> Real* {
      TensorNode* p = self.parents[i].get();
      return p && p->requires_grad ? p->ensure_grad().data() : nullptr;
    };
    if (Real* gx = pg(0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
    if (Real* gb = pg(1))
      for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch)
          for (std::size_t q = 0; q < hw; ++q) gb[ch] += self.grad[(static_cast<std::size_t>(i) * c + ch) * hw + q];
  });
}

}  // namespace hwnas
