#include "hwnas/seg_net.hpp"

#include <stdexcept>

namespace hwnas {

namespace {

const std::vector<Tensor>* kind_weights(const ArchWeights* w, CellKind kind) {
  if (!w) return nullptr;
  auto it = w->find(kind);
  return it == w->end() ? nullptr : &it->second;
}

Shape at(const Shape& in, int c, int extent) { return {in[0], c, extent, extent}; }

}  // namespace

SegNet::SegNet(const SegNetConfig& cfg, const EdgeChoices& down, const EdgeChoices& up, Rng& rng) : cfg_(cfg) {
  if (cfg.depth < 1 || cfg.filters < 1) throw std::invalid_argument("SegNet: depth and filters must be positive");
  const int D = cfg.depth, F = cfg.filters;
  stem_ = Conv2d(cfg.in_channels, F, 3, {.padding = 1}, rng);
  stem_bn_ = BatchNorm2d(F, true);
  for (int k = 0; k < D; ++k) {
    const int c = F << (k + 1);
    const int c0 = k <= 1 ? F : F << (k - 1);  // s0 source channels
    const int c1 = k == 0 ? F : F << k;        // s1 source channels
    down_pre0_.emplace_back(c0, c, k == 0 ? 1 : 2, rng);
    down_pre1_.emplace_back(c1, c, 1, rng);
    down_.emplace_back(CellKind::Down, cfg.m, c, down, rng);
  }
  for (int j = 0; j < D; ++j) {
    const int c = F << (D - 1 - j);
    const int cin = F << (D - j);  // previous decoder output and skip share this width
    up_pre0_.emplace_back(cin, c, 1, rng);
    up_pre1_.emplace_back(cin, c, 1, rng);
    up_.emplace_back(CellKind::Up, cfg.m, c, up, rng);
  }
  head_ = Conv2d(F, 2, 1, {}, rng, true);
}

SegNet SegNet::supernet(const SegNetConfig& cfg, Rng& rng) {
  return SegNet(cfg, full_choices(CellKind::Down, cfg.m), full_choices(CellKind::Up, cfg.m), rng);
}

void SegNet::check_input(const Shape& input) const {
  const int div = 1 << cfg_.depth;
  if (input.size() != 4 || input[1] != cfg_.in_channels || input[2] % div != 0 || input[3] % div != 0 ||
      input[2] != input[3]) {
    throw std::invalid_argument("SegNet: input " + shape_str(input) + " must be [N," + std::to_string(cfg_.in_channels) +
                                ",H,W] with square H = W divisible by 2^depth = " + std::to_string(div));
  }
}

Tensor SegNet::logits(const Tensor& image, const ArchWeights* w, bool training) {
  check_input(image.shape());
  const auto* wd = kind_weights(w, CellKind::Down);
  const auto* wu = kind_weights(w, CellKind::Up);
  const int D = cfg_.depth;
  const Tensor stem = stem_bn_.forward(stem_.forward(image), training);
  std::vector<Tensor> downs;
  for (int k = 0; k < D; ++k) {
    const Tensor& a = k <= 1 ? stem : downs[k - 2];
    const Tensor& b = k == 0 ? stem : downs[k - 1];
    auto out = down_[k].forward({down_pre0_[k].forward(a, training), down_pre1_[k].forward(b, training)}, wd, training);
    if (!out) throw std::logic_error("SegNet: down cell produced no output");
    downs.push_back(*out);
  }
  Tensor prev = downs[D - 1];
  for (int j = 0; j < D; ++j) {
    const Tensor& skip = downs[D - 1 - j];
    auto out = up_[j].forward({up_pre0_[j].forward(prev, training), up_pre1_[j].forward(skip, training)}, wu, training);
    if (!out) throw std::logic_error("SegNet: up cell produced no output");
    prev = *out;
  }
  return head_.forward(prev);
}

SegOutput SegNet::forward(const Tensor& image, const ArchWeights* w, bool training) {
  SegOutput out;
  out.logits = logits(image, w, training);
  out.uncertainty = softmax_entropy(out.logits, 1);
  out.mask = argmax_mask(out.logits);
  return out;
}

EdgeChoices SegNet::choices(CellKind kind) const {
  if (kind == CellKind::Down) return down_.front().choices();
  if (kind == CellKind::Up) return up_.front().choices();
  throw std::invalid_argument("SegNet: no " + std::string(cell_kind_name(kind)) + " cells");
}

StateDict SegNet::state() {
  StateDict sd;
  stem_.collect(sd, "seg.stem.conv.");
  stem_bn_.collect(sd, "seg.stem.bn.");
  for (std::size_t k = 0; k < down_.size(); ++k) {
    const std::string p = "seg.down" + std::to_string(k) + ".";
    down_pre0_[k].collect(sd, p + "pre0.");
    down_pre1_[k].collect(sd, p + "pre1.");
    down_[k].collect(sd, p);
  }
  for (std::size_t j = 0; j < up_.size(); ++j) {
    const std::string p = "seg.up" + std::to_string(j) + ".";
    up_pre0_[j].collect(sd, p + "pre0.");
    up_pre1_[j].collect(sd, p + "pre1.");
    up_[j].collect(sd, p);
  }
  head_.collect(sd, "seg.head.");
  return sd;
}

std::int64_t SegNet::flops(const Shape& input) const {
  check_input(input);
  const int D = cfg_.depth, F = cfg_.filters, R = input[2];
  std::int64_t f = stem_.flops(input) + head_.flops(at(input, F, R));
  for (int k = 0; k < D; ++k) {
    const int r = R >> k;
    f += down_pre0_[k].flops(at(input, down_pre0_[k].conv.cin, k <= 1 ? R : r * 2));
    f += down_pre1_[k].flops(at(input, down_pre1_[k].conv.cin, r));
    f += down_[k].flops(at(input, down_[k].channels(), r));
  }
  for (int j = 0; j < D; ++j) {
    const int r = R >> (D - j);
    f += up_pre0_[j].flops(at(input, up_pre0_[j].conv.cin, r));
    f += up_pre1_[j].flops(at(input, up_pre1_[j].conv.cin, r));
    f += up_[j].flops(at(input, up_[j].channels(), r));
  }
  return f;
}

std::vector<EdgeSite> SegNet::edge_sites(const Shape& input) const {
  check_input(input);
  const int D = cfg_.depth, R = input[2];
  std::vector<EdgeSite> sites;
  for (int k = 0; k < D; ++k) {
    auto s = down_[k].edge_sites(k, at(input, down_[k].channels(), R >> k));
    sites.insert(sites.end(), s.begin(), s.end());
  }
  for (int j = 0; j < D; ++j) {
    auto s = up_[j].edge_sites(D + j, at(input, up_[j].channels(), R >> (D - j)));
    sites.insert(sites.end(), s.begin(), s.end());
  }
  return sites;
}

std::vector<LutKey> SegNet::fixed_keys(const Shape& input) const {
  check_input(input);
  const int D = cfg_.depth, F = cfg_.filters, R = input[2], N = input[0];
  std::vector<LutKey> keys;
  keys.push_back({"seg_stem", N, cfg_.in_channels, F, R, R, "-"});
  for (int k = 0; k < D; ++k) {
    const int r = R >> k;
    keys.push_back(down_pre0_[k].key(at(input, down_pre0_[k].conv.cin, k <= 1 ? R : r * 2)));
    keys.push_back(down_pre1_[k].key(at(input, down_pre1_[k].conv.cin, r)));
  }
  for (int j = 0; j < D; ++j) {
    const int r = R >> (D - j);
    keys.push_back(up_pre0_[j].key(at(input, up_pre0_[j].conv.cin, r)));
    keys.push_back(up_pre1_[j].key(at(input, up_pre1_[j].conv.cin, r)));
  }
  keys.push_back({"seg_head", N, F, 2, R, R, "-"});
  return keys;
}

std::vector<std::uint8_t> argmax_mask(const Tensor& logits) {
  if (logits.ndim() != 4 || logits.dim(1) != 2) throw std::invalid_argument("argmax_mask: expected [N,2,H,W] logits");
  const int n = logits.dim(0);
  const std::size_t hw = std::size_t(logits.dim(2)) * logits.dim(3);
  const auto v = logits.values();
  std::vector<std::uint8_t> mask(n * hw);
  for (int b = 0; b < n; ++b)
    for (std::size_t p = 0; p < hw; ++p) mask[b * hw + p] = v[(b * 2 + 1) * hw + p] > v[b * 2 * hw + p] ? 1 : 0;
  return mask;
}

double dice(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dice: mask sizes differ");
  std::size_t inter = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sa += a[i] != 0;
    sb += b[i] != 0;
    inter += (a[i] != 0) && (b[i] != 0);
  }
  if (sa + sb == 0) return 1.0;
  return 2.0 * double(inter) / double(sa + sb);
}

std::vector<double> batch_dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth, int n) {
  if (pred.size() != truth.size() || n <= 0 || pred.size() % n != 0) {
    throw std::invalid_argument("batch_dice: inconsistent mask sizes");
  }
  const std::size_t hw = pred.size() / n;
  std::vector<double> out;
  for (int b = 0; b < n; ++b) out.push_back(dice(pred.subspan(b * hw, hw), truth.subspan(b * hw, hw)));
  return out;
}

}  // namespace hwnas
