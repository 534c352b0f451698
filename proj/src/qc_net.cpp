#include "hwnas/qc_net.hpp"

#include <stdexcept>

namespace hwnas {

namespace {

bool contracting(int i) { return i % 2 == 0; }

}  // namespace

QcNet::QcNet(const QcNetConfig& cfg, const EdgeChoices& contracting_choices, const EdgeChoices& nonscaling_choices,
             Rng& rng)
    : cfg_(cfg) {
  if (cfg.pairs < 1 || cfg.filters < 1 || cfg.growth < 1) throw std::invalid_argument("QcNet: invalid config");
  stem_ = Conv2d(cfg.in_channels, cfg.filters, 3, {.padding = 1}, rng);
  stem_bn_ = BatchNorm2d(cfg.filters, true);
  int c = cfg.filters;
  for (int i = 0; i < 2 * cfg.pairs; ++i) {
    if (contracting(i)) {
      const int cout = c * cfg.growth;
      Block b{Cell(CellKind::Contracting, cfg.m, cout, contracting_choices, rng), Preprocess(c, cout, 1, rng),
              Conv2d(c, cout, 1, {.stride = 2}, rng), BatchNorm2d(cout, true), c, cout};
      blocks_.push_back(std::move(b));
      c = cout;
    } else {
      blocks_.push_back({Cell(CellKind::NonScaling, cfg.m, c, nonscaling_choices, rng), {}, {}, {}, c, c});
    }
  }
  head_ = Linear(c, 1, rng);
}

QcNet QcNet::supernet(const QcNetConfig& cfg, Rng& rng) {
  return QcNet(cfg, full_choices(CellKind::Contracting, cfg.m), full_choices(CellKind::NonScaling, cfg.m), rng);
}

int QcNet::out_channels() const { return blocks_.back().cout; }

void QcNet::check_input(const Shape& input) const {
  const int div = 1 << cfg_.pairs;
  if (input.size() != 4 || input[1] != cfg_.in_channels || input[2] % div != 0 || input[3] % div != 0 ||
      input[2] != input[3]) {
    throw std::invalid_argument("QcNet: input " + shape_str(input) + " must be [N," + std::to_string(cfg_.in_channels) +
                                ",H,W] with square H = W divisible by " + std::to_string(div));
  }
}

Tensor QcNet::block_forward(int i, const Tensor& x, const ArchWeights* w, bool training) {
  Block& b = blocks_.at(i);
  const std::vector<Tensor>* weights = nullptr;
  if (w) {
    auto it = w->find(b.cell.kind());
    if (it != w->end()) weights = &it->second;
  }
  if (x.ndim() != 4 || x.dim(1) != b.cin) {
    throw std::invalid_argument("QcNet: block " + std::to_string(i) + " expects " + std::to_string(b.cin) +
                                " channels, got " + shape_str(x.shape()));
  }
  if (contracting(i)) {
    const Tensor residual = b.proj_bn.forward(b.proj.forward(x), training);
    auto out = b.cell.forward({b.pre.forward(x, training)}, weights, training);
    return out ? add(*out, residual) : residual;
  }
  auto out = b.cell.forward({x}, weights, training);
  return out ? add(*out, x) : x;
}

Tensor QcNet::forward(const Tensor& x, const ArchWeights* w, bool training) {
  check_input(x.shape());
  Tensor h = stem_bn_.forward(stem_.forward(x), training);
  for (int i = 0; i < static_cast<int>(blocks_.size()); ++i) h = block_forward(i, h, w, training);
  const Tensor y = sigmoid(head_.forward(global_avg_pool(relu(h))));
  return reshape(y, {x.dim(0)});
}

Tensor QcNet::predict_dice(const Tensor& image, const Tensor& mask_enc, const Tensor& uncertainty,
                           const ArchWeights* w, bool training) {
  const auto spatial = [](const Tensor& t) { return t.ndim() == 4 ? Shape{t.dim(0), t.dim(2), t.dim(3)} : Shape{}; };
  if (spatial(image).empty() || spatial(image) != spatial(mask_enc) || spatial(image) != spatial(uncertainty)) {
    throw std::invalid_argument("predict_dice: spatial mismatch between " + shape_str(image.shape()) + ", " +
                                shape_str(mask_enc.shape()) + " and " + shape_str(uncertainty.shape()));
  }
  return forward(concat({image, mask_enc, uncertainty}, 1), w, training);
}

EdgeChoices QcNet::choices(CellKind kind) const {
  for (const Block& b : blocks_)
    if (b.cell.kind() == kind) return b.cell.choices();
  throw std::invalid_argument("QcNet: no " + std::string(cell_kind_name(kind)) + " cells");
}

StateDict QcNet::state() {
  StateDict sd;
  stem_.collect(sd, "qc.stem.conv.");
  stem_bn_.collect(sd, "qc.stem.bn.");
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    Block& b = blocks_[i];
    const std::string p = "qc.cell" + std::to_string(i) + ".";
    if (contracting(static_cast<int>(i))) {
      b.pre.collect(sd, p + "pre.");
      b.proj.collect(sd, p + "proj.conv.");
      b.proj_bn.collect(sd, p + "proj.bn.");
    }
    b.cell.collect(sd, p);
  }
  head_.collect(sd, "qc.head.");
  return sd;
}

std::int64_t QcNet::flops(const Shape& input) const {
  check_input(input);
  int r = input[2];
  std::int64_t f = stem_.flops(input);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const Block& b = blocks_[i];
    const Shape in{input[0], b.cin, r, r};
    if (contracting(static_cast<int>(i))) {
      f += b.pre.flops(in) + b.proj.flops(in);
    }
    f += b.cell.flops({input[0], b.cout, r, r});
    r = b.cell.output_extent(r);
  }
  return f + head_.flops(input[0]);
}

std::vector<EdgeSite> QcNet::edge_sites(const Shape& input) const {
  check_input(input);
  int r = input[2];
  std::vector<EdgeSite> sites;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const Block& b = blocks_[i];
    auto s = b.cell.edge_sites(static_cast<int>(i), {input[0], b.cout, r, r});
    sites.insert(sites.end(), s.begin(), s.end());
    r = b.cell.output_extent(r);
  }
  return sites;
}

std::vector<LutKey> QcNet::fixed_keys(const Shape& input) const {
  check_input(input);
  const int N = input[0];
  int r = input[2];
  std::vector<LutKey> keys;
  keys.push_back({"qc_stem", N, cfg_.in_channels, cfg_.filters, r, r, "-"});
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const Block& b = blocks_[i];
    if (contracting(static_cast<int>(i))) {
      keys.push_back(b.pre.key({N, b.cin, r, r}));
      keys.push_back({"residual_proj", N, b.cin, b.cout, r, r, "s2"});
    }
    r = b.cell.output_extent(r);
  }
  keys.push_back({"qc_head", N, out_channels(), 1, r, r, "-"});
  return keys;
}

Tensor one_hot_mask(std::span<const std::uint8_t> mask, int n, int h, int w) {
  const std::size_t hw = std::size_t(h) * w;
  if (mask.size() != n * hw) throw std::invalid_argument("one_hot_mask: size mismatch");
  std::vector<Real> v(2 * n * hw);
  for (int b = 0; b < n; ++b)
    for (std::size_t p = 0; p < hw; ++p) v[(b * 2 + (mask[b * hw + p] ? 1 : 0)) * hw + p] = 1;
  return Tensor({n, 2, h, w}, std::move(v));
}

}  // namespace hwnas
