#pragma once

// U-net-like segmentation network built from Down and Up cells.
//
//   stem: conv3x3(in -> F) + BN                       at R
//   down cell k (k = 0..D-1): F*2^(k+1) channels,     R/2^k -> R/2^(k+1)
//       inputs (s0, s1) = (stem, stem) for k = 0, (stem, down0) for k = 1,
//       (down_{k-2}, down_{k-1}) afterwards; s0 is strided when it sits one
//       resolution level above s1
//   up cell j (j = 0..D-1): F*2^(D-1-j) channels,     R/2^(D-j) -> R/2^(D-1-j)
//       inputs (previous decoder output or down_{D-1}, skip from down_{D-1-j})
//   head: conv1x1(F -> 2) with bias
//
// Every cell input passes through a Preprocess block. The same class serves
// as the supernet (full candidate sets per edge) and as a derived network
// (one or zero ops per edge).

#include <cstdint>
#include <span>
#include <vector>

#include "hwnas/cell.hpp"

namespace hwnas {

struct SegNetConfig {
  int depth = 3;
  int m = 3;
  int filters = 4;
  int in_channels = 3;
};

struct SegOutput {
  Tensor logits;       // [N,2,H,W]
  Tensor uncertainty;  // [N,1,H,W], softmax entropy
  std::vector<std::uint8_t> mask;  // [N,H,W], argmax of logits
};

class SegNet {
 public:
  SegNet(const SegNetConfig& cfg, const EdgeChoices& down, const EdgeChoices& up, Rng& rng);
  static SegNet supernet(const SegNetConfig& cfg, Rng& rng);

  const SegNetConfig& config() const { return cfg_; }
  // `w` supplies mixing weights for the Down and Up kinds; it may be null
  // for derived networks.
  Tensor logits(const Tensor& image, const ArchWeights* w, bool training);
  SegOutput forward(const Tensor& image, const ArchWeights* w, bool training);

  EdgeChoices choices(CellKind kind) const;
  StateDict state();
  std::int64_t flops(const Shape& input) const;
  std::vector<EdgeSite> edge_sites(const Shape& input) const;
  std::vector<LutKey> fixed_keys(const Shape& input) const;
  void check_input(const Shape& input) const;

 private:
  SegNetConfig cfg_;
  Conv2d stem_;
  BatchNorm2d stem_bn_;
  std::vector<Cell> down_, up_;
  std::vector<Preprocess> down_pre0_, down_pre1_, up_pre0_, up_pre1_;
  Conv2d head_;
};

std::vector<std::uint8_t> argmax_mask(const Tensor& logits);

// 2|A & B| / (|A| + |B|), 1 when both masks are empty.
double dice(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);
// Per-sample dice for [N,H,W] masks.
std::vector<double> batch_dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth, int n);

}  // namespace hwnas
