#pragma once

// ResNet-like quality-control network: predicts the Dice score of a
// segmentation from concat(image, 2-channel mask encoding, uncertainty).
//
//   stem: conv3x3(6 -> F) + BN
//   cells 1..2P alternate Contracting (odd) and NonScaling (even)
//     Contracting: Preprocess(cin -> cout) feeds the cell; residual is
//                  conv1x1 stride 2 + BN; H,W halve
//     NonScaling:  the cell reads its input directly; residual is identity
//   head: ReLU -> global average pool -> linear(C, 1) -> sigmoid
//
// Contracting cells multiply the channel count by `growth`.

#include <cstdint>
#include <span>
#include <vector>

#include "hwnas/cell.hpp"

namespace hwnas {

struct QcNetConfig {
  int pairs = 3;
  int m = 3;
  int filters = 8;
  int growth = 1;
  int in_channels = 6;
};

class QcNet {
 public:
  QcNet(const QcNetConfig& cfg, const EdgeChoices& contracting, const EdgeChoices& nonscaling, Rng& rng);
  static QcNet supernet(const QcNetConfig& cfg, Rng& rng);

  const QcNetConfig& config() const { return cfg_; }
  // x: [N, in_channels, H, W]. Returns [N] in (0,1).
  Tensor forward(const Tensor& x, const ArchWeights* w, bool training);
  // Assembles the network input from its three parts.
  Tensor predict_dice(const Tensor& image, const Tensor& mask_enc, const Tensor& uncertainty, const ArchWeights* w,
                      bool training);

  EdgeChoices choices(CellKind kind) const;
  StateDict state();
  std::int64_t flops(const Shape& input) const;
  std::vector<EdgeSite> edge_sites(const Shape& input) const;
  std::vector<LutKey> fixed_keys(const Shape& input) const;
  // Output channels of the last cell.
  int out_channels() const;

  int block_count() const { return static_cast<int>(blocks_.size()); }
  CellKind block_kind(int i) const { return blocks_.at(i).cell.kind(); }
  // Exposed for cell-level tests: runs block i (0-based) on x.
  Tensor block_forward(int i, const Tensor& x, const ArchWeights* w, bool training);

 private:
  struct Block {
    Cell cell;
    Preprocess pre;  // Contracting only
    Conv2d proj;     // Contracting only
    BatchNorm2d proj_bn;
    int cin, cout;
  };

  void check_input(const Shape& input) const;

  QcNetConfig cfg_;
  Conv2d stem_;
  BatchNorm2d stem_bn_;
  std::vector<Block> blocks_;
  Linear head_;
};

// One-hot [N,2,H,W] encoding of a hard [N,H,W] mask.
Tensor one_hot_mask(std::span<const std::uint8_t> mask, int n, int h, int w);

}  // namespace hwnas
