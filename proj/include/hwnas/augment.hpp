#pragma once

// Shared random similarity transform for (image, mask) pairs and batch
// assembly.

#include <cstdint>
#include <random>
#include <vector>

#include "hwnas/synthdata.hpp"
#include "hwnas/tensor.hpp"

namespace hwnas {

struct AugmentToggles {
  bool translation = true;
  bool rotation = true;
  bool scale = true;
  bool any() const { return translation || rotation || scale; }
};

struct Transform {
  double dx = 0, dy = 0;  // pixels
  double angle = 0;       // radians
  double scale = 1;
};

inline constexpr double kMaxShift = 0.10;      // fraction of the extent
inline constexpr double kMaxRotationDeg = 15;
inline constexpr double kMinScale = 0.9, kMaxScale = 1.1;

Transform draw_transform(const AugmentToggles& t, int height, int width, std::mt19937_64& rng);

// Image: bilinear; mask: nearest neighbor. Out-of-frame pixels read 0.
SynthSample apply_transform(const SynthSample& s, const Transform& tf);
SynthSample augment(const SynthSample& s, const AugmentToggles& t, std::mt19937_64& rng);

struct Batch {
  Tensor image;                    // [B,3,H,W]
  std::vector<std::uint8_t> mask;  // [B,H,W]
  int size = 0;
};

Batch make_batch(const Dataset& ds, const std::vector<int>& indices, const AugmentToggles* aug, std::mt19937_64* rng);

}  // namespace hwnas
