#include "hwnas/augment.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace hwnas {

Transform draw_transform(const AugmentToggles& t, int height, int width, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Transform tf;
  // Draw every component so toggles do not shift the stream.
  const double a = u(rng), b = u(rng), c = u(rng), d = u(rng);
  if (t.translation) {
    tf.dx = a * kMaxShift * width;
    tf.dy = b * kMaxShift * height;
  }
  if (t.rotation) tf.angle = c * kMaxRotationDeg * std::numbers::pi / 180.0;
  if (t.scale) tf.scale = 0.5 * (kMinScale + kMaxScale) + d * 0.5 * (kMaxScale - kMinScale);
  return tf;
}

SynthSample apply_transform(const SynthSample& s, const Transform& tf) {
  if (tf.dx == 0 && tf.dy == 0 && tf.angle == 0 && tf.scale == 1) return s;
  const int h = s.height, w = s.width;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  SynthSample out = s;
  const double cx = w / 2.0, cy = h / 2.0;
  const double co = std::cos(tf.angle), si = std::sin(tf.angle);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      // Inverse map of the output pixel center into the source frame.
      const double px = x + 0.5 - cx - tf.dx, py = y + 0.5 - cy - tf.dy;
      const double sx = (co * px + si * py) / tf.scale + cx, sy = (-si * px + co * py) / tf.scale + cy;
      const std::size_t o = static_cast<std::size_t>(y) * w + x;

      const int nx = static_cast<int>(std::floor(sx)), ny = static_cast<int>(std::floor(sy));
      out.mask[o] = nx >= 0 && nx < w && ny >= 0 && ny < h ? s.mask[static_cast<std::size_t>(ny) * w + nx] : 0;

      const double fx = sx - 0.5, fy = sy - 0.5;
      const int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
      const double ax = fx - x0, ay = fy - y0;
      for (int c = 0; c < 3; ++c) {
        const float* src = s.image.data() + c * hw;
        auto px_at = [&](int yy, int xx) -> double {
          return xx >= 0 && xx < w && yy >= 0 && yy < h ? src[static_cast<std::size_t>(yy) * w + xx] : 0.0;
        };
        const double v = (1 - ay) * ((1 - ax) * px_at(y0, x0) + ax * px_at(y0, x0 + 1)) +
                         ay * ((1 - ax) * px_at(y0 + 1, x0) + ax * px_at(y0 + 1, x0 + 1));
        out.image[c * hw + o] = static_cast<float>(v);
      }
    }
  return out;
}

SynthSample augment(const SynthSample& s, const AugmentToggles& t, std::mt19937_64& rng) {
  if (!t.any()) return s;
  return apply_transform(s, draw_transform(t, s.height, s.width, rng));
}

Batch make_batch(const Dataset& ds, const std::vector<int>& indices, const AugmentToggles* aug, std::mt19937_64* rng) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty index list");
  const int h = ds.manifest.height, w = ds.manifest.width;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Batch b;
  b.size = static_cast<int>(indices.size());
  std::vector<Real> img(b.size * 3 * hw);
  b.mask.resize(b.size * hw);
  for (int i = 0; i < b.size; ++i) {
    const SynthSample& src = ds.samples.at(indices[i]);
    const SynthSample s = aug && rng ? augment(src, *aug, *rng) : src;
    std::copy(s.image.begin(), s.image.end(), img.begin() + i * 3 * hw);
    std::copy(s.mask.begin(), s.mask.end(), b.mask.begin() + i * hw);
  }
  b.image = Tensor({b.size, 3, h, w}, std::move(img));
  return b;
}

}  // namespace hwnas
