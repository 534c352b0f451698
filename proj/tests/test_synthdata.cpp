#include <algorithm>
#include <filesystem>
#include <numeric>
#include <set>

#include "doctest.h"
#include "hwnas/augment.hpp"
#include "hwnas/seg_net.hpp"
#include "hwnas/synthdata.hpp"
#include "hwnas/textio.hpp"

using namespace hwnas;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("hwnas_test_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<const SynthSample*> all(const Dataset& ds) {
  std::vector<const SynthSample*> v;
  for (const auto& s : ds.samples) v.push_back(&s);
  return v;
}

std::string tree_bytes(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string out;
  for (const auto& f : files) out += fs::relative(f, dir).string() + "\n" + read_text(f);
  return out;
}

}  // namespace

TEST_CASE("generation is deterministic and patients are independent") {
  const Dataset a = generate(7, 5, 4, 32, 32);
  const Dataset b = generate(7, 5, 4, 32, 32);
  CHECK(a.manifest.serialize() == b.manifest.serialize());
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(a.samples[i].image == b.samples[i].image);
    CHECK(a.samples[i].mask == b.samples[i].mask);
  }
  const Dataset fewer = generate(7, 4, 4, 32, 32);
  for (int p = 0; p < 4; ++p)
    for (int f = 0; f < 4; ++f) {
      CHECK(fewer.at(p, f).image == a.at(p, f).image);
      CHECK(fewer.at(p, f).mask == a.at(p, f).mask);
    }
  const Dataset other = generate(8, 5, 4, 32, 32);
  CHECK(other.at(0, 0).image != a.at(0, 0).image);
}

TEST_CASE("sample invariants") {
  const Dataset ds = generate(11, 12, 10, 32, 32);
  for (const auto& s : ds.samples) {
    CHECK(s.image.size() == 3u * 32 * 32);
    for (float v : s.image) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
    const double fg = std::accumulate(s.mask.begin(), s.mask.end(), 0.0) / s.mask.size();
    CHECK(fg >= kMinForeground);
    CHECK(fg <= kMaxForeground);
    for (auto m : s.mask) CHECK(m <= 1);
    CHECK(s.degradation.level >= 0);
    CHECK(s.degradation.level <= 1);
  }
  const Dataset big = generate(11, 3, 4, 64, 64);
  CHECK(big.at(0, 0).mask.size() == 64u * 64);
}

TEST_CASE("clean renders are recovered exactly by thresholding") {
  const Dataset ds = generate(3, 8, 10, 32, 32, {.max_level = 0});
  for (const auto& s : ds.samples) {
    CHECK(s.degradation.noise == 0);
    CHECK(s.degradation.occlusions.empty());
    CHECK(dice(threshold_segment(s, 0.37f), s.mask) == 1.0);
  }
}

TEST_CASE("quality spread: clean data fails, default degradation varies and hurts") {
  const Dataset clean = generate(3, 8, 10, 32, 32, {.max_level = 0});
  CHECK_THROWS_WITH(quality_spread_check(all(clean), [](const SynthSample& s) { return threshold_segment(s, 0.37f); }),
                    doctest::Contains("degradation"));
  const Dataset ds = generate(3, 20, 20, 32, 32);
  const QualitySpread q = quality_spread_check(all(ds), [](const SynthSample& s) { return threshold_segment(s, 0.37f); });
  CHECK(q.stddev >= 0.05);
  CHECK(q.mean_severe < q.mean_mild);
  CHECK(q.count == 400);
}

TEST_CASE("splits are by patient, 8:2 then halved") {
  const auto sp = plan_splits(5, 40);
  CHECK(std::count(sp.begin(), sp.end(), Split::Test) == 8);
  CHECK(std::count(sp.begin(), sp.end(), Split::SegTrain) == 16);
  CHECK(std::count(sp.begin(), sp.end(), Split::SegEval) == 16);
  CHECK(plan_splits(5, 40) == sp);
  CHECK(plan_splits(6, 40) != sp);

  const Dataset ds = generate(5, 10, 3, 32, 32);
  ds.check_splits();
  std::set<int> seen;
  for (Split s : {Split::SegTrain, Split::SegEval, Split::Test})
    for (int p : ds.patients_in(s)) CHECK(seen.insert(p).second);
  CHECK(seen.size() == 10);
  for (int i : ds.indices_of(ds.patients_in(Split::Test))) CHECK(ds.manifest.split[ds.samples[i].patient] == Split::Test);
  CHECK_THROWS(plan_splits(1, 2));
}

TEST_CASE("dataset files round-trip byte for byte and regenerate from the manifest") {
  const Dataset ds = generate(21, 4, 3, 32, 32);
  const fs::path d1 = fresh_dir("ds1"), d2 = fresh_dir("ds2");
  save_dataset(ds, d1);
  const Dataset loaded = load_dataset(d1);
  save_dataset(loaded, d2);
  CHECK(tree_bytes(d1) == tree_bytes(d2));
  CHECK(fs::exists(d1 / "p003" / "f002_image.ppm"));
  CHECK(fs::exists(d1 / "p003" / "f002_mask.pgm"));

  const auto& m = loaded.manifest;
  for (int p = 0; p < m.patients; ++p)
    for (int f = 0; f < m.frames; ++f) {
      const SynthSample r = render_frame(m.seed, p, f, m.height, m.width, {.max_level = m.level_max, .skew = m.level_skew});
      CHECK(r.image == loaded.at(p, f).image);
      CHECK(r.mask == loaded.at(p, f).mask);
      CHECK(r.degradation == loaded.at(p, f).degradation);
    }
}

TEST_CASE("manifest and image errors") {
  CHECK_THROWS_WITH(load_dataset(fresh_dir("missing")), doctest::Contains("gen-data"));
  const Dataset ds = generate(21, 3, 2, 32, 32);
  const std::string text = ds.manifest.serialize();
  CHECK(DatasetManifest::parse(text).serialize() == text);
  CHECK_THROWS(DatasetManifest::parse("seed 1\n"));
  std::string dup = text + "split 0 test\n";
  CHECK_THROWS_WITH(DatasetManifest::parse(dup), doctest::Contains("two splits"));
  std::string missing = text.substr(0, text.rfind("frame "));
  CHECK_THROWS_WITH(DatasetManifest::parse(missing), doctest::Contains("no frame record"));

  const fs::path d = fresh_dir("badmask");
  save_dataset(ds, d);
  std::vector<std::uint8_t> gray(32 * 32, 0);
  gray[5] = 17;
  write_pgm(mask_path(d, 1, 1), 32, 32, gray);
  CHECK_THROWS_WITH(load_dataset(d), doctest::Contains("not binary"));
  write_pgm(mask_path(d, 1, 1), 16, 16, std::vector<std::uint8_t>(256, 0));
  CHECK_THROWS_WITH(load_dataset(d), doctest::Contains("size mismatch"));
}

TEST_CASE("augmentation contract") {
  const Dataset ds = generate(31, 3, 4, 32, 32);
  const SynthSample& s = ds.at(1, 2);
  std::mt19937_64 rng(4);

  const SynthSample id = augment(s, {false, false, false}, rng);
  CHECK(id.image == s.image);
  CHECK(id.mask == s.mask);

  for (int t = 0; t < 500; ++t) {
    const Transform tf = draw_transform({}, 32, 32, rng);
    CHECK(std::abs(tf.dx) <= 3.2);
    CHECK(std::abs(tf.dy) <= 3.2);
    CHECK(std::abs(tf.angle) <= 15 * 3.14159265358979 / 180 + 1e-12);
    CHECK(tf.scale >= 0.9);
    CHECK(tf.scale <= 1.1);
  }

  // Integer shift oracle.
  const SynthSample sh = apply_transform(s, {.dx = 2, .dy = -3});
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      const int sx = x - 2, sy = y + 3;
      const std::uint8_t expect = sx >= 0 && sx < 32 && sy >= 0 && sy < 32 ? s.mask[sy * 32 + sx] : 0;
      CHECK(sh.mask[y * 32 + x] == expect);
      const float e0 = sx >= 0 && sx < 32 && sy >= 0 && sy < 32 ? s.image[sy * 32 + sx] : 0.0f;
      CHECK(sh.image[y * 32 + x] == doctest::Approx(e0).epsilon(1e-6));
    }

  // The same transform applied to the mask rendered as an image agrees with
  // the nearest-neighbor mask path.
  SynthSample as_image = s;
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < s.mask.size(); ++i) as_image.image[c * s.mask.size() + i] = s.mask[i];
  for (int t = 0; t < 50; ++t) {
    const Transform tf = draw_transform({}, 32, 32, rng);
    const SynthSample a = apply_transform(as_image, tf);
    const SynthSample b = apply_transform(as_image, tf);
    CHECK(dice(a.mask, b.mask) == 1.0);
    for (auto v : a.mask) CHECK(v <= 1);
    CHECK(dice(threshold_segment(a, 0.5f), a.mask) >= 0.9);
  }
}

TEST_CASE("batch assembly") {
  const Dataset ds = generate(41, 3, 4, 32, 32);
  const Batch b = make_batch(ds, {0, 5, 7}, nullptr, nullptr);
  CHECK(b.image.shape() == Shape{3, 3, 32, 32});
  CHECK(b.mask.size() == 3u * 32 * 32);
  CHECK(b.image.at(3 * 32 * 32 + 17) == doctest::Approx(ds.samples[5].image[17]));
  CHECK(std::equal(b.mask.begin() + 2 * 1024, b.mask.end(), ds.samples[7].mask.begin()));
  CHECK_THROWS(make_batch(ds, {}, nullptr, nullptr));
}
