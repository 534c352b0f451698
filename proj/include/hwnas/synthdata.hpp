#pragma once

// Synthetic annulus dataset.
//
// Each patient gets a base ring geometry (center, radii, eccentricity,
// orientation) drawn once from its own RNG stream; each frame jitters that
// geometry and draws a degradation level that scales blur, contrast loss,
// speckle and occluding shadows. Ground-truth masks always show the full
// ring, so heavier degradation means lower achievable Dice.
//
// On-disk layout under a dataset directory:
//
//   manifest.txt
//   p000/f000_image.ppm    binary PPM (P6), 8-bit RGB
//   p000/f000_mask.pgm     binary PGM (P5), 0 = background, 255 = ring
//   ...
//
// manifest.txt grammar:
//
//   # hwnas-dataset 1
//   seed <u64>
//   patients <int>
//   frames <int>
//   height <int>
//   width <int>
//   level_max <real>
//   level_skew <real>
//   split <patient> seg_train|seg_eval|test       (one per patient)
//   frame <patient> <frame> <level> <blur> <contrast> <noise> <k> [<x0> <y0> <w> <h>]*k
//
// Reals use shortest round-trip formatting.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

namespace hwnas {

struct Rect {
  int x0 = 0, y0 = 0, w = 0, h = 0;
  bool operator==(const Rect&) const = default;
};

struct Degradation {
  double level = 0;     // in [0,1]; drives the fields below
  double blur = 0;      // gaussian sigma in pixels
  double contrast = 1;  // ring-over-background contrast scale
  double noise = 0;     // speckle standard deviation
  std::vector<Rect> occlusions;
  bool operator==(const Degradation&) const = default;
};

struct SynthSample {
  int patient = 0;
  int frame = 0;
  int height = 0, width = 0;
  std::vector<float> image;         // [3,H,W] in [0,1]
  std::vector<std::uint8_t> mask;   // [H,W] in {0,1}
  Degradation degradation;
};

enum class Split { SegTrain, SegEval, Test };
std::string_view split_name(Split s);
Split parse_split(std::string_view s);

struct DatasetManifest {
  std::uint64_t seed = 0;
  int patients = 0;
  int frames = 0;
  int height = 0, width = 0;
  double level_max = 1.0;
  double level_skew = 2.0;
  std::vector<Split> split;                      // per patient
  std::vector<std::vector<Degradation>> frame_meta;  // [patient][frame]

  std::string serialize() const;
  static DatasetManifest parse(std::string_view text);
};

struct GeneratorOptions {
  // Largest degradation level; 0 renders clean images.
  double max_level = 1.0;
  // level = max_level * u^skew with u ~ U(0,1); larger skew favors mild frames.
  double skew = 2.0;
  int max_retries = 50;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<SynthSample> samples;  // patient-major

  const SynthSample& at(int patient, int frame) const;
  std::vector<int> patients_in(Split s) const;
  // Sample indices of the given patients, patient-major.
  std::vector<int> indices_of(const std::vector<int>& patients) const;
  // Throws if any patient belongs to two splits or D_train and D_test overlap.
  void check_splits() const;
};

// Patients go 8:2 to D_train/D_test, then D_train halves into
// seg_train/seg_eval. Deterministic in seed.
std::vector<Split> plan_splits(std::uint64_t seed, int patients);

Dataset generate(std::uint64_t seed, int patients, int frames, int height, int width,
                 const GeneratorOptions& opt = {});

// Renders one frame. Pure in (seed, patient, frame, opt).
SynthSample render_frame(std::uint64_t seed, int patient, int frame, int height, int width,
                         const GeneratorOptions& opt = {});

// Foreground fraction bounds enforced by the generator.
inline constexpr double kMinForeground = 0.01;
inline constexpr double kMaxForeground = 0.60;

void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);
std::filesystem::path image_path(const std::filesystem::path& dir, int patient, int frame);
std::filesystem::path mask_path(const std::filesystem::path& dir, int patient, int frame);

// Binary PPM/PGM with maxval 255.
void write_ppm(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& rgb);
void write_pgm(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& gray);
std::vector<std::uint8_t> read_pnm(const std::filesystem::path& path, char kind, int& width, int& height);

std::uint8_t quantize(float v);

struct QualitySpread {
  double mean = 0, stddev = 0, min = 0, max = 0;
  double mean_mild = 0;    // frames with level below the median level
  double mean_severe = 0;  // frames with level at or above it
  int count = 0;
};

// Runs `segmenter` over the given samples and summarizes per-frame Dice.
// Throws std::runtime_error when the Dice standard deviation is below
// `min_std`.
QualitySpread quality_spread_check(const std::vector<const SynthSample*>& samples,
                                   const std::function<std::vector<std::uint8_t>(const SynthSample&)>& segmenter,
                                   double min_std = 0.05);

// Segmenter that thresholds the channel mean.
std::vector<std::uint8_t> threshold_segment(const SynthSample& s, float threshold);

}  // namespace hwnas
