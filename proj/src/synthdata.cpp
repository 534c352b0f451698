#include "hwnas/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "hwnas/seg_net.hpp"
#include "hwnas/textio.hpp"

namespace hwnas {

namespace {

using Rng = std::mt19937_64;

Rng stream(std::uint64_t seed, int patient, int frame, int purpose) {
  std::seed_seq ss{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                   static_cast<std::uint32_t>(patient), static_cast<std::uint32_t>(frame),
                   static_cast<std::uint32_t>(purpose)};
  return Rng(ss);
}

enum Purpose { kGeometry = 1, kFrame = 2, kSpeckle = 3, kSplit = 4 };

struct Ring {
  double cx, cy, r_in, r_out, ecc, angle;
};

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

std::vector<std::uint8_t> ring_mask(const Ring& g, int h, int w) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(h) * w);
  const double c = std::cos(g.angle), s = std::sin(g.angle);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double dx = x + 0.5 - g.cx, dy = y + 0.5 - g.cy;
      const double u = (c * dx + s * dy) / g.ecc, v = (-s * dx + c * dy) * g.ecc;
      const double d = std::sqrt(u * u + v * v);
      m[static_cast<std::size_t>(y) * w + x] = d > g.r_in && d <= g.r_out;
    }
  return m;
}

bool cavity(const Ring& g, double x, double y) {
  const double c = std::cos(g.angle), s = std::sin(g.angle);
  const double dx = x - g.cx, dy = y - g.cy;
  const double u = (c * dx + s * dy) / g.ecc, v = (-s * dx + c * dy) * g.ecc;
  return std::sqrt(u * u + v * v) <= g.r_in;
}

void gaussian_blur(std::vector<double>& img, int h, int w, double sigma) {
  if (sigma < 1e-6) return;
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * r + 1);
  for (int i = -r; i <= r; ++i) k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  const double norm = std::accumulate(k.begin(), k.end(), 0.0);
  for (auto& v : k) v /= norm;
  std::vector<double> tmp(img.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * img[y * w + std::clamp(x + i, 0, w - 1)];
      tmp[y * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp[std::clamp(y + i, 0, h - 1) * w + x];
      img[y * w + x] = acc;
    }
}

constexpr double kBackground = 0.12;
constexpr double kCavity = 0.24;
constexpr double kRingGain = 0.63;
constexpr double kShadow = 0.2;

}  // namespace

std::string_view split_name(Split s) {
  switch (s) {
    case Split::SegTrain: return "seg_train";
    case Split::SegEval: return "seg_eval";
    case Split::Test: return "test";
  }
  return "?";
}

Split parse_split(std::string_view s) {
  if (s == "seg_train") return Split::SegTrain;
  if (s == "seg_eval") return Split::SegEval;
  if (s == "test") return Split::Test;
  throw std::runtime_error("unknown split '" + std::string(s) + "'");
}

std::uint8_t quantize(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

std::vector<Split> plan_splits(std::uint64_t seed, int patients) {
  if (patients < 3) throw std::invalid_argument("need at least 3 patients to form seg_train, seg_eval and test");
  std::vector<int> order(patients);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = stream(seed, 0, 0, kSplit);
  std::shuffle(order.begin(), order.end(), rng);
  const int n_test = std::max(1, static_cast<int>(std::lround(patients * 0.2)));
  const int n_train = patients - n_test;
  const int n_seg_train = (n_train + 1) / 2;
  std::vector<Split> out(patients);
  for (int i = 0; i < patients; ++i)
    out[order[i]] = i < n_seg_train ? Split::SegTrain : i < n_train ? Split::SegEval : Split::Test;
  return out;
}

SynthSample render_frame(std::uint64_t seed, int patient, int frame, int height, int width,
                         const GeneratorOptions& opt) {
  if (height < 8 || width < 8) throw std::invalid_argument("synthetic frames need H, W >= 8");
  const double ext = std::min(height, width);
  Rng geo = stream(seed, patient, 0, kGeometry);
  const Ring base{width / 2.0 + uniform(geo, -0.06, 0.06) * width, height / 2.0 + uniform(geo, -0.06, 0.06) * height,
                  0, uniform(geo, 0.26, 0.36) * ext, uniform(geo, 0.8, 1.25), uniform(geo, 0, std::numbers::pi)};
  const double inner_ratio = uniform(geo, 0.55, 0.72);

  Rng fr = stream(seed, patient, frame, kFrame);
  SynthSample s;
  s.patient = patient;
  s.frame = frame;
  s.height = height;
  s.width = width;
  Ring g{};
  const double fg_lo = kMinForeground * height * width, fg_hi = kMaxForeground * height * width;
  for (int attempt = 0;; ++attempt) {
    if (attempt == opt.max_retries)
      throw std::runtime_error("synthdata: foreground fraction out of range after " + std::to_string(opt.max_retries) +
                               " retries (patient " + std::to_string(patient) + ", frame " + std::to_string(frame) + ")");
    const double beat = uniform(fr, 0.93, 1.07);
    g = base;
    g.cx += uniform(fr, -1, 1);
    g.cy += uniform(fr, -1, 1);
    g.r_out *= beat;
    g.r_in = g.r_out * inner_ratio * uniform(fr, 0.96, 1.04);
    g.angle += uniform(fr, -0.1, 0.1);
    s.mask = ring_mask(g, height, width);
    const double fg = std::accumulate(s.mask.begin(), s.mask.end(), 0.0);
    if (g.r_in < g.r_out && fg >= fg_lo && fg <= fg_hi) break;
  }

  Degradation& d = s.degradation;
  d.level = opt.max_level * std::pow(uniform(fr, 0, 1), opt.skew);
  d.blur = 1.6 * d.level;
  d.contrast = 1.0 - 0.7 * d.level;
  d.noise = 0.6 * d.level;
  const int n_occ = std::min(2, static_cast<int>(d.level * 3));
  for (int i = 0; i < n_occ; ++i) {
    const double a = uniform(fr, 0, 2 * std::numbers::pi);
    const int rw = static_cast<int>(std::lround(uniform(fr, 0.18, 0.32) * width));
    const int rh = static_cast<int>(std::lround(uniform(fr, 0.18, 0.32) * height));
    const double px = g.cx + std::cos(a) * 0.5 * (g.r_in + g.r_out), py = g.cy + std::sin(a) * 0.5 * (g.r_in + g.r_out);
    Rect r{static_cast<int>(std::lround(px - rw / 2.0)), static_cast<int>(std::lround(py - rh / 2.0)), rw, rh};
    r.x0 = std::clamp(r.x0, 0, width - 1);
    r.y0 = std::clamp(r.y0, 0, height - 1);
    r.w = std::min(r.w, width - r.x0);
    r.h = std::min(r.h, height - r.y0);
    d.occlusions.push_back(r);
  }

  // Clean render with a depth attenuation ramp.
  std::vector<double> img(static_cast<std::size_t>(height) * width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * width + x;
      const double depth = 1.0 - 0.3 * (y + 0.5) / height;
      double v = kBackground;
      if (s.mask[i]) v = kBackground + d.contrast * kRingGain * depth;
      else if (cavity(g, x + 0.5, y + 0.5)) v = kCavity;
      img[i] = v;
    }
  for (const Rect& r : d.occlusions)
    for (int y = r.y0; y < r.y0 + r.h; ++y)
      for (int x = r.x0; x < r.x0 + r.w; ++x) img[static_cast<std::size_t>(y) * width + x] *= kShadow;
  gaussian_blur(img, height, width, d.blur);
  if (d.noise > 0) {
    Rng sp = stream(seed, patient, frame, kSpeckle);
    std::gamma_distribution<double> gamma(1.0 / (d.noise * d.noise), d.noise * d.noise);
    for (auto& v : img) v *= gamma(sp);
  }

  const std::size_t hw = img.size();
  s.image.resize(3 * hw);
  for (std::size_t i = 0; i < hw; ++i) {
    const double v = img[i];
    const double rgb[3] = {v, 0.9 * v, 0.75 * v + 0.05};
    for (int c = 0; c < 3; ++c) s.image[c * hw + i] = quantize(static_cast<float>(rgb[c])) / 255.0f;
  }
  return s;
}

Dataset generate(std::uint64_t seed, int patients, int frames, int height, int width, const GeneratorOptions& opt) {
  if (frames < 1) throw std::invalid_argument("frames must be positive");
  Dataset ds;
  auto& m = ds.manifest;
  m.seed = seed;
  m.patients = patients;
  m.frames = frames;
  m.height = height;
  m.width = width;
  m.level_max = opt.max_level;
  m.level_skew = opt.skew;
  m.split = plan_splits(seed, patients);
  m.frame_meta.resize(patients);
  for (int p = 0; p < patients; ++p)
    for (int f = 0; f < frames; ++f) {
      ds.samples.push_back(render_frame(seed, p, f, height, width, opt));
      m.frame_meta[p].push_back(ds.samples.back().degradation);
    }
  return ds;
}

const SynthSample& Dataset::at(int patient, int frame) const {
  return samples.at(static_cast<std::size_t>(patient) * manifest.frames + frame);
}

std::vector<int> Dataset::patients_in(Split s) const {
  std::vector<int> out;
  for (int p = 0; p < manifest.patients; ++p)
    if (manifest.split[p] == s) out.push_back(p);
  return out;
}

std::vector<int> Dataset::indices_of(const std::vector<int>& patients) const {
  std::vector<int> out;
  for (int p : patients)
    for (int f = 0; f < manifest.frames; ++f) out.push_back(p * manifest.frames + f);
  return out;
}

void Dataset::check_splits() const {
  if (static_cast<int>(manifest.split.size()) != manifest.patients)
    throw std::runtime_error("split table covers " + std::to_string(manifest.split.size()) + " of " +
                             std::to_string(manifest.patients) + " patients");
  std::vector<int> seen(manifest.patients, 0);
  for (const auto& s : samples) {
    if (s.patient < 0 || s.patient >= manifest.patients) throw std::runtime_error("sample with unknown patient id");
    ++seen[s.patient];
  }
  for (int p = 0; p < manifest.patients; ++p)
    if (seen[p] != manifest.frames) throw std::runtime_error("patient " + std::to_string(p) + " has a partial frame set");
  if (patients_in(Split::SegTrain).empty() || patients_in(Split::SegEval).empty() || patients_in(Split::Test).empty())
    throw std::runtime_error("every split needs at least one patient");
}

std::string DatasetManifest::serialize() const {
  std::ostringstream os;
  os << "# hwnas-dataset 1\n";
  os << "seed " << seed << "\npatients " << patients << "\nframes " << frames << "\nheight " << height << "\nwidth "
     << width << "\nlevel_max " << format_real(level_max) << "\nlevel_skew " << format_real(level_skew) << "\n";
  for (int p = 0; p < patients; ++p) os << "split " << p << " " << split_name(split.at(p)) << "\n";
  for (int p = 0; p < patients; ++p)
    for (int f = 0; f < frames; ++f) {
      const Degradation& d = frame_meta.at(p).at(f);
      os << "frame " << p << " " << f << " " << format_real(d.level) << " " << format_real(d.blur) << " "
         << format_real(d.contrast) << " " << format_real(d.noise) << " " << d.occlusions.size();
      for (const Rect& r : d.occlusions) os << " " << r.x0 << " " << r.y0 << " " << r.w << " " << r.h;
      os << "\n";
    }
  return os.str();
}

DatasetManifest DatasetManifest::parse(std::string_view text) {
  DatasetManifest m;
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != "# hwnas-dataset 1") throw std::runtime_error("manifest: missing '# hwnas-dataset 1' header");
  int lineno = 1;
  bool sized = false;
  auto size_tables = [&] {
    if (sized) return;
    if (m.patients <= 0 || m.frames <= 0) throw std::runtime_error("manifest: patients/frames must precede split and frame lines");
    m.split.assign(m.patients, Split::Test);
    m.frame_meta.assign(m.patients, std::vector<Degradation>(m.frames));
    sized = true;
  };
  std::vector<std::vector<bool>> have;
  std::vector<bool> have_split;
  while (std::getline(in, line)) {
    ++lineno;
    const auto f = split_words(line);
    if (f.empty()) continue;
    const std::string where = "manifest line " + std::to_string(lineno);
    auto need = [&](std::size_t n) {
      if (f.size() < n) throw std::runtime_error(where + ": too few fields");
    };
    need(2);
    if (f[0] == "seed") m.seed = parse_u64(f[1], "seed");
    else if (f[0] == "patients") m.patients = parse_int(f[1], "patients");
    else if (f[0] == "frames") m.frames = parse_int(f[1], "frames");
    else if (f[0] == "height") m.height = parse_int(f[1], "height");
    else if (f[0] == "width") m.width = parse_int(f[1], "width");
    else if (f[0] == "level_max") m.level_max = parse_real(f[1], "level_max");
    else if (f[0] == "level_skew") m.level_skew = parse_real(f[1], "level_skew");
    else if (f[0] == "split") {
      need(3);
      size_tables();
      have_split.resize(m.patients);
      const int p = parse_int(f[1], "patient");
      if (p < 0 || p >= m.patients) throw std::runtime_error(where + ": patient out of range");
      if (have_split[p]) throw std::runtime_error(where + ": patient " + f[1] + " assigned to two splits");
      have_split[p] = true;
      m.split[p] = parse_split(f[2]);
    } else if (f[0] == "frame") {
      need(8);
      size_tables();
      have.resize(m.patients, std::vector<bool>(m.frames));
      const int p = parse_int(f[1], "patient"), fr = parse_int(f[2], "frame");
      if (p < 0 || p >= m.patients || fr < 0 || fr >= m.frames) throw std::runtime_error(where + ": frame out of range");
      Degradation d;
      d.level = parse_real(f[3], "level");
      d.blur = parse_real(f[4], "blur");
      d.contrast = parse_real(f[5], "contrast");
      d.noise = parse_real(f[6], "noise");
      const int k = parse_int(f[7], "occlusions");
      if (k < 0 || f.size() != 8 + 4 * static_cast<std::size_t>(k)) throw std::runtime_error(where + ": occlusion count mismatch");
      for (int i = 0; i < k; ++i)
        d.occlusions.push_back({parse_int(f[8 + 4 * i], "x0"), parse_int(f[9 + 4 * i], "y0"),
                                parse_int(f[10 + 4 * i], "w"), parse_int(f[11 + 4 * i], "h")});
      m.frame_meta[p][fr] = d;
      have[p][fr] = true;
    } else {
      throw std::runtime_error(where + ": unknown key '" + f[0] + "'");
    }
  }
  size_tables();
  for (int p = 0; p < m.patients; ++p) {
    if (have_split.size() != static_cast<std::size_t>(m.patients) || !have_split[p])
      throw std::runtime_error("manifest: no split for patient " + std::to_string(p));
    for (int fr = 0; fr < m.frames; ++fr)
      if (have.size() != static_cast<std::size_t>(m.patients) || !have[p][fr])
        throw std::runtime_error("manifest: no frame record for patient " + std::to_string(p) + " frame " + std::to_string(fr));
  }
  return m;
}

std::filesystem::path image_path(const std::filesystem::path& dir, int patient, int frame) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "p%03d/f%03d_image.ppm", patient, frame);
  return dir / buf;
}

std::filesystem::path mask_path(const std::filesystem::path& dir, int patient, int frame) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "p%03d/f%03d_mask.pgm", patient, frame);
  return dir / buf;
}

namespace {

void write_pnm(const std::filesystem::path& path, const char* magic, int width, int height,
               const std::vector<std::uint8_t>& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << magic << "\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace

void write_ppm(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& rgb) {
  write_pnm(path, "P6", width, height, rgb);
}

void write_pgm(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& gray) {
  write_pnm(path, "P5", width, height, gray);
}

std::vector<std::uint8_t> read_pnm(const std::filesystem::path& path, char kind, int& width, int& height) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string magic;
  int maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (magic != std::string("P") + kind || maxval != 255 || width <= 0 || height <= 0)
    throw std::runtime_error(path.string() + ": expected binary P" + kind + " with maxval 255");
  in.get();
  const std::size_t channels = kind == '6' ? 3 : 1;
  std::vector<std::uint8_t> data(channels * width * height);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (in.gcount() != static_cast<std::streamsize>(data.size())) throw std::runtime_error(path.string() + ": truncated");
  return data;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const int h = ds.manifest.height, w = ds.manifest.width;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (const auto& s : ds.samples) {
    std::filesystem::create_directories(image_path(dir, s.patient, s.frame).parent_path());
    std::vector<std::uint8_t> rgb(3 * hw), gray(hw);
    for (std::size_t i = 0; i < hw; ++i) {
      for (int c = 0; c < 3; ++c) rgb[3 * i + c] = quantize(s.image[c * hw + i]);
      gray[i] = s.mask[i] ? 255 : 0;
    }
    write_ppm(image_path(dir, s.patient, s.frame), w, h, rgb);
    write_pgm(mask_path(dir, s.patient, s.frame), w, h, gray);
  }
  write_text(dir / "manifest.txt", ds.manifest.serialize());
}

Dataset load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "manifest.txt"))
    throw std::runtime_error("missing dataset " + (dir / "manifest.txt").string() + "; run `gen-data` first");
  Dataset ds;
  ds.manifest = DatasetManifest::parse(read_text(dir / "manifest.txt"));
  const auto& m = ds.manifest;
  const std::size_t hw = static_cast<std::size_t>(m.height) * m.width;
  for (int p = 0; p < m.patients; ++p)
    for (int f = 0; f < m.frames; ++f) {
      SynthSample s;
      s.patient = p;
      s.frame = f;
      s.height = m.height;
      s.width = m.width;
      s.degradation = m.frame_meta[p][f];
      int w = 0, h = 0;
      const auto rgb = read_pnm(image_path(dir, p, f), '6', w, h);
      if (w != m.width || h != m.height) throw std::runtime_error(image_path(dir, p, f).string() + ": size mismatch");
      const auto gray = read_pnm(mask_path(dir, p, f), '5', w, h);
      if (w != m.width || h != m.height) throw std::runtime_error(mask_path(dir, p, f).string() + ": size mismatch");
      s.image.resize(3 * hw);
      s.mask.resize(hw);
      for (std::size_t i = 0; i < hw; ++i) {
        for (int c = 0; c < 3; ++c) s.image[c * hw + i] = rgb[3 * i + c] / 255.0f;
        if (gray[i] != 0 && gray[i] != 255) throw std::runtime_error(mask_path(dir, p, f).string() + ": mask is not binary");
        s.mask[i] = gray[i] == 255;
      }
      ds.samples.push_back(std::move(s));
    }
  ds.check_splits();
  return ds;
}

std::vector<std::uint8_t> threshold_segment(const SynthSample& s, float threshold) {
  const std::size_t hw = s.mask.size();
  std::vector<std::uint8_t> out(hw);
  for (std::size_t i = 0; i < hw; ++i)
    out[i] = (s.image[i] + s.image[hw + i] + s.image[2 * hw + i]) / 3.0f > threshold;
  return out;
}

QualitySpread quality_spread_check(const std::vector<const SynthSample*>& samples,
                                   const std::function<std::vector<std::uint8_t>(const SynthSample&)>& segmenter,
                                   double min_std) {
  if (samples.empty()) throw std::invalid_argument("quality_spread_check: no samples");
  std::vector<double> d, level;
  for (const SynthSample* s : samples) {
    d.push_back(dice(segmenter(*s), s->mask));
    level.push_back(s->degradation.level);
  }
  QualitySpread q;
  q.count = static_cast<int>(d.size());
  q.mean = std::accumulate(d.begin(), d.end(), 0.0) / q.count;
  double ss = 0;
  for (double v : d) ss += (v - q.mean) * (v - q.mean);
  q.stddev = std::sqrt(ss / q.count);
  q.min = *std::min_element(d.begin(), d.end());
  q.max = *std::max_element(d.begin(), d.end());
  std::vector<double> sorted = level;
  std::sort(sorted.begin(), sorted.end());
  const double med = sorted[sorted.size() / 2];
  double mild = 0, severe = 0;
  int n_mild = 0, n_severe = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (level[i] < med) mild += d[i], ++n_mild;
    else severe += d[i], ++n_severe;
  }
  q.mean_mild = n_mild ? mild / n_mild : q.mean;
  q.mean_severe = n_severe ? severe / n_severe : q.mean;
  if (q.stddev < min_std)
    throw std::runtime_error("quality spread too small: std(Dice) = " + format_real(q.stddev) + " < " +
                             format_real(min_std) + "; raise the degradation range (--max-level)");
  return q;
}

}  // namespace hwnas
