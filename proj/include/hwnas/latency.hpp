#pragma once

// Latency lookup table, differentiable expected latency, and wall-clock
// measurement.
//
// LUT file grammar (text, one record per line):
//
//   # hwnas-lut 1
//   # host: <free text>
//   # timer_resolution_us: <real>
//   # samples: <int>
//   # warmup: <int>
//   # timestamp: <free text>
//   # warning: <free text>            (zero or more)
//   <op_id> <N> <Cin> <Cout> <H> <W> <extra> <latency_us>
//
// Header lines start with '#'; records are sorted by key. Reals are written
// in shortest round-trip form, so save(load(f)) reproduces f byte for byte.
//
// Keys name either a primitive op id (see primitives.hpp) or one of the
// fixed components: seg_stem, seg_head, preprocess (extra s1/s2),
// residual_proj (extra s2), qc_stem, qc_head.

#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "hwnas/cell.hpp"
#include "hwnas/qc_net.hpp"
#include "hwnas/seg_net.hpp"

namespace hwnas {

struct LutMetadata {
  std::string host;
  double timer_resolution_us = 0;
  int samples = 0;
  int warmup = 0;
  std::string timestamp;
  std::vector<std::string> warnings;
};

struct MissingLutEntry : std::out_of_range {
  using std::out_of_range::out_of_range;
};

class LatencyLut {
 public:
  std::map<LutKey, double> entries;
  LutMetadata meta;

  bool contains(const LutKey& k) const { return entries.count(k) != 0; }
  // Throws MissingLutEntry naming the key when absent.
  double at(const LutKey& k) const;

  std::string serialize() const;
  static LatencyLut parse(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static LatencyLut load(const std::filesystem::path& path);
};

struct ProfileOptions {
  int samples = 20;
  int warmup = 3;
  // Each timing sample repeats the call until it spans at least this long.
  double min_sample_us = 50;
};

// Smallest observable nonzero step of the monotonic clock.
double timer_resolution_us();

// Median per-call time of fn in microseconds, minus the median per-call
// time of an empty call, clamped at 0.
double time_call_us(const std::function<void()>& fn, const ProfileOptions& opt);

// Profiles one key on this host (batch and shape from the key).
double profile_key(const LutKey& key, const ProfileOptions& opt, Rng& rng);

// Every key reachable from the two supernets at the given input extent.
std::vector<LutKey> required_keys(const SegNetConfig& seg, const QcNetConfig& qc, int extent);

// Profiles `keys`, filling metadata. Entries below the timer floor are 0.
// `log` (optional) receives one line per profiled key.
LatencyLut profile(const std::vector<LutKey>& keys, const ProfileOptions& opt, Rng& rng,
                   const std::function<void(const std::string&)>& log = {});

// Gumbel-softmax latency of one edge: sum_k softmax((alpha + g) / tau)_k * lut_k
// with g_k = -log(-log u_k), u_k ~ U(0,1).
Tensor edge_latency(const Tensor& alpha_edge, std::span<const Real> lut_us, Real tau, Rng& rng);

// Per-site LUT rows for a concrete pair of networks plus the constant cost
// of their fixed components.
class LatencyModel {
 public:
  LatencyModel(const SegNet& seg, const QcNet& qc, int extent, const LatencyLut& lut);

  // Differentiable estimate in milliseconds; one Gumbel sample per site.
  Tensor estimate_ms(const ArchParams& alpha, Real tau, Rng& rng) const;
  // Noise-free expectation sum softmax(alpha) . lut, in milliseconds.
  double expected_ms(const ArchParams& alpha) const;
  // Plain LUT sum in milliseconds; every site must hold at most one candidate.
  double discrete_ms() const;
  double fixed_us() const { return fixed_us_; }

  struct Site {
    CellKind kind;
    int edge;
    std::vector<Real> lut_us;
  };
  const std::vector<Site>& sites() const { return sites_; }

 private:
  std::vector<Site> sites_;
  double fixed_us_ = 0;
};

// Median single-call latency of fn in milliseconds (no overhead subtraction).
double measure_wallclock_ms(const std::function<void()>& fn, int samples, int warmup);

}  // namespace hwnas
