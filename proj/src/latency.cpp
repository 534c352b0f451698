#include "hwnas/latency.hpp"

#include "hwnas/textio.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <sys/utsname.h>

namespace hwnas {

namespace {

using Clock = std::chrono::steady_clock;

std::string host_description() {
  std::string cpu = "unknown cpu";
  std::ifstream in("/proc/cpuinfo");
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("model name", 0) == 0) {
      cpu = line.substr(line.find(':') + 2);
      break;
    }
  }
  utsname u{};
  if (uname(&u) == 0) return cpu + " / " + u.sysname + " " + u.release + " " + u.machine;
  return cpu;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Median per-call microseconds of fn when each sample runs it `reps` times.
double median_per_call_us(const std::function<void()>& fn, int reps, int samples, int warmup) {
  for (int i = 0; i < warmup; ++i)
    for (int r = 0; r < reps; ++r) fn();
  std::vector<double> t;
  for (int s = 0; s < samples; ++s) {
    const auto t0 = Clock::now();
    for (int r = 0; r < reps; ++r) fn();
    const auto t1 = Clock::now();
    t.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count() / reps);
  }
  return median(std::move(t));
}

Tensor random_input(Shape s, Rng& rng) {
  std::uniform_real_distribution<double> d(-1, 1);
  std::vector<Real> v(numel(s));
  for (auto& x : v) x = static_cast<Real>(d(rng));
  return Tensor(std::move(s), std::move(v));
}

// Builds a closure running the component named by `key` once, in inference mode.
std::function<void()> make_runner(const LutKey& key, Rng& rng) {
  const Shape in{key.n, key.cin, key.h, key.w};
  if (auto op = parse_op(key.op)) {
    if (*op == PrimitiveOp::Zero) return [] {};  // pruned edge: no computation
    auto inst = std::make_shared<OpInstance>(*op, key.cin, key.cout, rng);
    auto x = random_input(in, rng);
    return [inst, x] { (void)inst->apply(x, false); };
  }
  if (key.op == "seg_stem" || key.op == "qc_stem") {
    auto conv = std::make_shared<Conv2d>(key.cin, key.cout, 3, Conv2dOptions{.padding = 1}, rng);
    auto bn = std::make_shared<BatchNorm2d>(key.cout, true);
    if (key.op == "seg_stem") {
      auto x = random_input(in, rng);
      return [conv, bn, x] { (void)bn->forward(conv->forward(x), false); };
    }
    if (key.cin != 6) throw std::invalid_argument("profile: qc_stem expects 6 input channels");
    auto img = random_input({key.n, 3, key.h, key.w}, rng);
    auto probs = random_input({key.n, 2, key.h, key.w}, rng);
    auto unc = random_input({key.n, 1, key.h, key.w}, rng);
    return [conv, bn, img, probs, unc] { (void)bn->forward(conv->forward(concat({img, probs, unc}, 1)), false); };
  }
  if (key.op == "preprocess") {
    const int stride = key.extra == "s2" ? 2 : 1;
    auto pre = std::make_shared<Preprocess>(key.cin, key.cout, stride, rng);
    auto x = random_input(in, rng);
    return [pre, x] { (void)pre->forward(x, false); };
  }
  if (key.op == "residual_proj") {
    auto conv = std::make_shared<Conv2d>(key.cin, key.cout, 1, Conv2dOptions{.stride = 2}, rng);
    auto bn = std::make_shared<BatchNorm2d>(key.cout, true);
    auto x = random_input(in, rng);
    return [conv, bn, x] { (void)bn->forward(conv->forward(x), false); };
  }
  if (key.op == "seg_head") {
    auto conv = std::make_shared<Conv2d>(key.cin, key.cout, 1, Conv2dOptions{}, rng, true);
    auto x = random_input(in, rng);
    return [conv, x] {
      const Tensor logits = conv->forward(x);
      (void)softmax_entropy(logits, 1);
      (void)softmax(logits, 1);
      (void)argmax_mask(logits);
    };
  }
  if (key.op == "qc_head") {
    auto lin = std::make_shared<Linear>(key.cin, key.cout, rng);
    auto x = random_input(in, rng);
    return [lin, x] { (void)sigmoid(lin->forward(global_avg_pool(relu(x)))); };
  }
  throw std::invalid_argument("profile: cannot measure unknown op '" + key.op + "'");
}

}  // namespace

double LatencyLut::at(const LutKey& k) const {
  auto it = entries.find(k);
  if (it == entries.end()) throw MissingLutEntry("missing LUT entry: " + k.str());
  return it->second;
}

std::string LatencyLut::serialize() const {
  std::ostringstream os;
  os << "# hwnas-lut 1\n";
  os << "# host: " << meta.host << "\n";
  os << "# timer_resolution_us: " << format_real(meta.timer_resolution_us) << "\n";
  os << "# samples: " << meta.samples << "\n";
  os << "# warmup: " << meta.warmup << "\n";
  os << "# timestamp: " << meta.timestamp << "\n";
  for (const auto& w : meta.warnings) os << "# warning: " << w << "\n";
  for (const auto& [k, v] : entries) os << k.str() << " " << format_real(v) << "\n";
  return os.str();
}

LatencyLut LatencyLut::parse(std::string_view text) {
  LatencyLut lut;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  bool saw_magic = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line == "# hwnas-lut 1") {
        saw_magic = true;
        continue;
      }
      const auto colon = line.find(": ");
      if (colon == std::string::npos || line.size() < 3) throw std::runtime_error("LUT: bad header line " + std::to_string(lineno));
      const std::string field = line.substr(2, colon - 2), value = line.substr(colon + 2);
      if (field == "host") lut.meta.host = value;
      else if (field == "timer_resolution_us") lut.meta.timer_resolution_us = parse_real(value, field);
      else if (field == "samples") lut.meta.samples = parse_int(value, field);
      else if (field == "warmup") lut.meta.warmup = parse_int(value, field);
      else if (field == "timestamp") lut.meta.timestamp = value;
      else if (field == "warning") lut.meta.warnings.push_back(value);
      else throw std::runtime_error("LUT: unknown header field '" + field + "'");
      continue;
    }
    std::istringstream rec(line);
    std::vector<std::string> f;
    for (std::string tok; rec >> tok;) f.push_back(tok);
    if (f.size() != 8) throw std::runtime_error("LUT: line " + std::to_string(lineno) + " needs 8 fields");
    LutKey k{f[0], parse_int(f[1], "N"), parse_int(f[2], "Cin"), parse_int(f[3], "Cout"),
             parse_int(f[4], "H"), parse_int(f[5], "W"), f[6]};
    const double v = parse_real(f[7], "latency");
    if (!(v >= 0)) throw std::runtime_error("LUT: negative latency on line " + std::to_string(lineno));
    lut.entries[k] = v;
  }
  if (!saw_magic) throw std::runtime_error("LUT: missing '# hwnas-lut 1' header");
  return lut;
}

void LatencyLut::save(const std::filesystem::path& path) const { write_text(path, serialize()); }

LatencyLut LatencyLut::load(const std::filesystem::path& path) { return parse(read_text(path)); }

double timer_resolution_us() {
  double best = 1e9;
  for (int i = 0; i < 200; ++i) {
    const auto t0 = Clock::now();
    auto t1 = Clock::now();
    while (t1 == t0) t1 = Clock::now();
    best = std::min(best, std::chrono::duration<double, std::micro>(t1 - t0).count());
  }
  return best;
}

double time_call_us(const std::function<void()>& fn, const ProfileOptions& opt) {
  if (opt.warmup < 3 || opt.samples < 20) throw std::invalid_argument("profiling needs warmup >= 3 and samples >= 20");
  fn();
  const auto t0 = Clock::now();
  fn();
  const double single = std::chrono::duration<double, std::micro>(Clock::now() - t0).count();
  const int reps = std::clamp(static_cast<int>(std::ceil(opt.min_sample_us / std::max(single, 1e-3))), 1, 100000);
  const double t = median_per_call_us(fn, reps, opt.samples, opt.warmup);
  const std::function<void()> empty = [] {};
  const double overhead = median_per_call_us(empty, reps, opt.samples, opt.warmup);
  return std::max(0.0, t - overhead);
}

double profile_key(const LutKey& key, const ProfileOptions& opt, Rng& rng) {
  NoGradGuard ng;
  return time_call_us(make_runner(key, rng), opt);
}

std::vector<LutKey> required_keys(const SegNetConfig& seg_cfg, const QcNetConfig& qc_cfg, int extent) {
  Rng rng(0);
  const SegNet seg = SegNet::supernet(seg_cfg, rng);
  const QcNet qc = QcNet::supernet(qc_cfg, rng);
  std::set<LutKey> keys;
  const Shape si{1, seg_cfg.in_channels, extent, extent}, qi{1, qc_cfg.in_channels, extent, extent};
  for (const auto& s : seg.edge_sites(si)) keys.insert(s.candidates.begin(), s.candidates.end());
  for (const auto& s : qc.edge_sites(qi)) keys.insert(s.candidates.begin(), s.candidates.end());
  for (const auto& k : seg.fixed_keys(si)) keys.insert(k);
  for (const auto& k : qc.fixed_keys(qi)) keys.insert(k);
  return {keys.begin(), keys.end()};
}

LatencyLut profile(const std::vector<LutKey>& keys, const ProfileOptions& opt, Rng& rng,
                   const std::function<void(const std::string&)>& log) {
  LatencyLut lut;
  lut.meta.host = host_description();
  lut.meta.timer_resolution_us = timer_resolution_us();
  lut.meta.samples = opt.samples;
  lut.meta.warmup = opt.warmup;
  lut.meta.timestamp = utc_timestamp();
  double smallest = 0;
  for (const auto& k : keys) {
    double us = profile_key(k, opt, rng);
    if (us < lut.meta.timer_resolution_us) us = 0;
    lut.entries[k] = us;
    if (us > 0 && (smallest == 0 || us < smallest)) smallest = us;
    if (log) log(k.str() + " " + format_real(us));
  }
  if (smallest > 0 && lut.meta.timer_resolution_us > 0.1 * smallest) {
    lut.meta.warnings.push_back("timer resolution " + format_real(lut.meta.timer_resolution_us) +
                                " us exceeds 10% of the smallest latency " + format_real(smallest) + " us");
  }
  return lut;
}

Tensor edge_latency(const Tensor& alpha_edge, std::span<const Real> lut_us, Real tau, Rng& rng) {
  if (!(tau > 0)) throw std::invalid_argument("edge_latency: temperature must be positive");
  if (alpha_edge.ndim() != 1 || alpha_edge.numel() != lut_us.size() || lut_us.empty()) {
    throw std::invalid_argument("edge_latency: alpha " + shape_str(alpha_edge.shape()) + " does not match " +
                                std::to_string(lut_us.size()) + " LUT entries");
  }
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Real> g(lut_us.size());
  for (auto& v : g) {
    double x = u(rng);
    while (x <= 0.0) x = u(rng);
    v = static_cast<Real>(-std::log(-std::log(x)));
  }
  const Tensor y = softmax(mul_scalar(add_const(alpha_edge, g), Real(1) / tau), 0);
  // Centering on the smallest entry keeps equal entries exact despite
  // rounding in sum(y).
  const Real ref = *std::min_element(lut_us.begin(), lut_us.end());
  std::vector<Real> centered(lut_us.begin(), lut_us.end());
  for (auto& v : centered) v -= ref;
  return add_const(dot_const(y, centered), std::span<const Real>(&ref, 1));
}

LatencyModel::LatencyModel(const SegNet& seg, const QcNet& qc, int extent, const LatencyLut& lut) {
  const Shape si{1, seg.config().in_channels, extent, extent}, qi{1, qc.config().in_channels, extent, extent};
  auto add_sites = [&](const std::vector<EdgeSite>& sites) {
    for (const auto& s : sites) {
      Site row{s.kind, s.edge, {}};
      for (const auto& k : s.candidates) row.lut_us.push_back(static_cast<Real>(lut.at(k)));
      sites_.push_back(std::move(row));
    }
  };
  add_sites(seg.edge_sites(si));
  add_sites(qc.edge_sites(qi));
  for (const auto& k : seg.fixed_keys(si)) fixed_us_ += lut.at(k);
  for (const auto& k : qc.fixed_keys(qi)) fixed_us_ += lut.at(k);
}

Tensor LatencyModel::estimate_ms(const ArchParams& alpha, Real tau, Rng& rng) const {
  std::vector<Tensor> terms;
  for (const auto& s : sites_) {
    if (s.lut_us.empty()) continue;
    auto it = alpha.logits.find(s.kind);
    if (it == alpha.logits.end()) throw std::invalid_argument("estimate_ms: no logits for " + std::string(cell_kind_name(s.kind)));
    terms.push_back(edge_latency(it->second.at(s.edge), s.lut_us, tau, rng));
  }
  const Real fixed = static_cast<Real>(fixed_us_);
  const Tensor total = terms.empty() ? Tensor::scalar(0) : add_n(terms);
  return mul_scalar(add_const(total, std::span<const Real>(&fixed, 1)), Real(1e-3));
}

double LatencyModel::expected_ms(const ArchParams& alpha) const {
  double us = fixed_us_;
  NoGradGuard ng;
  for (const auto& s : sites_) {
    if (s.lut_us.empty()) continue;
    const Tensor p = softmax(alpha.logits.at(s.kind).at(s.edge), 0);
    for (std::size_t k = 0; k < s.lut_us.size(); ++k) us += double(p.at(k)) * s.lut_us[k];
  }
  return us * 1e-3;
}

double LatencyModel::discrete_ms() const {
  double us = fixed_us_;
  for (const auto& s : sites_) {
    if (s.lut_us.size() > 1) throw std::logic_error("discrete_ms: site with several candidates");
    if (!s.lut_us.empty()) us += s.lut_us[0];
  }
  return us * 1e-3;
}

double measure_wallclock_ms(const std::function<void()>& fn, int samples, int warmup) {
  if (warmup < 3 || samples < 20) throw std::invalid_argument("measurement needs warmup >= 3 and samples >= 20");
  NoGradGuard ng;
  return median_per_call_us(fn, 1, samples, warmup) * 1e-3;
}

}  // namespace hwnas
