// Acceptance run: prints one PASS/FAIL line per criterion and writes the
// full measurements to <work-dir>/acceptance_report.txt.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "acceptance/criteria.hpp"
#include "hwnas/checkpoint.hpp"
#include "hwnas/search.hpp"
#include "hwnas/textio.hpp"

using namespace hwnas;
namespace fs = std::filesystem;
using acceptance::Outcome;

namespace {

struct Protocol {
  int patients = 40;
  int frames = 30;
  int extent = 32;
  int epochs = 20;
  int warmup = 10;
  int seg_epochs = 30;
  int qc_epochs = 30;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  int bench_samples = 50;
  int bench_rounds = 3;
  std::uint64_t data_seed = 2026;

  static Protocol quick() {
    Protocol p;
    p.patients = 10;
    p.frames = 4;
    p.epochs = 2;
    p.warmup = 1;
    p.seg_epochs = 1;
    p.qc_epochs = 1;
    p.bench_samples = 20;
    p.bench_rounds = 1;
    return p;
  }
};

const auto t0 = std::chrono::steady_clock::now();

void log(const std::string& line) {
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  char buf[32];
  std::snprintf(buf, sizeof buf, "[%7.0fs] ", s);
  std::cerr << buf << line << std::endl;
}

std::string num(double v, int precision = 4) {
  std::ostringstream o;
  o.precision(precision);
  o << v;
  return o.str();
}

std::string hex(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

SearchConfig search_config(const Protocol& p, double lambda2) {
  SearchConfig c;
  c.lambda2 = lambda2;
  c.epochs = p.epochs;
  c.warmup_epochs = p.warmup;
  c.seeds = p.seeds;
  return c;
}

RetrainConfig retrain_config(const Protocol& p, std::uint64_t seed) {
  RetrainConfig c;
  c.seg_epochs = p.seg_epochs;
  c.qc_epochs = p.qc_epochs;
  c.seed = seed;
  return c;
}

struct Trained {
  std::string name;
  std::uint64_t seed = 0;
  double lambda2 = 0;
  History history;
  DerivedPipeline pipeline;
  RetrainMetrics metrics;
  double estimated_ms = 0;
  std::vector<double> measured;  // per-round medians
  double measured_ms() const { return median(measured); }
};

Trained retrain_one(const std::string& name, std::uint64_t seed, double lambda2, const History& h, const Genotype& g,
                    const Dataset& ds, const SplitPlan& plan, const LatencyLut& lut, const Protocol& p) {
  Rng init(seed);
  Trained t{name, seed, lambda2, h, build(g, init), {}, 0, {}};
  t.metrics = retrain(t.pipeline, ds, plan, retrain_config(p, seed));
  t.estimated_ms = LatencyModel(t.pipeline.seg, t.pipeline.qc, p.extent, lut).discrete_ms();
  log(name + ": val dice " + num(t.metrics.val_dice) + " mae " + num(t.metrics.val_mae) + " const mae " +
      num(t.metrics.const_mae) + " lut est " + num(t.estimated_ms) + " ms");
  return t;
}

bool same_file(const fs::path& a, const fs::path& b) { return read_text(a) == read_text(b); }

// Everything a small search + derive + retrain + report produces, with
// losses in hex so that equality means bit equality.
std::string mini_pipeline(const Dataset& ds, const SplitPlan& plan, const LatencyLut& lut, int extent) {
  SearchConfig cfg;
  cfg.epochs = 3;
  cfg.warmup_epochs = 1;
  cfg.seeds = {1, 2};
  const SeedRuns runs = run_seeds(cfg, ds, plan, lut);
  std::string out;
  for (const SearchResult& r : runs.runs) out += r.history.serialize() + r.genotype.serialize();
  const SearchResult& best = runs.runs[runs.best];
  Rng init(best.history.seed);
  DerivedPipeline p = build(best.genotype, init);
  RetrainConfig rc;
  rc.seg_epochs = 2;
  rc.qc_epochs = 2;
  rc.seed = best.history.seed;
  const RetrainMetrics m = retrain(p, ds, plan, rc);
  for (double v : m.seg_loss) out += hex(v) + " ";
  for (double v : m.qc_loss) out += hex(v) + " ";
  for (const StateDict& sd : {p.seg.state(), p.qc.state()}) {
    const auto bytes = encode_checkpoint(to_checkpoint(sd));
    out.append(bytes.begin(), bytes.end());
  }
  ReportRow row;
  row.name = "derived";
  row.dice = m.val_dice;
  row.mae = m.val_mae;
  row.const_mae = m.const_mae;
  row.estimated_ms = LatencyModel(p.seg, p.qc, extent, lut).discrete_ms();
  row.flops = p.seg.flops({1, 3, extent, extent}) + p.qc.flops({1, 6, extent, extent});
  out += format_report({row}, {{"search.best_seed", std::to_string(best.history.seed)}}, false);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance run for the hardware-aware search engine", "acceptance"};
  fs::path work = fs::temp_directory_path() / "hwnas_acceptance";
  bool quick = false;
  app.add_option("--work-dir", work, "Directory for datasets, LUT, runs and the report");
  app.add_flag("--quick", quick, "Reduced protocol for smoke runs; thresholds unchanged");
  CLI11_PARSE(app, argc, argv);
  const Protocol P = quick ? Protocol::quick() : Protocol{};
  fs::remove_all(work);
  fs::create_directories(work);

  std::vector<std::pair<std::string, Outcome>> results;
  std::ostringstream report;
  auto record = [&](int n, const std::string& name, const std::function<Outcome()>& f) {
    log("criterion " + std::to_string(n) + " " + name);
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const std::string line = std::string(o.pass ? "PASS" : "FAIL") + " " + std::to_string(n) + " " + name + ": " + o.detail;
    std::cout << line << std::endl;
    report << line << "\n";
    results.emplace_back(name, o);
  };

  record(1, "autodiff", acceptance::autodiff);
  record(2, "cell-algebra", acceptance::cell_algebra);
  record(3, "latency-estimator", acceptance::latency_estimator);
  record(4, "loss-assembly", acceptance::loss_assembly);

  // shared setup for the end-to-end criteria
  log("generating " + std::to_string(P.patients) + "x" + std::to_string(P.frames) + " dataset");
  const Dataset ds = generate(P.data_seed, P.patients, P.frames, P.extent, P.extent);
  const SplitPlan plan = make_split_plan(ds);
  const SearchConfig base_cfg = search_config(P, 0.001);
  std::vector<LutKey> keys = required_keys(base_cfg.seg_config(), base_cfg.qc_config(), P.extent);
  const Genotype baseline = baseline_genotype(base_cfg.seg_config(), base_cfg.qc_config());
  for (const LutKey& k : required_keys(baseline.seg, baseline.qc, P.extent)) keys.push_back(k);
  std::sort(keys.begin(), keys.end());
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
  log("profiling " + std::to_string(keys.size()) + " LUT keys");
  Rng prof_rng(1);
  const LatencyLut lut = profile(keys, {}, prof_rng);
  lut.save(work / "lut.txt");

  std::vector<Trained> hw, nohw;
  std::size_t selected = 0;
  std::optional<Trained> base;
  const Tensor image({1, 3, P.extent, P.extent}, Real(0.5));
  bool e2e_ok = true;
  std::string e2e_error;
  try {
    for (double lambda2 : {0.001, 0.0}) {
      const std::string tag = lambda2 > 0 ? "hw" : "nohw";
      const SeedRuns runs = run_seeds(search_config(P, lambda2), ds, plan, lut,
                                      [&](const std::string& l) { log(tag + " " + l); });
      auto& out = lambda2 > 0 ? hw : nohw;
      for (const SearchResult& r : runs.runs) {
        const fs::path dir = work / ("search_" + tag) / ("seed" + std::to_string(r.history.seed));
        fs::create_directories(dir);
        write_text(dir / "history.txt", r.history.serialize());
        r.genotype.save(dir / "genotype.txt");
        out.push_back(retrain_one(tag + "-seed" + std::to_string(r.history.seed), r.history.seed, lambda2, r.history,
                                  r.genotype, ds, plan, lut, P));
      }
      if (lambda2 > 0) selected = runs.best;
    }
    base.emplace(retrain_one("baseline", 1, 0, {}, baseline, ds, plan, lut, P));

    // interleaved rounds so that host drift hits both arms alike
    for (int round = 0; round < P.bench_rounds; ++round)
      for (std::size_t i = 0; i < hw.size(); ++i) {
        Trained* order[2] = {&hw[i], &nohw[i]};
        if (round % 2) std::swap(order[0], order[1]);
        for (Trained* t : order)
          t->measured.push_back(
              measure_wallclock_ms([&] { run_pipeline(t->pipeline, image); }, P.bench_samples, 5));
      }
    base->measured.push_back(measure_wallclock_ms([&] { run_pipeline(base->pipeline, image); }, P.bench_samples, 5));
  } catch (const std::exception& e) {
    e2e_ok = false;
    e2e_error = std::string("exception: ") + e.what();
    log(e2e_error);
  }
  auto guarded = [&](const std::function<Outcome()>& f) {
    return [&, f] { return e2e_ok ? f() : Outcome{false, e2e_error}; };
  };

  record(5, "end-to-end-search", guarded([&] {
           const Trained& s = hw[selected];
           const double bound = 0.5 * s.metrics.const_mae;
           return Outcome{s.metrics.val_dice >= 0.85 && s.metrics.val_mae <= bound,
                          "selected " + s.name + ": val dice " + num(s.metrics.val_dice) + " (>= 0.85), mae " +
                              num(s.metrics.val_mae) + " (<= " + num(bound) + " = 0.5 x const mae " +
                              num(s.metrics.const_mae) + "), " + std::to_string(P.epochs) + " epochs"};
         }));

  record(6, "hardware-awareness", guarded([&] {
           int faster = 0;
           double drop = 0;
           std::string pairs;
           for (std::size_t i = 0; i < hw.size(); ++i) {
             faster += hw[i].measured_ms() < nohw[i].measured_ms();
             drop += nohw[i].metrics.val_dice - hw[i].metrics.val_dice;
             pairs += " " + num(hw[i].measured_ms(), 3) + "/" + num(nohw[i].measured_ms(), 3);
           }
           drop /= static_cast<double>(hw.size());
           return Outcome{faster >= 3 && drop <= 0.05, "hw faster in " + std::to_string(faster) + "/" +
                                                            std::to_string(hw.size()) + " pairs (ms hw/nohw:" + pairs +
                                                            "), mean dice drop " + num(drop)};
         }));

  record(7, "estimate-vs-measurement", guarded([&] {
           auto rel = [](const Trained& t) { return std::abs(t.estimated_ms - t.measured_ms()) / t.measured_ms(); };
           const Trained& s = hw[selected];
           std::string all;
           for (const auto* arm : {&hw, &nohw})
             for (const Trained& t : *arm) all += " " + num(rel(t), 3);
           return Outcome{rel(s) <= 0.5, "selected est " + num(s.estimated_ms) + " ms vs measured " +
                                             num(s.measured_ms()) + " ms, rel err " + num(rel(s)) +
                                             " (<= 0.5); all runs:" + all};
         }));

  record(8, "determinism", [&] {
    const Dataset small = generate(5, 10, 4, P.extent, P.extent);
    const SplitPlan sp = make_split_plan(small);
    const std::string a = mini_pipeline(small, sp, lut, P.extent);
    const std::string b = mini_pipeline(small, sp, lut, P.extent);
    return Outcome{a == b, "two runs of search, derive, retrain and report: " + std::to_string(a.size()) + " bytes, " +
                               (a == b ? "identical" : "differ")};
  });

  record(9, "format-round-trips", [&] {
    const fs::path dir = work / "roundtrip";
    fs::create_directories(dir);
    std::vector<std::string> bad;

    lut.save(dir / "lut_a.txt");
    LatencyLut::load(dir / "lut_a.txt").save(dir / "lut_b.txt");
    if (!same_file(dir / "lut_a.txt", dir / "lut_b.txt")) bad.push_back("lut");

    Rng rng(3);
    const Genotype g = e2e_ok ? hw[selected].pipeline.genotype : baseline;
    g.save(dir / "genotype_a.txt");
    Genotype::load(dir / "genotype_a.txt").save(dir / "genotype_b.txt");
    if (!same_file(dir / "genotype_a.txt", dir / "genotype_b.txt")) bad.push_back("genotype");

    DerivedPipeline untrained = build(g, rng);
    DerivedPipeline& src = e2e_ok ? hw[selected].pipeline : untrained;
    save_state(dir / "seg_a.ckpt", src.seg.state());
    write_checkpoint(dir / "seg_b.ckpt", read_checkpoint(dir / "seg_a.ckpt"));
    DerivedPipeline fresh = build(g, rng);
    StateDict sd = fresh.seg.state();
    load_state(dir / "seg_a.ckpt", sd);
    save_state(dir / "seg_c.ckpt", fresh.seg.state());
    if (!same_file(dir / "seg_a.ckpt", dir / "seg_b.ckpt") || !same_file(dir / "seg_a.ckpt", dir / "seg_c.ckpt"))
      bad.push_back("checkpoint");

    save_dataset(ds, dir / "data_a");
    const Dataset back = load_dataset(dir / "data_a");
    save_dataset(back, dir / "data_b");
    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(dir / "data_a")) {
      const fs::path rel = fs::relative(e.path(), dir / "data_a");
      if (e.is_directory()) {
        for (const auto& f : fs::directory_iterator(e.path())) {
          ++files;
          if (!same_file(f.path(), dir / "data_b" / rel / f.path().filename())) bad.push_back(f.path().string());
        }
      } else {
        ++files;
        if (!same_file(e.path(), dir / "data_b" / rel)) bad.push_back("manifest");
      }
    }
    std::string detail = "lut, genotype, checkpoint and " + std::to_string(files) + " dataset files compared";
    if (!bad.empty()) detail += "; mismatched: " + bad.front() + (bad.size() > 1 ? " and more" : "");
    return Outcome{bad.empty(), detail};
  });

  if (e2e_ok) {
    std::vector<ReportRow> rows;
    auto row_of = [&](const Trained& t) {
      ReportRow r;
      r.name = t.name;
      r.dice = t.metrics.val_dice;
      r.mae = t.metrics.val_mae;
      r.const_mae = t.metrics.const_mae;
      r.measured_ms = t.measured_ms();
      r.estimated_ms = t.estimated_ms;
      r.rel_error = std::abs(r.estimated_ms - r.measured_ms) / r.measured_ms;
      r.flops = t.pipeline.seg.flops({1, 3, P.extent, P.extent}) + t.pipeline.qc.flops({1, 6, P.extent, P.extent});
      return r;
    };
    for (const auto* arm : {&hw, &nohw})
      for (const Trained& t : *arm) rows.push_back(row_of(t));
    rows.push_back(row_of(*base));
    std::map<std::string, std::string> extra{{"selected", hw[selected].name},
                                             {"epochs", std::to_string(P.epochs)},
                                             {"warmup_epochs", std::to_string(P.warmup)},
                                             {"retrain_epochs", std::to_string(P.seg_epochs) + "/" +
                                                                    std::to_string(P.qc_epochs)}};
    for (const auto* arm : {&hw, &nohw})
      for (const Trained& t : *arm) extra[t.name + ".objective"] = format_real(t.history.objective);
    report << "\n" << format_report(rows, extra, true);
  }
  write_text(work / "acceptance_report.txt", report.str());

  const auto passed = std::count_if(results.begin(), results.end(), [](const auto& r) { return r.second.pass; });
  std::cout << "acceptance: " << passed << "/" << results.size() << " criteria passed"
            << (quick ? " (quick protocol)" : "") << std::endl;
  return passed == static_cast<long>(results.size()) ? 0 : 1;
}
