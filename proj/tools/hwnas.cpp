// hwnas: command-line driver for the search pipeline.
//
// Every command works inside one run directory:
//
//   <run>/data/               gen-data
//   <run>/lut.txt             profile
//   <run>/search/             search (config.txt, selection.txt, seed<k>/...)
//   <run>/genotype.txt        derive
//   <run>/derived/            train-derived (weights.ckpt, metrics.txt)
//   <run>/baseline/           train-derived --baseline
//   <run>/bench.txt           bench
//   <run>/report.txt          report
//   <run>/plots/              plots

#include <cmath>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "hwnas/checkpoint.hpp"
#include "hwnas/plots.hpp"
#include "hwnas/search.hpp"
#include "hwnas/textio.hpp"

namespace fs = std::filesystem;
using namespace hwnas;

namespace {

struct CommandError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string run_dir;
  std::string runs_root = "runs";
  std::uint64_t seed = 1;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--run-dir", c.run_dir, "Run directory (default: newest under --runs-root)");
  app->add_option("--runs-root", c.runs_root, "Parent of run directories")->capture_default_str();
  app->add_option("--seed", c.seed, "Random seed")->capture_default_str();
}

fs::path newest_run(const Common& c) {
  if (!c.run_dir.empty()) return c.run_dir;
  if (!fs::is_directory(c.runs_root)) throw CommandError("no run directory under " + c.runs_root + "; run `gen-data` first");
  fs::path best;
  for (const auto& e : fs::directory_iterator(c.runs_root))
    if (e.is_directory() && (best.empty() || e.path().filename() > best.filename())) best = e.path();
  if (best.empty()) throw CommandError("no run directory under " + c.runs_root + "; run `gen-data` first");
  return best;
}

fs::path new_run(const Common& c) {
  if (!c.run_dir.empty()) return c.run_dir;
  std::string ts = utc_timestamp();
  std::erase(ts, '-');
  std::erase(ts, ':');
  return fs::path(c.runs_root) / (ts + "-seed" + std::to_string(c.seed));
}

void require(const fs::path& p, const std::string& producer) {
  if (!fs::exists(p)) throw CommandError("missing " + p.string() + "; run `" + producer + "` first");
}

std::map<std::string, std::string> read_kv(const fs::path& p) {
  std::map<std::string, std::string> kv;
  std::istringstream in(read_text(p));
  for (std::string line; std::getline(in, line);) {
    const auto eq = line.find(" = ");
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return kv;
}

double kv_real(const std::map<std::string, std::string>& kv, const std::string& k, const fs::path& p) {
  auto it = kv.find(k);
  if (it == kv.end()) throw CommandError(p.string() + " has no '" + k + "'");
  return parse_real(it->second, k);
}

void check_threads(int threads, const char* cmd) {
  if (threads != 1) throw CommandError(std::string(cmd) + " measures single-thread latency; --threads must be 1");
}

SearchConfig load_config(const fs::path& run, const std::string& explicit_path) {
  if (!explicit_path.empty()) return SearchConfig::parse(read_text(explicit_path));
  if (fs::exists(run / "search" / "config.txt")) return SearchConfig::parse(read_text(run / "search" / "config.txt"));
  return SearchConfig{};
}

int dataset_extent(const fs::path& run, int fallback) {
  if (!fs::exists(run / "data" / "manifest.txt")) return fallback;
  return DatasetManifest::parse(read_text(run / "data" / "manifest.txt")).height;
}

std::uint64_t selected_seed(const fs::path& run) {
  const fs::path sel = run / "search" / "selection.txt";
  require(sel, "search");
  const auto kv = read_kv(sel);
  auto it = kv.find("best_seed");
  if (it == kv.end()) throw CommandError(sel.string() + " has no best_seed");
  return parse_u64(it->second, "best_seed");
}

fs::path seed_dir(const fs::path& run, std::uint64_t s) { return run / "search" / ("seed" + std::to_string(s)); }

StateDict pipeline_state(SegNet& seg, QcNet& qc) {
  StateDict a = seg.state(), b = qc.state();
  a.params.insert(a.params.end(), b.params.begin(), b.params.end());
  a.buffers.insert(a.buffers.end(), b.buffers.begin(), b.buffers.end());
  return a;
}

std::string metrics_text(const RetrainMetrics& m) {
  std::ostringstream os;
  os << "val_dice = " << format_real(m.val_dice) << "\n"
     << "val_mae = " << format_real(m.val_mae) << "\n"
     << "const_pred = " << format_real(m.const_pred) << "\n"
     << "const_mae = " << format_real(m.const_mae) << "\n";
  for (std::size_t i = 0; i < m.seg_loss.size(); ++i) os << "seg_loss." << i + 1 << " = " << format_real(m.seg_loss[i]) << "\n";
  for (std::size_t i = 0; i < m.qc_loss.size(); ++i) os << "qc_loss." << i + 1 << " = " << format_real(m.qc_loss[i]) << "\n";
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hardware-aware differentiable search of a segmentation + quality-control network pair", "hwnas"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every command");

  // gen-data
  Common gd;
  int patients = 40, frames = 30, size = 32;
  double max_level = 1.0, skew = 2.0;
  auto* c_gen = app.add_subcommand("gen-data", "Generate the synthetic dataset into <run>/data");
  add_common(c_gen, gd);
  c_gen->add_option("--patients", patients, "Number of patients")->capture_default_str();
  c_gen->add_option("--frames", frames, "Frames per patient")->capture_default_str();
  c_gen->add_option("--size", size, "Image height and width")->capture_default_str();
  c_gen->add_option("--max-level", max_level, "Largest degradation level (0 = clean)")->capture_default_str();
  c_gen->add_option("--skew", skew, "Degradation level exponent")->capture_default_str();

  // profile
  Common pr;
  int pr_samples = 20, pr_warmup = 3, pr_threads = 1, pr_size = 0;
  double pr_min_us = 50;
  std::string pr_config;
  auto* c_prof = app.add_subcommand("profile", "Measure the latency LUT on this host into <run>/lut.txt");
  add_common(c_prof, pr);
  c_prof->add_option("--samples", pr_samples, "Timed samples per key (>= 20)")->capture_default_str();
  c_prof->add_option("--warmup", pr_warmup, "Warm-up calls per key (>= 3)")->capture_default_str();
  c_prof->add_option("--min-sample-us", pr_min_us, "Minimum duration of one timed sample")->capture_default_str();
  c_prof->add_option("--threads", pr_threads, "Worker threads (must be 1)")->capture_default_str();
  c_prof->add_option("--size", pr_size, "Input extent (0 = dataset size, else 32)")->capture_default_str();
  c_prof->add_option("--config", pr_config, "Search config file for the structural sizes (default: <run>/search/config.txt, else built-in values)");

  // search
  Common se;
  std::string se_config, se_seeds;
  int se_epochs = 80, se_warmup = 40;
  double se_lambda1 = 1.0, se_lambda2 = 0.001;
  auto* c_search = app.add_subcommand("search", "Run the joint architecture search into <run>/search");
  add_common(c_search, se);
  c_search->add_option("--config", se_config, "Search config file of key value lines (default: built-in values)");
  c_search->add_option("--seeds", se_seeds, "Comma-separated seeds (default: config seeds, or --seed when given)");
  c_search->add_option("--epochs", se_epochs, "Total epochs")->capture_default_str();
  c_search->add_option("--warmup-epochs", se_warmup, "Weight-only epochs")->capture_default_str();
  c_search->add_option("--lambda1", se_lambda1, "Weight of the QC loss")->capture_default_str();
  c_search->add_option("--lambda2", se_lambda2, "Weight of the latency term, per ms")->capture_default_str();

  // derive
  Common de;
  bool de_top2 = false;
  std::uint64_t de_from = 0;
  auto* c_derive = app.add_subcommand("derive", "Derive the genotype of the selected search run into <run>/genotype.txt");
  add_common(c_derive, de);
  c_derive->add_flag("--top2", de_top2, "Keep only the two strongest inputs per node")->capture_default_str();
  c_derive->add_option("--from-seed", de_from, "Search seed to derive from (0 = selected best)")->capture_default_str();

  // train-derived
  Common tr;
  RetrainConfig rc;
  bool tr_baseline = true;
  auto* c_train = app.add_subcommand("train-derived", "Retrain the derived pipeline from scratch into <run>/derived");
  add_common(c_train, tr);
  c_train->add_option("--seg-epochs", rc.seg_epochs, "Segmentation epochs")->capture_default_str();
  c_train->add_option("--qc-epochs", rc.qc_epochs, "QC epochs")->capture_default_str();
  c_train->add_option("--batch-size", rc.batch_size, "Batch size")->capture_default_str();
  c_train->add_option("--lr", rc.lr, "Initial SGD learning rate")->capture_default_str();
  c_train->add_option("--baseline", tr_baseline, "Also train the hand-designed baseline into <run>/baseline")
      ->capture_default_str();

  // bench
  Common be;
  int be_samples = 50, be_threads = 1;
  auto* c_bench = app.add_subcommand("bench", "Measure wall-clock latency of the derived pipeline into <run>/bench.txt");
  add_common(c_bench, be);
  c_bench->add_option("--samples", be_samples, "Timed runs")->capture_default_str();
  c_bench->add_option("--threads", be_threads, "Worker threads (must be 1)")->capture_default_str();

  // report
  Common rp;
  auto* c_report = app.add_subcommand("report", "Write <run>/report.txt");
  add_common(c_report, rp);

  // plots
  Common pl;
  std::uint64_t pl_from = 0;
  auto* c_plots = app.add_subcommand("plots", "Write loss curves and cell renderings into <run>/plots");
  add_common(c_plots, pl);
  c_plots->add_option("--from-seed", pl_from, "Search seed to plot (0 = selected best)")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  const std::string cmd = app.get_subcommands().front()->get_name();
  auto log = [](const std::string& s) { std::cout << s << std::endl; };
  try {
    if (cmd == "gen-data") {
      const fs::path run = new_run(gd);
      const SegNetConfig seg_cfg;
      if (size % (1 << seg_cfg.depth) != 0)
        throw CommandError("--size must be divisible by " + std::to_string(1 << seg_cfg.depth));
      const Dataset ds = generate(gd.seed, patients, frames, size, size, {.max_level = max_level, .skew = skew});
      fs::remove_all(run / "data");
      save_dataset(ds, run / "data");
      std::cout << "run " << run.string() << "\n";
      std::cout << "wrote " << ds.samples.size() << " frames to " << (run / "data").string() << "\n";
    } else if (cmd == "profile") {
      check_threads(pr_threads, "profile");
      const fs::path run = newest_run(pr);
      const SearchConfig cfg = load_config(run, pr_config);
      const int extent = pr_size > 0 ? pr_size : dataset_extent(run, 32);
      std::vector<LutKey> keys = required_keys(cfg.seg_config(), cfg.qc_config(), extent);
      const Genotype base = baseline_genotype(cfg.seg_config(), cfg.qc_config());
      for (const auto& k : required_keys(base.seg, base.qc, extent)) keys.push_back(k);
      std::sort(keys.begin(), keys.end());
      keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
      Rng rng(pr.seed);
      const LatencyLut lut =
          profile(keys, {.samples = pr_samples, .warmup = pr_warmup, .min_sample_us = pr_min_us}, rng, log);
      fs::create_directories(run);
      lut.save(run / "lut.txt");
      for (const auto& w : lut.meta.warnings) std::cout << "warning: " << w << "\n";
      std::cout << "wrote " << lut.entries.size() << " entries to " << (run / "lut.txt").string() << "\n";
    } else if (cmd == "search") {
      const fs::path run = newest_run(se);
      require(run / "data" / "manifest.txt", "gen-data");
      require(run / "lut.txt", "profile");
      SearchConfig cfg = se_config.empty() ? SearchConfig{} : SearchConfig::parse(read_text(se_config));
      if (c_search->count("--epochs")) cfg.epochs = se_epochs;
      if (c_search->count("--warmup-epochs")) cfg.warmup_epochs = se_warmup;
      if (c_search->count("--lambda1")) cfg.lambda1 = se_lambda1;
      if (c_search->count("--lambda2")) cfg.lambda2 = se_lambda2;
      if (!se_seeds.empty()) cfg = SearchConfig::parse(cfg.serialize() + "seeds " + se_seeds + "\n");
      else if (c_search->count("--seed")) cfg.seeds = {se.seed};
      cfg.validate();
      const Dataset ds = load_dataset(run / "data");
      const SplitPlan plan = make_split_plan(ds);
      const LatencyLut lut = LatencyLut::load(run / "lut.txt");
      fs::create_directories(run / "search");
      write_text(run / "search" / "config.txt", cfg.serialize());
      std::vector<History> hs;
      for (std::uint64_t s : cfg.seeds) {
        SearchResult r = search(cfg, s, ds, plan, lut, log);
        const fs::path d = seed_dir(run, s);
        fs::create_directories(d);
        write_text(d / "history.txt", r.history.serialize());
        r.genotype.save(d / "genotype.txt");
        save_state(d / "alpha.ckpt", r.alpha.state());
        save_state(d / "supernet.ckpt", pipeline_state(r.seg, r.qc));
        hs.push_back(r.history);
      }
      const std::size_t best = select_best(hs);
      std::ostringstream sel;
      sel << "best_seed = " << cfg.seeds[best] << "\n";
      for (std::size_t i = 0; i < hs.size(); ++i)
        sel << "seed" << cfg.seeds[i] << ".objective = " << format_real(hs[i].objective) << "\n";
      write_text(run / "search" / "selection.txt", sel.str());
      std::cout << "best seed " << cfg.seeds[best] << " (objective " << hs[best].objective << ")\n";
    } else if (cmd == "derive") {
      const fs::path run = newest_run(de);
      const std::uint64_t s = de_from ? de_from : selected_seed(run);
      require(seed_dir(run, s) / "alpha.ckpt", "search");
      const SearchConfig cfg = load_config(run, "");
      ArchParams alpha =
          ArchParams::zeros(std::vector<CellKind>(std::begin(kSearchedKinds), std::end(kSearchedKinds)), cfg.m);
      StateDict sd = alpha.state();
      load_state(seed_dir(run, s) / "alpha.ckpt", sd);
      const Genotype g = de_top2 ? derive_top2(alpha, cfg.seg_config(), cfg.qc_config())
                                 : derive(alpha, cfg.seg_config(), cfg.qc_config());
      g.save(run / "genotype.txt");
      std::cout << "wrote " << (run / "genotype.txt").string() << " from seed " << s << "\n";
    } else if (cmd == "train-derived") {
      const fs::path run = newest_run(tr);
      require(run / "data" / "manifest.txt", "gen-data");
      require(run / "genotype.txt", "derive");
      const Dataset ds = load_dataset(run / "data");
      const SplitPlan plan = make_split_plan(ds);
      rc.seed = tr.seed;
      std::vector<std::pair<std::string, Genotype>> todo{{"derived", Genotype::load(run / "genotype.txt")}};
      if (tr_baseline) todo.emplace_back("baseline", baseline_genotype(todo[0].second.seg, todo[0].second.qc));
      for (auto& [name, g] : todo) {
        Rng init(tr.seed);
        DerivedPipeline p = build(g, init);
        const RetrainMetrics m = retrain(p, ds, plan, rc);
        fs::create_directories(run / name);
        g.save(run / name / "genotype.txt");
        save_state(run / name / "weights.ckpt", pipeline_state(p.seg, p.qc));
        write_text(run / name / "metrics.txt", metrics_text(m));
        std::cout << name << ": val Dice " << m.val_dice << ", MAE " << m.val_mae << " (constant predictor "
                  << m.const_mae << ")\n";
      }
    } else if (cmd == "bench") {
      check_threads(be_threads, "bench");
      const fs::path run = newest_run(be);
      require(run / "derived" / "weights.ckpt", "train-derived");
      require(run / "lut.txt", "profile");
      const LatencyLut lut = LatencyLut::load(run / "lut.txt");
      const int extent = dataset_extent(run, 32);
      std::ostringstream os;
      for (const std::string name : {"derived", "baseline"}) {
        if (!fs::exists(run / name / "weights.ckpt")) continue;
        Rng init(be.seed);
        DerivedPipeline p = build(Genotype::load(run / name / "genotype.txt"), init);
        StateDict sd = pipeline_state(p.seg, p.qc);
        load_state(run / name / "weights.ckpt", sd);
        const ReportRow r = make_report_row(name, p, {}, lut, extent, be_samples);
        os << name << ".measured_ms = " << format_real(r.measured_ms) << "\n"
           << name << ".estimated_ms = " << format_real(r.estimated_ms) << "\n"
           << name << ".estimate_rel_error = " << format_real(r.rel_error) << "\n"
           << name << ".flops = " << r.flops << "\n";
        std::cout << name << ": " << r.measured_ms << " ms measured, " << r.estimated_ms << " ms LUT estimate\n";
      }
      write_text(run / "bench.txt", os.str());
    } else if (cmd == "report") {
      const fs::path run = newest_run(rp);
      require(run / "derived" / "metrics.txt", "train-derived");
      require(run / "bench.txt", "bench");
      const auto bench = read_kv(run / "bench.txt");
      std::vector<ReportRow> rows;
      for (const std::string name : {"derived", "baseline"}) {
        if (!fs::exists(run / name / "metrics.txt") || !bench.count(name + ".measured_ms")) continue;
        const fs::path mp = run / name / "metrics.txt";
        const auto m = read_kv(mp);
        ReportRow r;
        r.name = name;
        r.dice = kv_real(m, "val_dice", mp);
        r.mae = kv_real(m, "val_mae", mp);
        r.const_mae = kv_real(m, "const_mae", mp);
        r.measured_ms = kv_real(bench, name + ".measured_ms", run / "bench.txt");
        r.estimated_ms = kv_real(bench, name + ".estimated_ms", run / "bench.txt");
        r.rel_error = kv_real(bench, name + ".estimate_rel_error", run / "bench.txt");
        r.flops = static_cast<std::int64_t>(kv_real(bench, name + ".flops", run / "bench.txt"));
        rows.push_back(r);
      }
      std::map<std::string, std::string> extra;
      if (fs::exists(run / "search" / "selection.txt")) extra["search.best_seed"] = std::to_string(selected_seed(run));
      extra["validation.objective"] = "dice - mae";
      const std::string text = format_report(rows, extra, true);
      write_text(run / "report.txt", text);
      std::cout << text;
    } else if (cmd == "plots") {
      const fs::path run = newest_run(pl);
      const std::uint64_t s = pl_from ? pl_from : selected_seed(run);
      require(seed_dir(run, s) / "history.txt", "search");
      const History h = History::parse(read_text(seed_dir(run, s) / "history.txt"));
      const Genotype g = fs::exists(run / "genotype.txt") ? Genotype::load(run / "genotype.txt")
                                                          : Genotype::load(seed_dir(run, s) / "genotype.txt");
      emit_plots(h, g, run / "plots");
      std::cout << "wrote plots to " << (run / "plots").string() << "\n";
    }
  } catch (const MissingLutEntry& e) {
    std::cerr << "error: " << cmd << ": " << e.what() << "; rerun `profile` with the same --config" << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "error: " << cmd << ": " << msg << std::endl;
    return 1;
  }
  return 0;
}
