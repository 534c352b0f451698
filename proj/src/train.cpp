#include "hwnas/train.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "hwnas/optim.hpp"
#include "hwnas/textio.hpp"

namespace hwnas {

namespace {

Rng stream(std::uint64_t seed, std::uint32_t purpose) {
  std::seed_seq ss{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), purpose};
  return Rng(ss);
}

std::vector<std::vector<int>> batches_of(std::vector<int> idx, int batch, Rng* shuffle) {
  if (shuffle) std::shuffle(idx.begin(), idx.end(), *shuffle);
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < idx.size(); i += batch)
    out.emplace_back(idx.begin() + i, idx.begin() + std::min(idx.size(), i + batch));
  return out;
}

double mean_of(const std::vector<double>& v) { return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

}  // namespace

Tensor qc_features(const Tensor& image, const Tensor& logits) {
  return concat({image, softmax(logits, 1), softmax_entropy(logits, 1)}, 1);
}

Tensor dice_labels(const Tensor& logits, std::span<const std::uint8_t> truth, int n) {
  const auto pred = argmax_mask(logits);
  const auto d = batch_dice(pred, truth, n);
  return Tensor({n}, std::vector<Real>(d.begin(), d.end()));
}

void SplitPlan::check() const {
  auto disjoint = [](const std::vector<int>& a, const std::vector<int>& b, const char* what) {
    std::set<int> s(a.begin(), a.end());
    for (int x : b)
      if (s.count(x)) throw std::runtime_error(std::string("split overlap: patient ") + std::to_string(x) + " in " + what);
  };
  std::vector<int> train = seg_train;
  train.insert(train.end(), seg_eval.begin(), seg_eval.end());
  disjoint(seg_train, seg_eval, "seg_train and seg_eval");
  disjoint(train, test, "D_train and D_test");
  disjoint(retrain_seg, retrain_qc, "retrain segmentation and QC halves");
  disjoint(retrain_seg, validation, "retrain segmentation half and validation");
  disjoint(retrain_qc, validation, "retrain QC half and validation");
}

SplitPlan make_split_plan(const Dataset& ds) {
  ds.check_splits();
  SplitPlan p;
  p.seg_train = ds.patients_in(Split::SegTrain);
  p.seg_eval = ds.patients_in(Split::SegEval);
  p.test = ds.patients_in(Split::Test);
  const int total = ds.manifest.patients;
  const int n_val = std::max(1, static_cast<int>(std::lround(total * 0.4)));
  Rng rng = stream(ds.manifest.seed, 0x5e7);
  std::vector<int> eval = p.seg_eval;
  std::shuffle(eval.begin(), eval.end(), rng);
  p.validation = p.test;
  std::vector<int> pool = p.seg_train;
  for (int x : eval) {
    if (static_cast<int>(p.validation.size()) < n_val) p.validation.push_back(x);
    else pool.push_back(x);
  }
  std::sort(p.validation.begin(), p.validation.end());
  std::shuffle(pool.begin(), pool.end(), rng);
  const std::size_t half = (pool.size() + 1) / 2;
  p.retrain_seg.assign(pool.begin(), pool.begin() + half);
  p.retrain_qc.assign(pool.begin() + half, pool.end());
  std::sort(p.retrain_seg.begin(), p.retrain_seg.end());
  std::sort(p.retrain_qc.begin(), p.retrain_qc.end());
  if (p.retrain_seg.empty() || p.retrain_qc.empty()) throw std::runtime_error("too few patients for the retrain split");
  p.check();
  return p;
}

EvalResult evaluate(SegNet& seg, QcNet* qc, const ArchWeights* w, const Dataset& ds, const std::vector<int>& samples,
                    int batch) {
  NoGradGuard ng;
  EvalResult r;
  for (const auto& b : batches_of(samples, batch, nullptr)) {
    const Batch bt = make_batch(ds, b, nullptr, nullptr);
    const Tensor logits = seg.logits(bt.image, w, false);
    const Tensor labels = dice_labels(logits, bt.mask, bt.size);
    for (Real v : labels.values()) r.dice.push_back(v);
    if (qc) {
      const Tensor pred = qc->forward(qc_features(bt.image, logits), w, false);
      for (Real v : pred.values()) r.predicted.push_back(v);
    }
  }
  r.mean_dice = mean_of(r.dice);
  if (qc) {
    double acc = 0;
    for (std::size_t i = 0; i < r.dice.size(); ++i) acc += std::abs(r.dice[i] - r.predicted[i]);
    r.mae = acc / r.dice.size();
  }
  return r;
}

void check_finite(double v, const std::string& term, const std::string& phase, int epoch, int step) {
  if (!std::isfinite(v))
    throw NonFiniteLoss("non-finite loss: phase=" + phase + " epoch=" + std::to_string(epoch) + " step=" +
                        std::to_string(step) + " term=" + term + " value=" + format_real(v));
}

void set_requires_grad(const std::vector<Tensor>& ts, bool on) {
  for (Tensor t : ts) t.set_requires_grad(on);
}

RetrainMetrics retrain(DerivedPipeline& p, const Dataset& ds, const SplitPlan& plan, const RetrainConfig& cfg) {
  RetrainMetrics m;
  Rng aug_rng = stream(cfg.seed, 12), shuffle_rng = stream(cfg.seed, 13);
  const std::vector<int> seg_idx = ds.indices_of(plan.retrain_seg), qc_idx = ds.indices_of(plan.retrain_qc);
  const std::vector<int> val_idx = ds.indices_of(plan.validation);

  const std::vector<Tensor> seg_params = p.seg.state().param_tensors();
  const std::vector<Tensor> qc_params = p.qc.state().param_tensors();
  set_requires_grad(seg_params, true);
  Sgd seg_opt(seg_params, static_cast<Real>(cfg.lr), static_cast<Real>(cfg.momentum), static_cast<Real>(cfg.weight_decay));
  for (int e = 0; e < cfg.seg_epochs; ++e) {
    seg_opt.set_lr(static_cast<Real>(cosine_lr(cfg.lr, cfg.lr_min, e, cfg.seg_epochs)));
    std::vector<double> losses;
    int step = 0;
    for (const auto& b : batches_of(seg_idx, cfg.batch_size, &shuffle_rng)) {
      const Batch bt = make_batch(ds, b, &cfg.augment, &aug_rng);
      const Tensor ce = cross_entropy_2d(p.seg.logits(bt.image, nullptr, true), bt.mask);
      check_finite(ce.item(), "ce", "retrain-seg", e + 1, step++);
      ce.backward();
      clip_grad_norm(seg_params, cfg.grad_clip);
      seg_opt.step();
      seg_opt.zero_grad();
      losses.push_back(ce.item());
    }
    m.seg_loss.push_back(mean_of(losses));
  }

  set_requires_grad(seg_params, false);
  Sgd qc_opt(qc_params, static_cast<Real>(cfg.lr), static_cast<Real>(cfg.momentum), static_cast<Real>(cfg.weight_decay));
  for (int e = 0; e < cfg.qc_epochs; ++e) {
    qc_opt.set_lr(static_cast<Real>(cosine_lr(cfg.lr, cfg.lr_min, e, cfg.qc_epochs)));
    std::vector<double> losses;
    int step = 0;
    for (const auto& b : batches_of(qc_idx, cfg.batch_size, &shuffle_rng)) {
      const Batch bt = make_batch(ds, b, &cfg.augment, &aug_rng);
      Tensor feats, labels;
      {
        NoGradGuard ng;
        const Tensor logits = p.seg.logits(bt.image, nullptr, false);
        feats = qc_features(bt.image, logits);
        labels = dice_labels(logits, bt.mask, bt.size);
      }
      const Tensor loss = mse(p.qc.forward(feats, nullptr, true), labels);
      check_finite(loss.item(), "mse", "retrain-qc", e + 1, step++);
      loss.backward();
      clip_grad_norm(qc_params, cfg.grad_clip);
      qc_opt.step();
      qc_opt.zero_grad();
      losses.push_back(loss.item());
    }
    m.qc_loss.push_back(mean_of(losses));
  }
  set_requires_grad(seg_params, true);

  m.const_pred = evaluate(p.seg, nullptr, nullptr, ds, qc_idx, cfg.batch_size).mean_dice;
  const EvalResult v = evaluate(p.seg, &p.qc, nullptr, ds, val_idx, cfg.batch_size);
  m.val_dice = v.mean_dice;
  m.val_mae = v.mae;
  double acc = 0;
  for (double d : v.dice) acc += std::abs(d - m.const_pred);
  m.const_mae = acc / v.dice.size();
  return m;
}

void run_pipeline(DerivedPipeline& p, const Tensor& image) {
  NoGradGuard ng;
  const Tensor logits = p.seg.logits(image, nullptr, false);
  p.qc.forward(qc_features(image, logits), nullptr, false);
}

ReportRow make_report_row(const std::string& name, DerivedPipeline& p, const RetrainMetrics& m, const LatencyLut& lut,
                          int extent, int bench_samples) {
  ReportRow r;
  r.name = name;
  r.dice = m.val_dice;
  r.mae = m.val_mae;
  r.const_mae = m.const_mae;
  r.flops = p.seg.flops({1, p.seg.config().in_channels, extent, extent}) +
            p.qc.flops({1, p.qc.config().in_channels, extent, extent});
  const Tensor image({1, p.seg.config().in_channels, extent, extent}, Real(0.5));
  r.measured_ms = measure_wallclock_ms([&] { run_pipeline(p, image); }, bench_samples, 5);
  r.estimated_ms = LatencyModel(p.seg, p.qc, extent, lut).discrete_ms();
  r.rel_error = r.measured_ms > 0 ? std::abs(r.estimated_ms - r.measured_ms) / r.measured_ms : 0.0;
  return r;
}

std::string format_report(const std::vector<ReportRow>& rows, const std::map<std::string, std::string>& extra,
                          bool include_wallclock) {
  std::ostringstream os;
  os << std::left << std::setw(18) << "model" << std::right << std::setw(8) << "Dice" << std::setw(8) << "MAE"
     << std::setw(12) << "const MAE";
  if (include_wallclock) os << std::setw(14) << "Latency (ms)";
  os << std::setw(14) << "LUT est (ms)";
  if (include_wallclock) os << std::setw(10) << "est err";
  os << std::setw(12) << "FLOPs (M)" << "\n";
  os << std::fixed;
  for (const auto& r : rows) {
    os << std::left << std::setw(18) << r.name << std::right << std::setprecision(4) << std::setw(8) << r.dice
       << std::setw(8) << r.mae << std::setw(12) << r.const_mae;
    if (include_wallclock) os << std::setprecision(3) << std::setw(14) << r.measured_ms;
    os << std::setprecision(3) << std::setw(14) << r.estimated_ms;
    if (include_wallclock) os << std::setprecision(1) << std::setw(9) << 100 * r.rel_error << "%";
    os << std::setprecision(3) << std::setw(12) << r.flops / 1e6 << "\n";
  }
  os << "\n[metrics]\n";
  for (const auto& r : rows) {
    os << r.name << ".dice = " << format_real(r.dice) << "\n";
    os << r.name << ".mae = " << format_real(r.mae) << "\n";
    os << r.name << ".const_mae = " << format_real(r.const_mae) << "\n";
    os << r.name << ".estimated_ms = " << format_real(r.estimated_ms) << "\n";
    os << r.name << ".flops = " << r.flops << "\n";
    if (include_wallclock) {
      os << r.name << ".measured_ms = " << format_real(r.measured_ms) << "\n";
      os << r.name << ".estimate_rel_error = " << format_real(r.rel_error) << "\n";
    }
  }
  for (const auto& [k, v] : extra) os << k << " = " << v << "\n";
  return os.str();
}

}  // namespace hwnas
