#include "hwnas/search.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>

#include "hwnas/optim.hpp"
#include "hwnas/textio.hpp"

namespace hwnas {

namespace {

Rng stream(std::uint64_t seed, std::uint32_t purpose) {
  std::seed_seq ss{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), purpose};
  return Rng(ss);
}

enum Purpose : std::uint32_t { kInit = 1, kGumbel = 2, kAugment = 3, kShuffle = 4 };

std::vector<std::vector<int>> shuffled_batches(std::vector<int> idx, int batch, Rng& rng) {
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < idx.size(); i += batch)
    out.emplace_back(idx.begin() + i, idx.begin() + std::min(idx.size(), i + batch));
  return out;
}

ArchWeights constant_weights(const ArchParams& alpha) {
  NoGradGuard ng;
  return alpha.probabilities();
}

std::string join_seeds(const std::vector<std::uint64_t>& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out;
}

}  // namespace

SegNetConfig SearchConfig::seg_config() const { return {seg_depth, m, seg_filters, 3}; }
QcNetConfig SearchConfig::qc_config() const { return {qc_pairs, m, qc_filters, qc_growth, 6}; }

void SearchConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("search config: " + msg); };
  if (epochs < 1) fail("epochs must be positive");
  if (warmup_epochs < 0 || warmup_epochs > epochs) fail("need 0 <= warmup_epochs <= epochs");
  if (!(lambda1 >= 0)) fail("lambda1 must be >= 0");
  if (!(lambda2 >= 0)) fail("lambda2 must be >= 0");
  if (m < 1 || seg_depth < 1 || seg_filters < 1 || qc_pairs < 1 || qc_filters < 1 || qc_growth < 1)
    fail("structural sizes must be positive");
  if (seeds.empty()) fail("at least one seed is required");
  if (batch_size < 1) fail("batch_size must be positive");
  if (!(tau > 0)) fail("tau must be positive");
  if (alternation != "batch" && alternation != "epoch") fail("alternation must be 'batch' or 'epoch'");
}

std::string SearchConfig::serialize() const {
  std::ostringstream os;
  os << "lambda1 " << format_real(lambda1) << "\n"
     << "lambda2 " << format_real(lambda2) << "\n"
     << "epochs " << epochs << "\n"
     << "warmup_epochs " << warmup_epochs << "\n"
     << "m " << m << "\n"
     << "seg_depth " << seg_depth << "\n"
     << "seg_filters " << seg_filters << "\n"
     << "qc_pairs " << qc_pairs << "\n"
     << "qc_filters " << qc_filters << "\n"
     << "qc_growth " << qc_growth << "\n"
     << "seeds " << join_seeds(seeds) << "\n"
     << "batch_size " << batch_size << "\n"
     << "w_lr " << format_real(w_lr) << "\n"
     << "w_lr_min " << format_real(w_lr_min) << "\n"
     << "w_momentum " << format_real(w_momentum) << "\n"
     << "w_weight_decay " << format_real(w_weight_decay) << "\n"
     << "alpha_lr " << format_real(alpha_lr) << "\n"
     << "alpha_weight_decay " << format_real(alpha_weight_decay) << "\n"
     << "tau " << format_real(tau) << "\n"
     << "grad_clip " << format_real(grad_clip) << "\n"
     << "alternation " << alternation << "\n"
     << "augment_translation " << augment.translation << "\n"
     << "augment_rotation " << augment.rotation << "\n"
     << "augment_scale " << augment.scale << "\n";
  return os.str();
}

SearchConfig SearchConfig::parse(std::string_view text) {
  SearchConfig c;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto f = split_words(line);
    if (f.empty()) continue;
    if (f.size() != 2) throw std::runtime_error("config line " + std::to_string(lineno) + ": expected 'key value'");
    const std::string& k = f[0];
    const std::string& v = f[1];
    if (k == "lambda1") c.lambda1 = parse_real(v, k);
    else if (k == "lambda2") c.lambda2 = parse_real(v, k);
    else if (k == "epochs") c.epochs = parse_int(v, k);
    else if (k == "warmup_epochs") c.warmup_epochs = parse_int(v, k);
    else if (k == "m") c.m = parse_int(v, k);
    else if (k == "seg_depth") c.seg_depth = parse_int(v, k);
    else if (k == "seg_filters") c.seg_filters = parse_int(v, k);
    else if (k == "qc_pairs") c.qc_pairs = parse_int(v, k);
    else if (k == "qc_filters") c.qc_filters = parse_int(v, k);
    else if (k == "qc_growth") c.qc_growth = parse_int(v, k);
    else if (k == "seeds") {
      c.seeds.clear();
      std::string tok;
      std::istringstream ss(v);
      while (std::getline(ss, tok, ',')) c.seeds.push_back(parse_u64(tok, k));
    } else if (k == "batch_size") c.batch_size = parse_int(v, k);
    else if (k == "w_lr") c.w_lr = parse_real(v, k);
    else if (k == "w_lr_min") c.w_lr_min = parse_real(v, k);
    else if (k == "w_momentum") c.w_momentum = parse_real(v, k);
    else if (k == "w_weight_decay") c.w_weight_decay = parse_real(v, k);
    else if (k == "alpha_lr") c.alpha_lr = parse_real(v, k);
    else if (k == "alpha_weight_decay") c.alpha_weight_decay = parse_real(v, k);
    else if (k == "tau") c.tau = parse_real(v, k);
    else if (k == "grad_clip") c.grad_clip = parse_real(v, k);
    else if (k == "alternation") c.alternation = v;
    else if (k == "augment_translation") c.augment.translation = parse_bool(v, k);
    else if (k == "augment_rotation") c.augment.rotation = parse_bool(v, k);
    else if (k == "augment_scale") c.augment.scale = parse_bool(v, k);
    else throw std::runtime_error("config line " + std::to_string(lineno) + ": unknown key '" + k + "'");
  }
  c.validate();
  return c;
}

Tensor total_loss(const Tensor& ce, const Tensor& mse_term, const Tensor& lat_ms, const SearchConfig& cfg) {
  for (const Tensor* t : {&ce, &mse_term, &lat_ms})
    if (t->numel() != 1) throw std::invalid_argument("total_loss: terms must be scalars");
  return add(add(ce, mul_scalar(mse_term, static_cast<Real>(cfg.lambda1))), mul_scalar(lat_ms, static_cast<Real>(cfg.lambda2)));
}

double alpha_entropy(const ArchParams& alpha) {
  double acc = 0;
  int n = 0;
  for (const auto& [kind, edges] : alpha.logits)
    for (const Tensor& a : edges) {
      const Tensor p = softmax(a.detach(), 0);
      for (Real v : p.values())
        if (v > 0) acc -= v * std::log(static_cast<double>(v));
      ++n;
    }
  return n ? acc / n : 0.0;
}

std::string History::serialize() const {
  std::ostringstream os;
  os << "# hwnas-history 1\nseed " << seed << "\n";
  for (const auto& e : epochs)
    os << "epoch=" << e.epoch << " phase=" << e.phase << " ce=" << format_real(e.ce) << " mse=" << format_real(e.mse)
       << " lat_ms=" << format_real(e.lat_ms) << " entropy=" << format_real(e.entropy) << " loss=" << format_real(e.loss)
       << " eval_ce=" << format_real(e.eval_ce) << " eval_mse=" << format_real(e.eval_mse) << "\n";
  os << "final warmup_val_dice=" << format_real(warmup_val_dice) << " val_dice=" << format_real(val_dice)
     << " val_mae=" << format_real(val_mae) << " objective=" << format_real(objective) << "\n";
  return os.str();
}

History History::parse(std::string_view text) {
  History h;
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != "# hwnas-history 1") throw std::runtime_error("history: missing '# hwnas-history 1' header");
  bool final_seen = false;
  while (std::getline(in, line)) {
    auto f = split_words(line);
    if (f.empty()) continue;
    if (f[0] == "seed" && f.size() == 2) {
      h.seed = parse_u64(f[1], "seed");
      continue;
    }
    const bool is_final = f[0] == "final";
    if (is_final) f.erase(f.begin());
    EpochRecord e;
    for (const auto& kv : f) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw std::runtime_error("history: expected name=value, got '" + kv + "'");
      const std::string k = kv.substr(0, eq), v = kv.substr(eq + 1);
      if (is_final) {
        if (k == "warmup_val_dice") h.warmup_val_dice = parse_real(v, k);
        else if (k == "val_dice") h.val_dice = parse_real(v, k);
        else if (k == "val_mae") h.val_mae = parse_real(v, k);
        else if (k == "objective") h.objective = parse_real(v, k);
        else throw std::runtime_error("history: unknown field '" + k + "'");
        continue;
      }
      if (k == "epoch") e.epoch = parse_int(v, k);
      else if (k == "phase") e.phase = v;
      else if (k == "ce") e.ce = parse_real(v, k);
      else if (k == "mse") e.mse = parse_real(v, k);
      else if (k == "lat_ms") e.lat_ms = parse_real(v, k);
      else if (k == "entropy") e.entropy = parse_real(v, k);
      else if (k == "loss") e.loss = parse_real(v, k);
      else if (k == "eval_ce") e.eval_ce = parse_real(v, k);
      else if (k == "eval_mse") e.eval_mse = parse_real(v, k);
      else throw std::runtime_error("history: unknown field '" + k + "'");
    }
    if (is_final) final_seen = true;
    else h.epochs.push_back(e);
  }
  if (!final_seen) throw std::runtime_error("history: missing final record");
  return h;
}

double validation_objective(double val_dice, double val_mae) { return val_dice - val_mae; }

struct Searcher::State {
  SearchConfig cfg;
  std::uint64_t seed;
  const Dataset& ds;
  int epoch = 0;
  Rng gumbel, aug, shuffle;
  SearchResult r;
  LatencyModel lat_model;
  std::vector<Tensor> seg_params, qc_params, all_params;
  Sgd seg_opt, qc_opt;
  Adam alpha_opt;
  std::vector<int> train_idx, eval_idx, val_idx;

  State(const SearchConfig& c, std::uint64_t s, const Dataset& d, const SplitPlan& plan, const LatencyLut& lut,
        SegNet seg, QcNet qc)
      : cfg(c),
        seed(s),
        ds(d),
        gumbel(stream(s, kGumbel)),
        aug(stream(s, kAugment)),
        shuffle(stream(s, kShuffle)),
        r{ArchParams::zeros(std::vector<CellKind>(std::begin(kSearchedKinds), std::end(kSearchedKinds)), c.m),
          {}, {}, {}, std::move(seg), std::move(qc)},
        lat_model(r.seg, r.qc, d.manifest.height, lut),
        seg_params(r.seg.state().param_tensors()),
        qc_params(r.qc.state().param_tensors()),
        all_params(seg_params),
        seg_opt(seg_params, static_cast<Real>(c.w_lr), static_cast<Real>(c.w_momentum),
                static_cast<Real>(c.w_weight_decay)),
        qc_opt(qc_params, static_cast<Real>(c.w_lr), static_cast<Real>(c.w_momentum),
               static_cast<Real>(c.w_weight_decay)),
        alpha_opt(r.alpha.tensors(), static_cast<Real>(c.alpha_lr), Real(0.5), Real(0.999),
                  static_cast<Real>(c.alpha_weight_decay)),
        train_idx(d.indices_of(plan.seg_train)),
        eval_idx(d.indices_of(plan.seg_eval)),
        val_idx(d.indices_of(plan.validation)) {
    all_params.insert(all_params.end(), qc_params.begin(), qc_params.end());
    r.history.seed = s;
  }

  std::string phase() const { return epoch <= cfg.warmup_epochs ? "warmup" : "search"; }

  void warmup_done() {
    r.alpha_after_warmup = r.alpha.clone();
    const ArchWeights w = constant_weights(r.alpha);
    r.history.warmup_val_dice = evaluate(r.seg, nullptr, &w, ds, val_idx, cfg.batch_size).mean_dice;
  }
};

namespace {

std::unique_ptr<Searcher::State> make_state(const SearchConfig& cfg, std::uint64_t seed, const Dataset& ds,
                                            const SplitPlan& plan, const LatencyLut& lut) {
  cfg.validate();
  plan.check();
  const int extent = ds.manifest.height;
  if (ds.manifest.width != extent) throw std::invalid_argument("search: square images required");
  Rng init = stream(seed, kInit);
  SegNet seg = SegNet::supernet(cfg.seg_config(), init);
  QcNet qc = QcNet::supernet(cfg.qc_config(), init);
  seg.check_input({1, 3, extent, extent});
  return std::make_unique<Searcher::State>(cfg, seed, ds, plan, lut, std::move(seg), std::move(qc));
}

}  // namespace

Searcher::Searcher(const SearchConfig& cfg, std::uint64_t seed, const Dataset& ds, const SplitPlan& plan,
                   const LatencyLut& lut)
    : s_(make_state(cfg, seed, ds, plan, lut)) {
  if (cfg.warmup_epochs == 0) s_->warmup_done();
}

Searcher::~Searcher() = default;
Searcher::Searcher(Searcher&&) noexcept = default;

int Searcher::epoch() const { return s_->epoch; }
bool Searcher::done() const { return s_->epoch >= s_->cfg.epochs; }
const ArchParams& Searcher::alpha() const { return s_->r.alpha; }
SegNet& Searcher::seg() { return s_->r.seg; }
QcNet& Searcher::qc() { return s_->r.qc; }
const History& Searcher::history() const { return s_->r.history; }
Batch Searcher::train_batch(const std::vector<int>& idx) { return make_batch(s_->ds, idx, &s_->cfg.augment, &s_->aug); }

Searcher::StepLoss Searcher::weight_step(const Batch& b, int step) {
  State& s = *s_;
  const ArchWeights w = constant_weights(s.r.alpha);
  const Tensor logits = s.r.seg.logits(b.image, &w, true);
  const Tensor ce = cross_entropy_2d(logits, b.mask);
  const Tensor labels = dice_labels(logits, b.mask, b.size);
  const Tensor m = mse(s.r.qc.forward(qc_features(b.image, logits), &w, true), labels);
  check_finite(ce.item(), "ce", s.phase(), s.epoch, step);
  check_finite(m.item(), "mse", s.phase(), s.epoch, step);
  add(ce, mul_scalar(m, static_cast<Real>(s.cfg.lambda1))).backward();
  clip_grad_norm(s.all_params, s.cfg.grad_clip);
  s.seg_opt.step();
  s.qc_opt.step();
  s.seg_opt.zero_grad();
  s.qc_opt.zero_grad();
  return {ce.item(), m.item()};
}

double Searcher::qc_step(const Batch& b, int step) {
  State& s = *s_;
  const ArchWeights w = constant_weights(s.r.alpha);
  Tensor feats, labels;
  {
    NoGradGuard ng;
    const Tensor logits = s.r.seg.logits(b.image, &w, true);
    feats = qc_features(b.image, logits);
    labels = dice_labels(logits, b.mask, b.size);
  }
  const Tensor m = mse(s.r.qc.forward(feats, &w, true), labels);
  check_finite(m.item(), "mse", s.phase(), s.epoch, step);
  mul_scalar(m, static_cast<Real>(s.cfg.lambda1)).backward();
  clip_grad_norm(s.qc_params, s.cfg.grad_clip);
  s.qc_opt.step();
  s.qc_opt.zero_grad();
  return m.item();
}

Searcher::StepLoss Searcher::alpha_step(const Batch& b, int step) {
  State& s = *s_;
  set_requires_grad(s.all_params, false);
  struct Restore {
    std::vector<Tensor>& p;
    ~Restore() { set_requires_grad(p, true); }
  } restore{s.all_params};
  const ArchWeights w = s.r.alpha.probabilities();
  const Tensor logits = s.r.seg.logits(b.image, &w, true);
  const Tensor ce = cross_entropy_2d(logits, b.mask);
  const Tensor labels = dice_labels(logits, b.mask, b.size);
  const Tensor m = mse(s.r.qc.forward(qc_features(b.image, logits.detach()), &w, true), labels);
  const Tensor lat = s.lat_model.estimate_ms(s.r.alpha, static_cast<Real>(s.cfg.tau), s.gumbel);
  check_finite(ce.item(), "ce", "search", s.epoch, step);
  check_finite(m.item(), "mse", "search", s.epoch, step);
  check_finite(lat.item(), "lat", "search", s.epoch, step);
  total_loss(ce, m, lat, s.cfg).backward();
  s.alpha_opt.step();
  s.alpha_opt.zero_grad();
  return {ce.item(), m.item()};
}

void Searcher::run_epoch(const LogFn& log) {
  State& s = *s_;
  if (done()) throw std::logic_error("search: all epochs already ran");
  const int epoch = ++s.epoch;
  const SearchConfig& cfg = s.cfg;
  const double cur_lr = cosine_lr(cfg.w_lr, cfg.w_lr_min, epoch - 1, cfg.epochs);
  s.seg_opt.set_lr(static_cast<Real>(cur_lr));
  s.qc_opt.set_lr(static_cast<Real>(cur_lr));
  const bool warm = epoch <= cfg.warmup_epochs;
  const auto tb = shuffled_batches(s.train_idx, cfg.batch_size, s.shuffle);
  const auto eb = shuffled_batches(s.eval_idx, cfg.batch_size, s.shuffle);
  double ce = 0, m = 0, ece = 0, emse = 0;
  int n_train = 0, n_eval = 0;

  auto do_train = [&](std::size_t i) {
    const StepLoss l = weight_step(train_batch(tb[i]), static_cast<int>(i));
    ce += l.ce;
    m += l.mse;
    ++n_train;
  };
  auto do_eval = [&](std::size_t i) {
    const Batch b = train_batch(eb[i]);
    if (!warm) {
      const StepLoss l = alpha_step(b, static_cast<int>(i));
      ece += l.ce;
      emse += l.mse;
    }
    const double qm = qc_step(b, static_cast<int>(i));
    if (warm) emse += qm;
    ++n_eval;
  };
  if (cfg.alternation == "batch") {
    for (std::size_t i = 0; i < std::max(tb.size(), eb.size()); ++i) {
      if (i < tb.size()) do_train(i);
      if (i < eb.size()) do_eval(i);
    }
  } else {
    for (std::size_t i = 0; i < tb.size(); ++i) do_train(i);
    for (std::size_t i = 0; i < eb.size(); ++i) do_eval(i);
  }

  EpochRecord e;
  e.epoch = epoch;
  e.phase = s.phase();
  e.ce = ce / std::max(1, n_train);
  e.mse = m / std::max(1, n_train);
  e.lat_ms = s.lat_model.expected_ms(s.r.alpha);
  e.entropy = alpha_entropy(s.r.alpha);
  e.loss = e.ce + cfg.lambda1 * e.mse + cfg.lambda2 * e.lat_ms;
  e.eval_ce = ece / std::max(1, n_eval);
  e.eval_mse = emse / std::max(1, n_eval);
  s.r.history.epochs.push_back(e);
  if (log) {
    std::ostringstream os;
    os << "seed " << s.seed << " epoch " << epoch << "/" << cfg.epochs << " [" << e.phase << "] ce=" << e.ce
       << " mse=" << e.mse << " lat_ms=" << e.lat_ms << " entropy=" << e.entropy;
    log(os.str());
  }
  if (epoch == cfg.warmup_epochs) s.warmup_done();
}

SearchResult Searcher::finish() && {
  State& s = *s_;
  while (!done()) run_epoch();
  const ArchWeights w = constant_weights(s.r.alpha);
  const EvalResult v = evaluate(s.r.seg, &s.r.qc, &w, s.ds, s.val_idx, s.cfg.batch_size);
  s.r.history.val_dice = v.mean_dice;
  s.r.history.val_mae = v.mae;
  s.r.history.objective = validation_objective(v.mean_dice, v.mae);
  s.r.genotype = derive(s.r.alpha, s.cfg.seg_config(), s.cfg.qc_config());
  return std::move(s.r);
}

SearchResult search(const SearchConfig& cfg, std::uint64_t seed, const Dataset& ds, const SplitPlan& plan,
                    const LatencyLut& lut, const LogFn& log) {
  Searcher s(cfg, seed, ds, plan, lut);
  while (!s.done()) s.run_epoch(log);
  return std::move(s).finish();
}

std::size_t select_best(const std::vector<History>& histories) {
  if (histories.empty()) throw std::invalid_argument("select_best: no runs");
  std::size_t best = 0;
  for (std::size_t i = 1; i < histories.size(); ++i)
    if (histories[i].objective > histories[best].objective) best = i;
  return best;
}

SeedRuns run_seeds(const SearchConfig& cfg, const Dataset& ds, const SplitPlan& plan, const LatencyLut& lut,
                   const LogFn& log) {
  SeedRuns out;
  std::vector<History> hs;
  for (std::uint64_t s : cfg.seeds) {
    out.runs.push_back(search(cfg, s, ds, plan, lut, log));
    hs.push_back(out.runs.back().history);
  }
  out.best = select_best(hs);
  return out;
}

}  // namespace hwnas
