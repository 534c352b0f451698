#pragma once

// Joint differentiable search of the segmentation and QC supernets.
//
// Config file: one `key value` pair per line, `#` starts a comment. Keys
// (defaults in SearchConfig):
//
//   lambda1 lambda2 epochs warmup_epochs m seg_depth seg_filters qc_pairs
//   qc_filters qc_growth seeds batch_size w_lr w_lr_min w_momentum
//   w_weight_decay alpha_lr alpha_weight_decay tau grad_clip alternation
//   augment_translation augment_rotation augment_scale
//
// seeds is a comma-separated list; alternation is `batch` or `epoch`;
// augment_* take 0/1.
//
// History file:
//
//   # hwnas-history 1
//   seed <u64>
//   epoch=<int> phase=warmup|search ce=<r> mse=<r> lat_ms=<r> entropy=<r> loss=<r> eval_ce=<r> eval_mse=<r>
//   ...
//   final warmup_val_dice=<r> val_dice=<r> val_mae=<r> objective=<r>

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "hwnas/train.hpp"

namespace hwnas {

struct SearchConfig {
  double lambda1 = 1.0;
  double lambda2 = 0.001;  // per millisecond
  int epochs = 80;
  int warmup_epochs = 40;
  int m = 3;
  int seg_depth = 3;
  int seg_filters = 4;
  int qc_pairs = 3;
  int qc_filters = 8;
  int qc_growth = 1;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  AugmentToggles augment;
  int batch_size = 8;
  double w_lr = 0.025;
  double w_lr_min = 0.001;
  double w_momentum = 0.9;
  double w_weight_decay = 3e-4;
  double alpha_lr = 3e-3;
  double alpha_weight_decay = 1e-3;
  double tau = 1.0;
  double grad_clip = 5.0;
  std::string alternation = "batch";

  SegNetConfig seg_config() const;
  QcNetConfig qc_config() const;
  void validate() const;
  std::string serialize() const;
  static SearchConfig parse(std::string_view text);
};

// ce + lambda1 * mse + lambda2 * lat_ms, all scalar tensors.
Tensor total_loss(const Tensor& ce, const Tensor& mse, const Tensor& lat_ms, const SearchConfig& cfg);

// Mean Shannon entropy (nats) of softmax(alpha) over every searched edge.
double alpha_entropy(const ArchParams& alpha);

struct EpochRecord {
  int epoch = 0;
  std::string phase;
  double ce = 0, mse = 0, lat_ms = 0, entropy = 0, loss = 0, eval_ce = 0, eval_mse = 0;
};

struct History {
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  double warmup_val_dice = 0;
  double val_dice = 0;
  double val_mae = 0;
  double objective = 0;

  std::string serialize() const;
  static History parse(std::string_view text);
};

// Validation objective used to rank seeds.
double validation_objective(double val_dice, double val_mae);

using LogFn = std::function<void(const std::string&)>;

struct SearchResult {
  ArchParams alpha;
  ArchParams alpha_after_warmup;
  History history;
  Genotype genotype;
  SegNet seg;
  QcNet qc;
};

// Stepwise driver of one seed's search. Each epoch interleaves weight steps
// on seg_train batches with architecture and QC steps on seg_eval batches;
// warmup epochs skip the architecture step.
class Searcher {
 public:
  Searcher(const SearchConfig& cfg, std::uint64_t seed, const Dataset& ds, const SplitPlan& plan,
           const LatencyLut& lut);
  ~Searcher();
  Searcher(Searcher&&) noexcept;

  struct StepLoss {
    double ce = 0, mse = 0;
  };
  // Single steps. The epoch counter only tags diagnostics here.
  StepLoss weight_step(const Batch& b, int step);
  double qc_step(const Batch& b, int step);
  StepLoss alpha_step(const Batch& b, int step);
  // Assembles a batch with the search's augmentation stream.
  Batch train_batch(const std::vector<int>& idx);

  void run_epoch(const LogFn& log = {});
  bool done() const;
  int epoch() const;
  // Runs the remaining epochs, then validates and derives.
  SearchResult finish() &&;

  const ArchParams& alpha() const;
  SegNet& seg();
  QcNet& qc();
  const History& history() const;

  struct State;

 private:
  std::unique_ptr<State> s_;
};

// Throws NonFiniteLoss on a non-finite loss term and MissingLutEntry when
// the LUT misses a key of the search space.
SearchResult search(const SearchConfig& cfg, std::uint64_t seed, const Dataset& ds, const SplitPlan& plan,
                    const LatencyLut& lut, const LogFn& log = {});

// Index of the best history by objective; ties go to the earlier entry.
std::size_t select_best(const std::vector<History>& histories);

struct SeedRuns {
  std::vector<SearchResult> runs;
  std::size_t best = 0;
};
SeedRuns run_seeds(const SearchConfig& cfg, const Dataset& ds, const SplitPlan& plan, const LatencyLut& lut,
                   const LogFn& log = {});

}  // namespace hwnas
