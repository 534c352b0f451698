#pragma once

// Pieces shared by the search loop and retraining: QC feature assembly,
// patient splits, evaluation, retraining of derived pipelines and reports.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "hwnas/augment.hpp"
#include "hwnas/genotype.hpp"
#include "hwnas/latency.hpp"

namespace hwnas {

// QC network input: concat(image, softmax(logits), softmax entropy).
Tensor qc_features(const Tensor& image, const Tensor& logits);
// Per-sample Dice of argmax(logits) against the truth, as a constant [N].
Tensor dice_labels(const Tensor& logits, std::span<const std::uint8_t> truth, int n);

// Patient ids per role.
//
// Search uses seg_train / seg_eval / test from the dataset manifest. For
// retraining, validation is the test patients plus seg_eval patients until
// it holds 40% of all patients; the remaining 60% are shuffled and halved
// into a segmentation half and a QC half.
struct SplitPlan {
  std::vector<int> seg_train, seg_eval, test;
  std::vector<int> retrain_seg, retrain_qc, validation;

  // Throws on any overlap that the protocol forbids.
  void check() const;
};
SplitPlan make_split_plan(const Dataset& ds);

struct EvalResult {
  std::vector<double> dice;       // per sample
  std::vector<double> predicted;  // QC prediction per sample (empty without QC)
  double mean_dice = 0;
  double mae = 0;
};

// Inference-mode evaluation over the given sample indices.
EvalResult evaluate(SegNet& seg, QcNet* qc, const ArchWeights* w, const Dataset& ds, const std::vector<int>& samples,
                    int batch);

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
// Throws NonFiniteLoss naming the phase, epoch, step and term.
void check_finite(double v, const std::string& term, const std::string& phase, int epoch, int step);

void set_requires_grad(const std::vector<Tensor>& ts, bool on);

struct RetrainConfig {
  int seg_epochs = 30;
  int qc_epochs = 30;
  int batch_size = 8;
  double lr = 0.05;
  double lr_min = 0.001;
  double momentum = 0.9;
  double weight_decay = 3e-4;
  double grad_clip = 5.0;
  AugmentToggles augment;
  std::uint64_t seed = 1;
};

struct RetrainMetrics {
  double val_dice = 0;
  double val_mae = 0;
  double const_pred = 0;  // mean Dice label over the QC training half
  double const_mae = 0;   // MAE of predicting const_pred on validation
  std::vector<double> seg_loss, qc_loss;  // per epoch
};

// Trains the segmentation net with cross-entropy on retrain_seg, then the QC
// net with MSE on retrain_qc while the segmentation net stays frozen.
RetrainMetrics retrain(DerivedPipeline& p, const Dataset& ds, const SplitPlan& plan, const RetrainConfig& cfg);

struct ReportRow {
  std::string name;
  double dice = 0;
  double mae = 0;
  double const_mae = 0;
  double measured_ms = 0;  // median wall clock, one image through both nets
  double estimated_ms = 0; // LUT sum for the same pipeline
  double rel_error = 0;    // |estimated - measured| / measured
  std::int64_t flops = 0;
};

// Single-image inference through segmentation, feature assembly and QC.
void run_pipeline(DerivedPipeline& p, const Tensor& image);

ReportRow make_report_row(const std::string& name, DerivedPipeline& p, const RetrainMetrics& m, const LatencyLut& lut,
                          int extent, int bench_samples);

// Text table followed by a `key = value` section. `extra` lines are
// appended verbatim to the key-value section.
std::string format_report(const std::vector<ReportRow>& rows, const std::map<std::string, std::string>& extra,
                          bool include_wallclock);

}  // namespace hwnas
