// Training and evaluation harness: Adam on the squared-error objective,
// metric reports, masked channel prediction, and the ablation/robustness
// experiment grids. Everything here is deterministic given (data, config,
// seed); batch order is a seeded shuffle, never wall-clock or address-based.

#pragma once

#include "pcd/chanmask.hpp"
#include "pcd/dataio.hpp"
#include "pcd/forecaster.hpp"

#include <cstdint>
#include <vector>

namespace pcd {

struct TrainConfig {
  int epochs = 10;
  int batch_size = 32;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 0;
};

// Contract checks: epochs/batch >= 1, rate >= 0 (zero is a legitimate
// no-op used to probe determinism), betas in [0,1), epsilon > 0.
void validate_train_config(const TrainConfig& config);

class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Param*> params, const TrainConfig& config);

  void zero_grad();
  void step();  // consumes accumulated grads, advances the shared timestep

 private:
  struct Slot {
    Param* param;
    Matrix first, second;  // running moment estimates
  };
  std::vector<Slot> slots_;
  double rate_, beta1_, beta2_, epsilon_;
  long timestep_ = 0;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  // Scalar-mask trajectory; NaN when the model has no scalar mask.
  double mask_scale = 0.0;
  double mask_shift = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;  // epoch whose parameters the model ends up holding
  double best_val_loss = 0.0;
};

// Minimizes the mean squared forecast error with Adam. Batches are
// contiguous slices of a per-epoch Fisher-Yates shuffle seeded from
// config.seed. After the last epoch the parameters from the best validation
// epoch are restored. Non-finite losses abort with the epoch and batch.
TrainHistory train(ForecastModel& model, const WindowedSet& train_set,
                   const WindowedSet& val_set, const TrainConfig& config);

struct MetricsRow {
  double mse = 0.0;
  double mae = 0.0;
};

struct EvalReport {
  std::vector<MetricsRow> per_horizon;  // one row per forecast step
  MetricsRow average;                   // exact mean of the rows
  bool has_mask = false;
  double mask_ratio = 0.0;  // cd_ratio of the learned mask when has_mask
  bool has_scalar_mask = false;
  double mask_scale = 0.0;
  double mask_shift = 0.0;
};

// Forecast metrics over a window set, averaged over windows and channels,
// reported per horizon step and as the mean across steps.
EvalReport evaluate(ForecastModel& model, const WindowedSet& test_set);

struct MaskedChannelReport {
  std::vector<double> per_channel;  // squared-error loss, masked channel only
};

// For each channel: erase its input history (replace with the window mean,
// which normalizes to zero), forecast, and score that channel's forecast
// alone. Normalization statistics are taken from the original window, so
// whatever the model recovers from the other channels is scored at the
// erased channel's real scale. No retraining, and the model is left
// untouched. Contract: at least two channels.
MaskedChannelReport masked_channel_prediction(ForecastModel& model,
                                              const WindowedSet& test_set);

struct AblationCell {
  MaskKind kind = MaskKind::all_ones;
  WeightComposition composition = WeightComposition::local_only;
  double mse = 0.0;
  double mae = 0.0;
};

struct AblationTable {
  std::vector<AblationCell> cells;  // kind-major, composition-minor order
};

// Trains one pcd-mode model per (mask kind, composition) cell at a shared
// seed and reports test metrics. Kinds: all-ones, abs similarity, centered
// similarity, scalar-identity, scalar. Channel statistics come from the
// standardized training split under the given metric.
AblationTable ablation_run(const PreparedData& data, const ModelConfig& base,
                           const TrainConfig& train_config, Metric metric = Metric::pearson);

struct RobustnessRow {
  double missing_ratio = 0.0;  // 0 = clean baseline
  double abs_ratio = 0.0;      // cd_ratio of |R| on the (gap-filled) train split
  double mse = 0.0;
  double mae = 0.0;
};

struct RobustnessTable {
  std::vector<RobustnessRow> rows;  // clean row first, then the given ratios
};

// Corrupt -> interpolate -> recompute correlation -> train/eval, once per
// missing ratio, plus the clean baseline row.
RobustnessTable robustness_sweep(const RawDataset& dataset, const SplitSpec& split,
                                 const ModelConfig& base, const TrainConfig& train_config,
                                 const std::vector<double>& ratios, std::uint64_t corrupt_seed,
                                 Metric metric = Metric::pearson);

}  // namespace pcd
