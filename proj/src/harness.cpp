#include "pcd/harness.hpp"

#include "pcd/rng.hpp"

#include <fmt/format.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace pcd {

void validate_train_config(const TrainConfig& config) {
  if (config.epochs < 1 || config.batch_size < 1)
    throw std::invalid_argument(fmt::format("train config: epochs {} and batch size {} must be >= 1",
                                            config.epochs, config.batch_size));
  if (!(config.learning_rate >= 0.0) || !std::isfinite(config.learning_rate))
    throw std::invalid_argument("train config: learning rate must be finite and >= 0");
  if (config.beta1 < 0.0 || config.beta1 >= 1.0 || config.beta2 < 0.0 || config.beta2 >= 1.0)
    throw std::invalid_argument(fmt::format("train config: betas ({}, {}) must lie in [0, 1)",
                                            config.beta1, config.beta2));
  if (!(config.adam_epsilon > 0.0))
    throw std::invalid_argument("train config: adam epsilon must be > 0");
}

AdamOptimizer::AdamOptimizer(std::vector<Param*> params, const TrainConfig& config)
    : rate_(config.learning_rate), beta1_(config.beta1), beta2_(config.beta2),
      epsilon_(config.adam_epsilon) {
  validate_train_config(config);
  slots_.reserve(params.size());
  for (Param* param : params) {
    if (param == nullptr) throw std::invalid_argument("adam: null parameter");
    slots_.push_back({param, Matrix::Zero(param->value.rows(), param->value.cols()),
                      Matrix::Zero(param->value.rows(), param->value.cols())});
  }
}

void AdamOptimizer::zero_grad() {
  for (Slot& slot : slots_) slot.param->zero_grad();
}

void AdamOptimizer::step() {
  ++timestep_;
  const double first_correction = 1.0 - std::pow(beta1_, double(timestep_));
  const double second_correction = 1.0 - std::pow(beta2_, double(timestep_));
  for (Slot& slot : slots_) {
    const Matrix& grad = slot.param->grad;
    slot.first = beta1_ * slot.first + (1.0 - beta1_) * grad;
    slot.second = (beta2_ * slot.second.array() + (1.0 - beta2_) * grad.array().square()).matrix();
    Eigen::ArrayXXd first_hat = slot.first.array() / first_correction;
    Eigen::ArrayXXd second_hat = slot.second.array() / second_correction;
    slot.param->value.array() -= rate_ * first_hat / (second_hat.sqrt() + epsilon_);
  }
}

namespace {

// Mean squared forecast error over a whole window set, model unchanged.
double mean_squared_error(ForecastModel& model, const WindowedSet& windows) {
  double total = 0.0;
  for (std::size_t w = 0; w < windows.size(); ++w) {
    Matrix diff = model.predict(windows.inputs[w]) - windows.targets[w];
    total += diff.array().square().mean();
  }
  return total / double(windows.size());
}

void snapshot_params(const ForecastModel& model, std::vector<Matrix>& out) {
  out.clear();
  out.reserve(model.params().size());
  for (const Param* p : model.params()) out.push_back(p->value);
}

}  // namespace

TrainHistory train(ForecastModel& model, const WindowedSet& train_set,
                   const WindowedSet& val_set, const TrainConfig& config) {
  validate_train_config(config);
  if (train_set.size() == 0 || val_set.size() == 0)
    throw std::invalid_argument("train: training and validation sets must be non-empty");

  const bool scalar_mask = model.has_param("mask.scale");
  AdamOptimizer optimizer(model.params(), config);
  Rng order_rng(config.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainHistory history;
  history.best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<Matrix> best_params;
  snapshot_params(model, best_params);
  history.best_epoch = 0;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    order_rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    int batch_index = 0;

    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_index) {
      const std::size_t count = std::min<std::size_t>(config.batch_size, order.size() - start);
      Tape tape;
      ModelGraph graph(tape, model);
      Tensor batch_loss;
      try {
        for (std::size_t k = 0; k < count; ++k) {
          const std::size_t w = order[start + k];
          Tensor loss = mse_loss(graph.forecast(train_set.inputs[w]),
                                 tape.constant(train_set.targets[w]));
          batch_loss = batch_loss.defined() ? add(batch_loss, loss) : loss;
        }
      } catch (const std::invalid_argument& fault) {
        // The graph layout is identical every batch, so shape contracts that
        // survived the first batch cannot start failing later; a mid-training
        // invalid_argument means activations overflowed (softmax refuses
        // rows with no finite entry). Surface it as divergence with the
        // epoch/batch location, keeping the underlying message.
        throw std::runtime_error(
            fmt::format("training diverged: non-finite loss at epoch {}, batch {}: {}", epoch,
                        batch_index, fault.what()));
      }
      batch_loss = scale(batch_loss, 1.0 / double(count));

      const double loss_value = batch_loss.value()(0, 0);
      if (!std::isfinite(loss_value))
        throw std::runtime_error(fmt::format(
            "training diverged: non-finite loss at epoch {}, batch {}", epoch, batch_index));

      optimizer.zero_grad();
      tape.backward(batch_loss);
      optimizer.step();

      epoch_loss += loss_value * double(count);
      seen += count;
    }

    EpochRecord record;
    record.epoch = epoch;
    record.train_loss = epoch_loss / double(seen);
    record.val_loss = mean_squared_error(model, val_set);
    if (scalar_mask) {
      auto snapshot = model.scalar_snapshot();
      record.mask_scale = snapshot.scale;
      record.mask_shift = snapshot.shift;
    } else {
      record.mask_scale = std::numeric_limits<double>::quiet_NaN();
      record.mask_shift = std::numeric_limits<double>::quiet_NaN();
    }
    history.epochs.push_back(record);

    if (record.val_loss < history.best_val_loss) {
      history.best_val_loss = record.val_loss;
      history.best_epoch = epoch;
      snapshot_params(model, best_params);
    }
  }

  const auto& params = model.params();
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_params[i];
  return history;
}

EvalReport evaluate(ForecastModel& model, const WindowedSet& test_set) {
  if (test_set.size() == 0) throw std::invalid_argument("evaluate: empty window set");

  const Eigen::Index horizon = test_set.targets[0].rows();
  const Eigen::Index channels = test_set.targets[0].cols();
  Eigen::VectorXd squared = Eigen::VectorXd::Zero(horizon);
  Eigen::VectorXd absolute = Eigen::VectorXd::Zero(horizon);

  for (std::size_t w = 0; w < test_set.size(); ++w) {
    Matrix diff = model.predict(test_set.inputs[w]) - test_set.targets[w];
    squared += diff.array().square().matrix().rowwise().sum();
    absolute += diff.cwiseAbs().rowwise().sum();
  }
  const double normalizer = 1.0 / (double(test_set.size()) * double(channels));

  EvalReport report;
  report.per_horizon.resize(horizon);
  for (Eigen::Index h = 0; h < horizon; ++h) {
    report.per_horizon[h].mse = squared(h) * normalizer;
    report.per_horizon[h].mae = absolute(h) * normalizer;
    report.average.mse += report.per_horizon[h].mse;
    report.average.mae += report.per_horizon[h].mae;
  }
  report.average.mse /= double(horizon);
  report.average.mae /= double(horizon);

  if (model.config().mode == AttentionMode::pcd) {
    report.has_mask = true;
    report.mask_ratio = model.current_mask().mixing_ratio;
    if (model.has_param("mask.scale")) {
      report.has_scalar_mask = true;
      auto snapshot = model.scalar_snapshot();
      report.mask_scale = snapshot.scale;
      report.mask_shift = snapshot.shift;
    }
  }
  return report;
}

MaskedChannelReport masked_channel_prediction(ForecastModel& model,
                                              const WindowedSet& test_set) {
  if (test_set.size() == 0)
    throw std::invalid_argument("masked channel prediction: empty window set");
  const Eigen::Index channels = test_set.inputs[0].cols();
  if (channels < 2)
    throw std::invalid_argument(
        "masked channel prediction: needs at least two channels, the erased channel "
        "must have neighbors to borrow from");

  MaskedChannelReport report;
  report.per_channel.assign(channels, 0.0);
  for (Eigen::Index c = 0; c < channels; ++c) {
    double total = 0.0;
    for (std::size_t w = 0; w < test_set.size(); ++w) {
      // Normalization statistics come from the window before erasing: the
      // imputed channel enters the model as zeros but its forecast keeps
      // the original channel's scale instead of the imputed (flat) one.
      const WindowStats stats = window_stats(test_set.inputs[w]);
      Matrix erased = test_set.inputs[w];
      erased.col(c).setConstant(erased.col(c).mean());
      Matrix forecast = model.predict(erased, stats);
      total += (forecast.col(c) - test_set.targets[w].col(c)).array().square().mean();
    }
    report.per_channel[c] = total / double(test_set.size());
  }
  return report;
}

AblationTable ablation_run(const PreparedData& data, const ModelConfig& base,
                           const TrainConfig& train_config, Metric metric) {
  static const MaskKind kinds[] = {MaskKind::all_ones, MaskKind::abs_similarity,
                                   MaskKind::centered_similarity, MaskKind::scalar_identity,
                                   MaskKind::scalar};
  static const WeightComposition compositions[] = {
      WeightComposition::local_only, WeightComposition::global_only, WeightComposition::both};

  const CorrStats stats = channel_stats(data.train_split, metric);
  AblationTable table;
  for (MaskKind kind : kinds) {
    for (WeightComposition composition : compositions) {
      ModelConfig config = base;
      config.mode = AttentionMode::pcd;
      config.mask_kind = kind;
      config.composition = composition;
      validate_config(config);

      ForecastModel model(config, stats, train_config.seed);
      train(model, data.train, data.val, train_config);
      EvalReport eval = evaluate(model, data.test);

      AblationCell cell;
      cell.kind = kind;
      cell.composition = composition;
      cell.mse = eval.average.mse;
      cell.mae = eval.average.mae;
      table.cells.push_back(cell);
    }
  }
  return table;
}

RobustnessTable robustness_sweep(const RawDataset& dataset, const SplitSpec& split,
                                 const ModelConfig& base, const TrainConfig& train_config,
                                 const std::vector<double>& ratios, std::uint64_t corrupt_seed,
                                 Metric metric) {
  auto run_once = [&](const RawDataset& source, double ratio) {
    PreparedData data = prepare_windows(source, split, base.lookback, base.horizon);
    const CorrStats stats = channel_stats(data.train_split, metric);
    ForecastModel model(base, stats, train_config.seed);
    train(model, data.train, data.val, train_config);
    EvalReport eval = evaluate(model, data.test);

    RobustnessRow row;
    row.missing_ratio = ratio;
    row.abs_ratio = cd_ratio(stats.similarity);
    row.mse = eval.average.mse;
    row.mae = eval.average.mae;
    return row;
  };

  RobustnessTable table;
  table.rows.push_back(run_once(dataset, 0.0));
  for (double ratio : ratios) {
    if (!(ratio >= 0.0) || ratio >= 1.0)
      throw std::invalid_argument(fmt::format("robustness sweep: ratio {} outside [0, 1)", ratio));
    if (ratio == 0.0) {
      table.rows.push_back(table.rows.front());
      continue;
    }
    RawDataset restored = linear_interpolate(corrupt_missing(dataset, ratio, corrupt_seed));
    table.rows.push_back(run_once(restored, ratio));
  }
  return table;
}

}  // namespace pcd
