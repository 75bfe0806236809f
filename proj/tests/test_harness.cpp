#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "pcd/harness.hpp"

#include <cmath>
#include <string>

using pcd::AttentionMode;
using pcd::Matrix;
using pcd::ModelConfig;
using pcd::TrainConfig;
using pcd::WeightComposition;

namespace {

ModelConfig tiny_config(AttentionMode mode, WeightComposition composition,
                        pcd::MaskKind kind = pcd::MaskKind::scalar) {
  ModelConfig config;
  config.lookback = 8;
  config.horizon = 2;
  config.embed_dim = 4;
  config.heads = 2;
  config.layers = 1;
  config.mode = mode;
  config.composition = composition;
  config.mask_kind = kind;
  return config;
}

pcd::RawDataset lagged_dataset(int channels, int rows, std::uint64_t seed) {
  pcd::SynthSpec spec;
  spec.channels = channels;
  spec.rows = rows;
  spec.coupling = pcd::LaggedCopyCoupling{2, 0.05};
  spec.seed = seed;
  return pcd::synth_generate(spec);
}

pcd::CorrStats stats_of(const pcd::PreparedData& data) {
  return pcd::channel_stats(data.train_split, pcd::Metric::pearson);
}

std::string params_fingerprint(const pcd::ForecastModel& model) {
  std::string combined;
  for (const pcd::Param* p : model.params()) combined += pcd::matrix_fingerprint(p->value);
  return combined;
}

}  // namespace

TEST_CASE("train config contracts") {
  TrainConfig config;
  CHECK_NOTHROW(pcd::validate_train_config(config));

  config.learning_rate = 0.0;  // legitimate no-op rate
  CHECK_NOTHROW(pcd::validate_train_config(config));

  config.learning_rate = -1e-3;
  CHECK_THROWS_AS(pcd::validate_train_config(config), std::invalid_argument);

  config = TrainConfig{};
  config.epochs = 0;
  CHECK_THROWS_AS(pcd::validate_train_config(config), std::invalid_argument);

  config = TrainConfig{};
  config.beta2 = 1.0;
  CHECK_THROWS_AS(pcd::validate_train_config(config), std::invalid_argument);
}

TEST_CASE("adam's first step moves by the learning rate, direction from the gradient") {
  pcd::Param p("w", Matrix::Constant(1, 1, 1.0));
  TrainConfig config;
  pcd::AdamOptimizer adam({&p}, config);

  p.grad = Matrix::Constant(1, 1, 0.5);
  adam.step();
  // First step: corrected moments collapse to grad / |grad|, so the update
  // magnitude is the learning rate up to the epsilon guard.
  CHECK(p.value(0, 0) == doctest::Approx(1.0 - 1e-3).epsilon(1e-9));

  pcd::Param q("w", Matrix::Constant(1, 1, 1.0));
  pcd::AdamOptimizer frozen({&q}, [] {
    TrainConfig c;
    c.learning_rate = 0.0;
    return c;
  }());
  q.grad = Matrix::Constant(1, 1, 0.5);
  frozen.step();
  CHECK(q.value(0, 0) == 1.0);
}

TEST_CASE("zero learning rate leaves parameters and losses untouched") {
  auto dataset = lagged_dataset(3, 260, 50);
  auto data = pcd::prepare_windows(dataset, {}, 8, 2);
  pcd::ForecastModel model(tiny_config(AttentionMode::pcd, WeightComposition::both),
                           stats_of(data), 1);
  const std::string before = params_fingerprint(model);

  TrainConfig config;
  config.epochs = 3;
  config.learning_rate = 0.0;
  config.seed = 2;
  auto history = pcd::train(model, data.train, data.val, config);

  CHECK(params_fingerprint(model) == before);
  REQUIRE(history.epochs.size() == 3);
  for (const auto& epoch : history.epochs) {
    CHECK(std::abs(epoch.train_loss - history.epochs[0].train_loss) < 1e-12);
    CHECK(epoch.val_loss == history.epochs[0].val_loss);
  }
}

TEST_CASE("training is bit-identical across runs at a fixed seed") {
  auto dataset = lagged_dataset(3, 260, 51);
  auto data = pcd::prepare_windows(dataset, {}, 8, 2);
  TrainConfig config;
  config.epochs = 3;
  config.seed = 5;

  pcd::ForecastModel a(tiny_config(AttentionMode::pcd, WeightComposition::both), stats_of(data), 3);
  pcd::ForecastModel b(tiny_config(AttentionMode::pcd, WeightComposition::both), stats_of(data), 3);
  auto history_a = pcd::train(a, data.train, data.val, config);
  auto history_b = pcd::train(b, data.train, data.val, config);

  REQUIRE(history_a.epochs.size() == history_b.epochs.size());
  for (std::size_t e = 0; e < history_a.epochs.size(); ++e) {
    CHECK(history_a.epochs[e].train_loss == history_b.epochs[e].train_loss);
    CHECK(history_a.epochs[e].val_loss == history_b.epochs[e].val_loss);
    CHECK(history_a.epochs[e].mask_scale == history_b.epochs[e].mask_scale);
  }
  for (const pcd::Param* p : a.params()) CHECK(b.param(p->name).value == p->value);
}

TEST_CASE("loss decreases over the first epochs on coupled data") {
  auto dataset = lagged_dataset(3, 400, 52);
  auto data = pcd::prepare_windows(dataset, {}, 8, 2);
  pcd::ForecastModel model(tiny_config(AttentionMode::pcd, WeightComposition::both),
                           stats_of(data), 4);
  TrainConfig config;
  config.seed = 6;
  auto history = pcd::train(model, data.train, data.val, config);

  REQUIRE(history.epochs.size() == 10);
  CHECK(history.epochs[0].train_loss > history.epochs[1].train_loss);
  CHECK(history.epochs[1].train_loss > history.epochs[2].train_loss);
  // The mask trajectory is recorded and actually moves.
  CHECK(history.epochs[0].mask_scale != history.epochs.back().mask_scale);
}

TEST_CASE("the model ends up with the best validation epoch's parameters") {
  auto dataset = lagged_dataset(3, 300, 53);
  auto data = pcd::prepare_windows(dataset, {}, 8, 2);
  TrainConfig config;
  config.epochs = 6;
  config.seed = 7;

  pcd::ForecastModel model(tiny_config(AttentionMode::pcd, WeightComposition::both),
                           stats_of(data), 5);
  auto history = pcd::train(model, data.train, data.val, config);

  double min_val = history.epochs[0].val_loss;
  for (const auto& epoch : history.epochs) min_val = std::min(min_val, epoch.val_loss);
  CHECK(history.best_val_loss == min_val);
  CHECK(history.epochs[history.best_epoch - 1].val_loss == min_val);

  // Replaying only the winning prefix lands on identical parameters.
  pcd::ForecastModel replay(tiny_config(AttentionMode::pcd, WeightComposition::both),
                            stats_of(data), 5);
  TrainConfig prefix = config;
  prefix.epochs = history.best_epoch;
  pcd::train(replay, data.train, data.val, prefix);
  for (const pcd::Param* p : model.params()) CHECK(replay.param(p->name).value == p->value);

  auto report = pcd::evaluate(model, data.val);
  CHECK(std::abs(report.average.mse - history.best_val_loss) < 1e-12);
}

TEST_CASE("exploding training aborts with the failing epoch and batch") {
  auto dataset = lagged_dataset(3, 260, 54);
  auto data = pcd::prepare_windows(dataset, {}, 8, 2);
  pcd::ForecastModel model(tiny_config(AttentionMode::cd, WeightComposition::local_only),
                           stats_of(data), 6);
  TrainConfig config;
  config.learning_rate = 1e100;
  config.seed = 8;
  CHECK_THROWS_WITH_AS(pcd::train(model, data.train, data.val, config),
                       doctest::Contains("non-finite loss at epoch"), std::runtime_error);
}

TEST_CASE("evaluation matches the loop oracle and its own averages") {
  auto dataset = lagged_dataset(3, 300, 55);
  auto data = pcd::prepare_windows(dataset, {}, 8, 2);
  pcd::ForecastModel model(tiny_config(AttentionMode::pcd, WeightComposition::both),
                           stats_of(data), 7);

  auto report = pcd::evaluate(model, data.test);

  std::vector<Matrix> forecasts, truths;
  for (std::size_t w = 0; w < data.test.size(); ++w) {
    forecasts.push_back(model.predict(data.test.inputs[w]));
    truths.push_back(data.test.targets[w]);
  }
  auto expected = oracle::loop_errors(forecasts, truths);
  CHECK(std::abs(report.average.mse - expected.mse) < 1e-12);
  CHECK(std::abs(report.average.mae - expected.mae) < 1e-12);

  double mse_sum = 0.0, mae_sum = 0.0;
  for (const auto& row : report.per_horizon) {
    mse_sum += row.mse;
    mae_sum += row.mae;
  }
  CHECK(std::abs(report.average.mse - mse_sum / double(report.per_horizon.size())) < 1e-12);
  CHECK(std::abs(report.average.mae - mae_sum / double(report.per_horizon.size())) < 1e-12);

  CHECK(report.has_mask);
  CHECK(report.has_scalar_mask);
  CHECK(report.mask_ratio > 0.0);
  CHECK(report.mask_ratio < 1.0);
}

TEST_CASE("evaluation pins perfect and off-by-one forecasts") {
  auto dataset = lagged_dataset(2, 260, 56);
  auto data = pcd::prepare_windows(dataset, {}, 8, 2);
  pcd::ForecastModel model(tiny_config(AttentionMode::cd, WeightComposition::local_only),
                           stats_of(data), 8);

  pcd::WindowedSet perfect = data.test;
  for (std::size_t w = 0; w < perfect.size(); ++w)
    perfect.targets[w] = model.predict(perfect.inputs[w]);
  auto clean = pcd::evaluate(model, perfect);
  CHECK(clean.average.mse == 0.0);
  CHECK(clean.average.mae == 0.0);

  for (std::size_t w = 0; w < perfect.size(); ++w) perfect.targets[w].array() -= 1.0;
  auto shifted = pcd::evaluate(model, perfect);
  CHECK(shifted.average.mse == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(shifted.average.mae == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("masked channel prediction leaves the model untouched and needs company") {
  auto dataset = lagged_dataset(3, 300, 57);
  auto data = pcd::prepare_windows(dataset, {}, 8, 2);
  pcd::ForecastModel model(tiny_config(AttentionMode::pcd, WeightComposition::both),
                           stats_of(data), 9);
  TrainConfig config;
  config.epochs = 2;
  config.seed = 10;
  pcd::train(model, data.train, data.val, config);

  const std::string before = params_fingerprint(model);
  auto mcp = pcd::masked_channel_prediction(model, data.test);
  CHECK(params_fingerprint(model) == before);
  REQUIRE(mcp.per_channel.size() == 3);
  for (double loss : mcp.per_channel) CHECK(std::isfinite(loss));

  pcd::WindowedSet solo = data.test;
  for (auto& input : solo.inputs) input = input.col(0).eval();
  for (auto& target : solo.targets) target = target.col(0).eval();
  CHECK_THROWS_AS(pcd::masked_channel_prediction(model, solo), std::invalid_argument);
}

TEST_CASE("masked dependent channels recover better with the mask than without") {
  auto dataset = lagged_dataset(2, 500, 58);
  auto data = pcd::prepare_windows(dataset, {}, 12, 2);

  ModelConfig base = tiny_config(AttentionMode::pcd, WeightComposition::both);
  base.lookback = 12;
  TrainConfig config;
  config.seed = 11;

  pcd::ForecastModel pcd_model(base, stats_of(data), 12);
  pcd::train(pcd_model, data.train, data.val, config);

  ModelConfig ci_config = base;
  ci_config.mode = AttentionMode::ci;
  ci_config.composition = WeightComposition::local_only;
  pcd::ForecastModel ci_model(ci_config, stats_of(data), 12);
  pcd::train(ci_model, data.train, data.val, config);

  auto pcd_mcp = pcd::masked_channel_prediction(pcd_model, data.test);
  auto ci_mcp = pcd::masked_channel_prediction(ci_model, data.test);
  // Channel 1 trails channel 0, so with its own history erased only a
  // cross-channel model can recover it.
  CHECK(pcd_mcp.per_channel[1] < ci_mcp.per_channel[1]);
}

TEST_CASE("ablation grid: the neutral mask with local composition is exactly the cd model") {
  auto dataset = lagged_dataset(3, 300, 59);
  auto data = pcd::prepare_windows(dataset, {}, 8, 2);
  ModelConfig base = tiny_config(AttentionMode::pcd, WeightComposition::both);
  TrainConfig config;
  config.epochs = 3;
  config.seed = 13;

  auto table = pcd::ablation_run(data, base, config);
  REQUIRE(table.cells.size() == 15);

  ModelConfig cd_config = base;
  cd_config.mode = AttentionMode::cd;
  cd_config.composition = WeightComposition::local_only;
  pcd::ForecastModel cd_model(cd_config, stats_of(data), config.seed);
  pcd::train(cd_model, data.train, data.val, config);
  auto cd_eval = pcd::evaluate(cd_model, data.test);

  bool found = false;
  for (const auto& cell : table.cells) {
    if (cell.kind == pcd::MaskKind::all_ones &&
        cell.composition == WeightComposition::local_only) {
      found = true;
      CHECK(std::abs(cell.mse - cd_eval.average.mse) < 1e-12);
      CHECK(std::abs(cell.mae - cd_eval.average.mae) < 1e-12);
    }
  }
  CHECK(found);

  auto rerun = pcd::ablation_run(data, base, config);
  for (std::size_t i = 0; i < table.cells.size(); ++i) {
    CHECK(rerun.cells[i].mse == table.cells[i].mse);
    CHECK(rerun.cells[i].mae == table.cells[i].mae);
  }
}

TEST_CASE("ablation grid: learned mask with both components wins on coupled data") {
  // Desk-scale margins are seed-sensitive, so this pins one configuration
  // where the direction is clear (winning cell ~8% below the runner-up).
  auto dataset = lagged_dataset(3, 1000, 60);
  auto data = pcd::prepare_windows(dataset, {}, 16, 2);
  ModelConfig base = tiny_config(AttentionMode::pcd, WeightComposition::both);
  base.lookback = 16;
  TrainConfig config;
  config.learning_rate = 3e-3;
  config.seed = 14;

  auto table = pcd::ablation_run(data, base, config);
  std::size_t winner = 0;
  for (std::size_t i = 1; i < table.cells.size(); ++i)
    if (table.cells[i].mse < table.cells[winner].mse) winner = i;

  CHECK(table.cells[winner].kind == pcd::MaskKind::scalar);
  CHECK(table.cells[winner].composition == WeightComposition::both);
}

TEST_CASE("robustness sweep keeps structure under moderate missingness") {
  auto dataset = lagged_dataset(3, 360, 61);
  ModelConfig base = tiny_config(AttentionMode::pcd, WeightComposition::both);
  TrainConfig config;
  config.epochs = 4;
  config.seed = 15;

  auto table = pcd::robustness_sweep(dataset, {}, base, config, {0.0, 0.1, 0.25, 0.5}, 62);
  REQUIRE(table.rows.size() == 5);
  CHECK(table.rows[0].missing_ratio == 0.0);

  // The explicit 0 ratio row repeats the clean baseline.
  CHECK(table.rows[1].mse == table.rows[0].mse);
  CHECK(table.rows[1].abs_ratio == table.rows[0].abs_ratio);

  for (const auto& row : table.rows) {
    CHECK(std::isfinite(row.mse));
    CHECK(std::abs(row.abs_ratio - table.rows[0].abs_ratio) <= 0.05);
  }

  CHECK_THROWS_AS(pcd::robustness_sweep(dataset, {}, base, config, {1.0}, 62),
                  std::invalid_argument);
}
