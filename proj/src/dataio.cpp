#include "pcd/dataio.hpp"

#include "pcd/rng.hpp"

#include <fmt/format.h>

#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace pcd {

namespace {

std::vector<std::string> split_cells(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  for (char ch : line) {
    if (ch == ',') {
      cells.push_back(cell);
      cell.clear();
    } else if (ch != '\r') {
      cell.push_back(ch);
    }
  }
  cells.push_back(cell);
  for (std::string& c : cells) {
    const auto first = c.find_first_not_of(" \t");
    const auto last = c.find_last_not_of(" \t");
    c = (first == std::string::npos) ? std::string() : c.substr(first, last - first + 1);
  }
  return cells;
}

bool parse_double(const std::string& cell, double& out) {
  const char* begin = cell.data();
  const char* end = begin + cell.size();
  auto [ptr, ec] = std::from_chars(begin, end, out);
  return ec == std::errc() && ptr == end && !cell.empty() && std::isfinite(out);
}

}  // namespace

RawDataset load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("load_csv: cannot open '{}'", path.string()));

  std::vector<std::vector<std::string>> rows;
  std::vector<long> line_numbers;
  std::string line;
  long line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    rows.push_back(split_cells(line));
    line_numbers.push_back(line_number);
  }
  if (rows.empty())
    throw std::runtime_error(fmt::format("load_csv: '{}' has no data rows", path.string()));

  const std::size_t width = rows.front().size();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != width)
      throw std::runtime_error(
          fmt::format("load_csv: row {} has {} cells, expected {}", line_numbers[r],
                      rows[r].size(), width));
  }

  // A first row with any non-numeric cell is a header.
  bool has_header = false;
  for (const std::string& cell : rows.front()) {
    double ignored;
    if (!parse_double(cell, ignored)) {
      has_header = true;
      break;
    }
  }

  RawDataset dataset;
  dataset.name = path.stem().string();
  const std::size_t first_data = has_header ? 1 : 0;
  if (first_data >= rows.size())
    throw std::runtime_error(fmt::format("load_csv: '{}' has a header but no data rows",
                                         path.string()));

  // A non-numeric first column in the data block is a timestamp axis.
  double ignored;
  const bool drop_first_column = !parse_double(rows[first_data][0], ignored);
  const std::size_t first_channel = drop_first_column ? 1 : 0;
  if (first_channel >= width)
    throw std::runtime_error(
        fmt::format("load_csv: '{}' has no numeric columns", path.string()));
  if (drop_first_column)
    dataset.notices.push_back(fmt::format(
        "load_csv: dropped non-numeric first column (timestamps) from '{}'", path.string()));

  const auto channel_count = static_cast<Eigen::Index>(width - first_channel);
  const auto data_rows = static_cast<Eigen::Index>(rows.size() - first_data);
  dataset.values.resize(data_rows, channel_count);
  for (Eigen::Index r = 0; r < data_rows; ++r) {
    const auto& cells = rows[first_data + static_cast<std::size_t>(r)];
    for (Eigen::Index c = 0; c < channel_count; ++c) {
      const std::string& cell = cells[first_channel + static_cast<std::size_t>(c)];
      double value;
      if (!parse_double(cell, value))
        throw std::runtime_error(fmt::format(
            "load_csv: row {}, column {}: cannot parse '{}' as a finite number",
            line_numbers[first_data + static_cast<std::size_t>(r)], first_channel + c + 1,
            cell));
      dataset.values(r, c) = value;
    }
  }

  if (has_header) {
    for (std::size_t c = first_channel; c < width; ++c)
      dataset.channel_names.push_back(rows.front()[c]);
  } else {
    for (Eigen::Index c = 0; c < channel_count; ++c)
      dataset.channel_names.push_back(fmt::format("c{}", c));
  }
  return dataset;
}

DatasetSplits chrono_split(const RawDataset& dataset, const SplitSpec& spec) {
  if (spec.train <= 0.0 || spec.train >= 1.0 || spec.val <= 0.0 || spec.val >= 1.0 ||
      spec.test <= 0.0 || spec.test >= 1.0 ||
      std::abs(spec.train + spec.val + spec.test - 1.0) > 1e-9)
    throw std::invalid_argument(
        fmt::format("chrono_split: fractions ({}, {}, {}) must lie in (0,1) and sum to 1",
                    spec.train, spec.val, spec.test));

  const Eigen::Index total = dataset.values.rows();
  const auto train_rows = static_cast<Eigen::Index>(std::floor(spec.train * total));
  const auto val_rows = static_cast<Eigen::Index>(std::floor(spec.val * total));
  const Eigen::Index test_rows = total - train_rows - val_rows;
  if (train_rows < 1 || val_rows < 1 || test_rows < 1)
    throw std::invalid_argument(fmt::format(
        "chrono_split: {} rows are too few for fractions ({}, {}, {})", total, spec.train,
        spec.val, spec.test));

  DatasetSplits splits;
  splits.train = dataset.values.topRows(train_rows);
  splits.val = dataset.values.middleRows(train_rows, val_rows);
  splits.test = dataset.values.bottomRows(test_rows);
  return splits;
}

WindowedSet make_windows(const Matrix& split, int lookback, int horizon) {
  if (lookback < 1 || horizon < 1)
    throw std::invalid_argument(fmt::format(
        "make_windows: lookback {} and horizon {} must both be positive", lookback, horizon));
  const Eigen::Index count = split.rows() - lookback - horizon + 1;
  if (count < 1)
    throw std::invalid_argument(
        fmt::format("make_windows: split of {} rows cannot fit lookback {} plus horizon {}",
                    split.rows(), lookback, horizon));

  WindowedSet windows;
  windows.lookback = lookback;
  windows.horizon = horizon;
  windows.inputs.reserve(static_cast<std::size_t>(count));
  windows.targets.reserve(static_cast<std::size_t>(count));
  for (Eigen::Index i = 0; i < count; ++i) {
    windows.inputs.push_back(split.middleRows(i, lookback));
    windows.targets.push_back(split.middleRows(i + lookback, horizon));
    windows.offsets.push_back(static_cast<long>(i));
  }
  return windows;
}

ChannelStandardizer fit_standardizer(const Matrix& train_split) {
  if (train_split.rows() < 1)
    throw std::invalid_argument("fit_standardizer: training split is empty");
  ChannelStandardizer stats;
  stats.mean = train_split.colwise().mean();
  Matrix centered = train_split.rowwise() - stats.mean;
  stats.stddev = (centered.array().square().colwise().mean()).sqrt();
  for (Eigen::Index c = 0; c < stats.stddev.size(); ++c)
    if (stats.stddev(c) < 1e-8) stats.stddev(c) = 1.0;
  return stats;
}

Matrix apply_standardizer(const Matrix& data, const ChannelStandardizer& stats) {
  if (data.cols() != stats.mean.cols())
    throw std::invalid_argument(
        fmt::format("apply_standardizer: data has {} channels, stats have {}", data.cols(),
                    stats.mean.cols()));
  return (data.rowwise() - stats.mean).array().rowwise() / stats.stddev.array();
}

WindowedSet standardize(const WindowedSet& windows, const ChannelStandardizer& stats) {
  WindowedSet out = windows;
  for (Matrix& input : out.inputs) input = apply_standardizer(input, stats);
  for (Matrix& target : out.targets) target = apply_standardizer(target, stats);
  return out;
}

PreparedData prepare_windows(const RawDataset& dataset, const SplitSpec& spec, int lookback,
                             int horizon) {
  DatasetSplits splits = chrono_split(dataset, spec);
  PreparedData prepared;
  prepared.stats = fit_standardizer(splits.train);
  prepared.train_split = apply_standardizer(splits.train, prepared.stats);
  prepared.train = standardize(make_windows(splits.train, lookback, horizon), prepared.stats);
  prepared.val = standardize(make_windows(splits.val, lookback, horizon), prepared.stats);
  prepared.test = standardize(make_windows(splits.test, lookback, horizon), prepared.stats);
  return prepared;
}

RawDataset subsample_fraction(const RawDataset& dataset, double ratio) {
  if (!(ratio > 0.0) || ratio > 1.0)
    throw std::invalid_argument(
        fmt::format("subsample_fraction: ratio {} must lie in (0, 1]", ratio));
  const auto keep = static_cast<Eigen::Index>(
      std::ceil(ratio * static_cast<double>(dataset.values.rows())));
  RawDataset out = dataset;
  out.values = dataset.values.topRows(keep);
  return out;
}

namespace {

// Shared AR(1)-plus-sinusoid base signal. phi is well inside the unit
// circle so every stream is stationary at any length.
Eigen::VectorXd ar_sinusoid(Rng& rng, Eigen::Index length, double period, double phase) {
  constexpr double phi = 0.9;
  constexpr double innovation = 0.2;
  Eigen::VectorXd signal(length);
  double state = rng.normal(0.0, innovation / std::sqrt(1.0 - phi * phi));
  for (Eigen::Index t = 0; t < length; ++t) {
    state = phi * state + rng.normal(0.0, innovation);
    signal(t) =
        state + std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / period + phase);
  }
  return signal;
}

}  // namespace

RawDataset synth_generate(const SynthSpec& spec) {
  if (spec.channels < 1)
    throw std::invalid_argument(
        fmt::format("synth_generate: need at least 1 channel, got {}", spec.channels));
  if (spec.rows < 2)
    throw std::invalid_argument(
        fmt::format("synth_generate: need at least 2 rows, got {}", spec.rows));

  const auto c = static_cast<Eigen::Index>(spec.channels);
  const auto t = static_cast<Eigen::Index>(spec.rows);
  Rng rng(spec.seed);

  RawDataset dataset;
  dataset.values.resize(t, c);
  for (Eigen::Index k = 0; k < c; ++k) dataset.channel_names.push_back(fmt::format("c{}", k));

  if (std::holds_alternative<IndependentCoupling>(spec.coupling)) {
    dataset.name = fmt::format("synth-independent-c{}-t{}-s{}", spec.channels, spec.rows,
                               spec.seed);
    // Distinct sinusoid periods keep cross-channel correlation incidental.
    for (Eigen::Index k = 0; k < c; ++k) {
      const double period = 19.0 + 5.0 * static_cast<double>(k);
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      dataset.values.col(k) = ar_sinusoid(rng, t, period, phase);
    }
    return dataset;
  }

  if (const auto* lagged = std::get_if<LaggedCopyCoupling>(&spec.coupling)) {
    if (lagged->lag < 0)
      throw std::invalid_argument(
          fmt::format("synth_generate: lag {} must be non-negative", lagged->lag));
    if (lagged->noise < 0.0)
      throw std::invalid_argument(
          fmt::format("synth_generate: noise {} must be non-negative", lagged->noise));
    if (spec.rows <= lagged->lag)
      throw std::invalid_argument(fmt::format(
          "synth_generate: rows {} must exceed lag {}", spec.rows, lagged->lag));
    dataset.name = fmt::format("synth-lagged-c{}-t{}-l{}-s{}", spec.channels, spec.rows,
                               lagged->lag, spec.seed);

    const Eigen::Index shift = static_cast<Eigen::Index>(lagged->lag);
    const Eigen::Index extended = t + (c - 1) * shift;
    Eigen::VectorXd base = ar_sinusoid(rng, extended, 24.0, 0.0);
    for (Eigen::Index k = 0; k < c; ++k) {
      // channel k at time u equals channel 0 at time u - k*lag
      const Eigen::Index offset = (c - 1 - k) * shift;
      dataset.values.col(k) = base.segment(offset, t);
      if (k > 0 && lagged->noise > 0.0)
        for (Eigen::Index u = 0; u < t; ++u)
          dataset.values(u, k) += rng.normal(0.0, lagged->noise);
    }
    return dataset;
  }

  const auto& mixture = std::get<MixtureCoupling>(spec.coupling);
  if (mixture.weights.empty())
    throw std::invalid_argument("synth_generate: mixture weights must be non-empty");
  dataset.name = fmt::format("synth-mixture-c{}-t{}-m{}-s{}", spec.channels, spec.rows,
                             mixture.weights.size(), spec.seed);

  const auto m = static_cast<Eigen::Index>(mixture.weights.size());
  Matrix latents(t, m);
  for (Eigen::Index j = 0; j < m; ++j) {
    const double period = 17.0 + 6.0 * static_cast<double>(j);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    latents.col(j) = ar_sinusoid(rng, t, period, phase);
  }
  dataset.values.setZero();
  for (Eigen::Index k = 0; k < c; ++k)
    for (Eigen::Index j = 0; j < m; ++j)
      dataset.values.col(k) +=
          mixture.weights[static_cast<std::size_t>(j)] * latents.col((k + j) % m);
  return dataset;
}

GappedDataset corrupt_missing(const RawDataset& dataset, double ratio, std::uint64_t seed) {
  if (ratio < 0.0 || ratio >= 1.0)
    throw std::invalid_argument(
        fmt::format("corrupt_missing: ratio {} must lie in [0, 1)", ratio));

  GappedDataset gapped;
  gapped.name = dataset.name;
  gapped.channel_names = dataset.channel_names;
  gapped.values = dataset.values;
  gapped.missing_ratio = ratio;

  Rng rng(seed);
  for (Eigen::Index r = 0; r < gapped.values.rows(); ++r)
    for (Eigen::Index c = 0; c < gapped.values.cols(); ++c)
      if (rng.uniform() < ratio)
        gapped.values(r, c) = std::numeric_limits<double>::quiet_NaN();
  return gapped;
}

RawDataset linear_interpolate(const GappedDataset& dataset) {
  RawDataset filled;
  filled.name = dataset.name;
  filled.channel_names = dataset.channel_names;
  filled.values = dataset.values;

  const Eigen::Index rows = filled.values.rows();
  for (Eigen::Index c = 0; c < filled.values.cols(); ++c) {
    std::vector<Eigen::Index> observed;
    for (Eigen::Index r = 0; r < rows; ++r)
      if (!std::isnan(filled.values(r, c))) observed.push_back(r);
    if (observed.empty())
      throw std::invalid_argument(
          fmt::format("linear_interpolate: channel {} has no observed values", c));

    // Edges copy the nearest observation; interior gaps blend linearly.
    for (Eigen::Index r = 0; r < observed.front(); ++r)
      filled.values(r, c) = filled.values(observed.front(), c);
    for (Eigen::Index r = observed.back() + 1; r < rows; ++r)
      filled.values(r, c) = filled.values(observed.back(), c);
    for (std::size_t k = 0; k + 1 < observed.size(); ++k) {
      const Eigen::Index lo = observed[k];
      const Eigen::Index hi = observed[k + 1];
      const double lo_value = filled.values(lo, c);
      const double hi_value = filled.values(hi, c);
      for (Eigen::Index r = lo + 1; r < hi; ++r) {
        const double alpha =
            static_cast<double>(r - lo) / static_cast<double>(hi - lo);
        filled.values(r, c) = lo_value + alpha * (hi_value - lo_value);
      }
    }
  }
  return filled;
}

}  // namespace pcd
