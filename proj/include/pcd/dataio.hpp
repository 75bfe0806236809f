// Dataset loading, chronological splitting, windowing, and synthetic
// series generation.
//
// Splits are strictly chronological (train prefix, validation middle, test
// suffix) and windows never straddle a split boundary. Standardization
// statistics always come from the training split, so downstream consumers
// cannot leak future rows into scaling or correlation estimates.

#pragma once

#include "pcd/matrix.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

namespace pcd {

struct RawDataset {
  std::string name;
  std::vector<std::string> channel_names;
  Matrix values;  // rows x channels, always finite
  std::vector<std::string> notices;
};

struct SplitSpec {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

struct DatasetSplits {
  Matrix train;
  Matrix val;
  Matrix test;
};

struct ChannelStandardizer {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd stddev;  // constant channels get 1.0 so scaling stays finite
};

struct WindowedSet {
  int lookback = 0;
  int horizon = 0;
  std::vector<Matrix> inputs;   // lookback x channels each
  std::vector<Matrix> targets;  // horizon x channels each
  std::vector<long> offsets;    // window start row within the source split
  std::size_t size() const { return inputs.size(); }
};

// CSV with an optional header row and an optional leading timestamp column
// (detected by non-numeric cells and dropped with a notice). Ragged rows or
// unparseable cells raise errors citing the 1-based file line.
RawDataset load_csv(const std::filesystem::path& path);

// Contract: fractions in (0, 1) summing to 1 within 1e-9.
DatasetSplits chrono_split(const RawDataset& dataset, const SplitSpec& spec = {});

// Sliding windows with stride 1: rows [i, i+L) predict rows [i+L, i+L+H).
// Contract: the split holds at least L + H rows.
WindowedSet make_windows(const Matrix& split, int lookback, int horizon);

ChannelStandardizer fit_standardizer(const Matrix& train_split);
Matrix apply_standardizer(const Matrix& data, const ChannelStandardizer& stats);
WindowedSet standardize(const WindowedSet& windows, const ChannelStandardizer& stats);

// Everything the training loop needs, scaled by training-split statistics.
struct PreparedData {
  WindowedSet train;
  WindowedSet val;
  WindowedSet test;
  ChannelStandardizer stats;
  Matrix train_split;  // standardized training rows; correlation source
};

PreparedData prepare_windows(const RawDataset& dataset, const SplitSpec& spec, int lookback,
                             int horizon);

// Chronological prefix of ceil(ratio * rows). Contract: ratio in (0, 1].
RawDataset subsample_fraction(const RawDataset& dataset, double ratio);

// --- Synthetic generation. Deterministic: a pure function of (spec, seed).

struct IndependentCoupling {};

// channel 0 is an AR(1)-plus-sinusoid base; channel k repeats it delayed by
// k*lag steps with fresh Gaussian noise of the given stddev.
struct LaggedCopyCoupling {
  int lag = 3;
  double noise = 0.1;
};

// channel i mixes len(weights) independent latent signals, rotated by i.
struct MixtureCoupling {
  std::vector<double> weights;
};

using Coupling = std::variant<IndependentCoupling, LaggedCopyCoupling, MixtureCoupling>;

struct SynthSpec {
  int channels = 4;
  long rows = 2000;
  Coupling coupling = LaggedCopyCoupling{};
  std::uint64_t seed = 0;
};

RawDataset synth_generate(const SynthSpec& spec);

// --- Missing data. Gaps are explicit: only GappedDataset may hold NaN.

struct GappedDataset {
  std::string name;
  std::vector<std::string> channel_names;
  Matrix values;  // NaN marks a missing cell
  double missing_ratio = 0.0;
};

// Marks each cell missing independently with probability `ratio`.
// Contract: ratio in [0, 1).
GappedDataset corrupt_missing(const RawDataset& dataset, double ratio, std::uint64_t seed);

// Linear interpolation between observed neighbors per channel; leading and
// trailing gaps copy the nearest observed value. A channel with no observed
// values at all is a contract error naming the channel.
RawDataset linear_interpolate(const GappedDataset& dataset);

}  // namespace pcd
