// Channel-relationship statistics: how strongly the channels of a
// multivariate series co-vary, under several notions of similarity.
//
// Every metric is reduced to the same triple:
//   raw         the metric as computed (correlation, cosine, or distance)
//   similarity  mapped into [0, 1] with unit diagonal
//   centered    similarity minus its global mean (diagonal included), the
//               zero-sum matrix downstream mask construction consumes
//
// Distance metrics (euclidean, dtw) become similarities by min-max
// normalizing the off-diagonal entries and flipping: the closest pair maps
// to 1, the farthest to 0. Statistics are meant to be computed on the
// training split only; the cache helpers key records by a fingerprint of
// exactly the rows that went in, so a stale sidecar can never be confused
// with a fresh one.

#pragma once

#include "pcd/matrix.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace pcd {

enum class Metric { pearson, cosine, euclidean, dtw };

const char* metric_name(Metric metric);
Metric metric_from_name(const std::string& name);

struct CorrStats {
  Metric metric = Metric::pearson;
  Matrix raw;
  Matrix similarity;
  Matrix centered;
  int channel_count = 0;
  long source_rows = 0;
  std::vector<std::string> warnings;
};

// Pearson correlation across channels (columns). Constant channels get
// zero correlation to everything, self-correlation 1, and a warning.
// Contract: at least 2 rows.
CorrStats pearson_corr(const Matrix& data);

// Absolute cosine similarity of the raw channel vectors.
CorrStats cosine_sim(const Matrix& data);

// L2 distance between channel vectors, min-max flipped to similarity.
CorrStats euclid_sim(const Matrix& data);

// Dynamic-time-warping cost between channel vectors, min-max flipped.
// Quadratic in length per pair; contract: at most 100 channels.
CorrStats dtw_sim(const Matrix& data);

CorrStats channel_stats(const Matrix& data, Metric metric);

// Alignment cost with squared local differences. Steps move forward in x,
// in y, or in both; cost is the minimum path total from (0,0) to the end.
double dtw(const Eigen::VectorXd& x, const Eigen::VectorXd& y);

// Mean off-diagonal entry: 0 for the identity, 1 for all-ones, and a
// calibrated degree of cross-channel mixing in between.
// Contract: square, at least 2x2, finite entries.
double cd_ratio(const Matrix& m);

// FNV-1a fingerprint of a matrix's shape and row-major payload bytes.
std::string matrix_fingerprint(const Matrix& m);

// Textual sidecar with one stats record. Doubles are printed with 17
// significant digits, so a load returns bit-identical matrices.
void save_stats_cache(const std::filesystem::path& path, const CorrStats& stats,
                      const std::string& dataset, const std::string& split_fingerprint);

// Returns the cached stats only when dataset, fingerprint, and metric all
// match; anything else (including a missing file) is a cache miss.
std::optional<CorrStats> load_stats_cache(const std::filesystem::path& path,
                                          const std::string& dataset,
                                          const std::string& split_fingerprint, Metric metric);

}  // namespace pcd
