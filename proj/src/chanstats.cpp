#include "pcd/chanstats.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace pcd {

namespace {

// Similarity is finished off in one place so every metric agrees on what
// "centered" means: subtract the mean over all C^2 entries, diagonal too.
void finalize(CorrStats& stats, const Matrix& data) {
  stats.centered = stats.similarity.array() - stats.similarity.mean();
  stats.channel_count = static_cast<int>(data.cols());
  stats.source_rows = static_cast<long>(data.rows());
}

void require_channels(const Matrix& data, const char* op) {
  if (data.cols() < 1)
    throw std::invalid_argument(fmt::format("{}: data has no channels", op));
  if (data.rows() < 1)
    throw std::invalid_argument(fmt::format("{}: data has no rows", op));
}

// Min-max flip of a symmetric distance matrix into [0, 1] similarity.
// All off-diagonal entries equal means there is no spread to normalize;
// those entries become 0.5 and the caller gets a warning.
Matrix distances_to_similarity(const Matrix& dist, CorrStats& stats, const char* op) {
  const Eigen::Index c = dist.rows();
  Matrix sim = Matrix::Ones(c, c);
  if (c < 2) return sim;

  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < c; ++i)
    for (Eigen::Index j = 0; j < c; ++j) {
      if (i == j) continue;
      lo = std::min(lo, dist(i, j));
      hi = std::max(hi, dist(i, j));
    }

  if (hi == lo) {
    stats.warnings.push_back(
        fmt::format("{}: all off-diagonal distances equal ({}); similarities set to 0.5", op, lo));
    for (Eigen::Index i = 0; i < c; ++i)
      for (Eigen::Index j = 0; j < c; ++j)
        if (i != j) sim(i, j) = 0.5;
    return sim;
  }

  for (Eigen::Index i = 0; i < c; ++i)
    for (Eigen::Index j = 0; j < c; ++j)
      if (i != j) sim(i, j) = 1.0 - (dist(i, j) - lo) / (hi - lo);
  return sim;
}

}  // namespace

const char* metric_name(Metric metric) {
  switch (metric) {
    case Metric::pearson: return "pearson";
    case Metric::cosine: return "cosine";
    case Metric::euclidean: return "euclid";
    case Metric::dtw: return "dtw";
  }
  throw std::logic_error("metric_name: unknown metric");
}

Metric metric_from_name(const std::string& name) {
  if (name == "pearson") return Metric::pearson;
  if (name == "cosine") return Metric::cosine;
  if (name == "euclid" || name == "euclidean") return Metric::euclidean;
  if (name == "dtw") return Metric::dtw;
  throw std::invalid_argument(fmt::format("unknown similarity metric '{}'", name));
}

CorrStats pearson_corr(const Matrix& data) {
  require_channels(data, "pearson_corr");
  if (data.rows() < 2)
    throw std::invalid_argument(
        fmt::format("pearson_corr: need at least 2 rows, got {}", data.rows()));

  const Eigen::Index c = data.cols();
  Matrix centered_data = data.rowwise() - data.colwise().mean();
  Eigen::VectorXd sum_sq = centered_data.colwise().squaredNorm();

  CorrStats stats;
  stats.metric = Metric::pearson;
  stats.raw = Matrix::Identity(c, c);
  for (Eigen::Index i = 0; i < c; ++i) {
    if (sum_sq(i) == 0.0)
      stats.warnings.push_back(
          fmt::format("pearson_corr: channel {} is constant; its correlations are set to 0", i));
  }
  // Each pair is computed once and mirrored, so symmetry is exact.
  for (Eigen::Index i = 0; i < c; ++i) {
    for (Eigen::Index j = i + 1; j < c; ++j) {
      double value = 0.0;
      if (sum_sq(i) > 0.0 && sum_sq(j) > 0.0) {
        value = centered_data.col(i).dot(centered_data.col(j)) /
                std::sqrt(sum_sq(i) * sum_sq(j));
        value = std::clamp(value, -1.0, 1.0);
      }
      stats.raw(i, j) = value;
      stats.raw(j, i) = value;
    }
  }
  stats.similarity = stats.raw.cwiseAbs();
  finalize(stats, data);
  return stats;
}

CorrStats cosine_sim(const Matrix& data) {
  require_channels(data, "cosine_sim");
  const Eigen::Index c = data.cols();
  Eigen::VectorXd norms = data.colwise().norm();

  CorrStats stats;
  stats.metric = Metric::cosine;
  stats.raw = Matrix::Identity(c, c);
  for (Eigen::Index i = 0; i < c; ++i) {
    if (norms(i) == 0.0)
      stats.warnings.push_back(
          fmt::format("cosine_sim: channel {} is all zero; its similarities are set to 0", i));
  }
  for (Eigen::Index i = 0; i < c; ++i) {
    for (Eigen::Index j = i + 1; j < c; ++j) {
      double value = 0.0;
      if (norms(i) > 0.0 && norms(j) > 0.0) {
        value = data.col(i).dot(data.col(j)) / (norms(i) * norms(j));
        value = std::clamp(value, -1.0, 1.0);
      }
      stats.raw(i, j) = value;
      stats.raw(j, i) = value;
    }
  }
  stats.similarity = stats.raw.cwiseAbs();
  finalize(stats, data);
  return stats;
}

CorrStats euclid_sim(const Matrix& data) {
  require_channels(data, "euclid_sim");
  const Eigen::Index c = data.cols();
  Matrix dist = Matrix::Zero(c, c);
  for (Eigen::Index i = 0; i < c; ++i)
    for (Eigen::Index j = i + 1; j < c; ++j) {
      double d = (data.col(i) - data.col(j)).norm();
      dist(i, j) = d;
      dist(j, i) = d;
    }

  CorrStats stats;
  stats.metric = Metric::euclidean;
  stats.raw = dist;
  stats.similarity = distances_to_similarity(dist, stats, "euclid_sim");
  finalize(stats, data);
  return stats;
}

CorrStats dtw_sim(const Matrix& data) {
  require_channels(data, "dtw_sim");
  if (data.cols() > 100)
    throw std::invalid_argument(
        fmt::format("dtw_sim: quadratic alignment is capped at 100 channels, got {}",
                    data.cols()));
  const Eigen::Index c = data.cols();
  Matrix dist = Matrix::Zero(c, c);
  for (Eigen::Index i = 0; i < c; ++i)
    for (Eigen::Index j = i + 1; j < c; ++j) {
      double d = dtw(data.col(i), data.col(j));
      dist(i, j) = d;
      dist(j, i) = d;
    }

  CorrStats stats;
  stats.metric = Metric::dtw;
  stats.raw = dist;
  stats.similarity = distances_to_similarity(dist, stats, "dtw_sim");
  finalize(stats, data);
  return stats;
}

CorrStats channel_stats(const Matrix& data, Metric metric) {
  switch (metric) {
    case Metric::pearson: return pearson_corr(data);
    case Metric::cosine: return cosine_sim(data);
    case Metric::euclidean: return euclid_sim(data);
    case Metric::dtw: return dtw_sim(data);
  }
  throw std::logic_error("channel_stats: unknown metric");
}

double dtw(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  if (x.size() == 0 || y.size() == 0)
    throw std::invalid_argument("dtw: series must be non-empty");
  const Eigen::Index n = x.size();
  const Eigen::Index m = y.size();
  constexpr double inf = std::numeric_limits<double>::infinity();

  // Rolling two-row DP; cell (i, j) holds the cheapest alignment of
  // x[0..i] with y[0..j] under squared local cost.
  std::vector<double> prev(static_cast<std::size_t>(m), inf);
  std::vector<double> cur(static_cast<std::size_t>(m), inf);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) {
      const double local = (x(i) - y(j)) * (x(i) - y(j));
      double best;
      if (i == 0 && j == 0) {
        best = 0.0;
      } else {
        best = inf;
        if (i > 0) best = std::min(best, prev[j]);
        if (j > 0) best = std::min(best, cur[j - 1]);
        if (i > 0 && j > 0) best = std::min(best, prev[j - 1]);
      }
      cur[j] = local + best;
    }
    std::swap(prev, cur);
  }
  return prev[static_cast<std::size_t>(m - 1)];
}

double cd_ratio(const Matrix& m) {
  if (m.rows() != m.cols())
    throw std::invalid_argument(
        fmt::format("cd_ratio: matrix must be square, got {}x{}", m.rows(), m.cols()));
  if (m.rows() < 2)
    throw std::invalid_argument("cd_ratio: need at least 2 channels");
  if (!m.allFinite())
    throw std::invalid_argument("cd_ratio: matrix has non-finite entries");
  const double c = static_cast<double>(m.rows());
  return (m.sum() - m.trace()) / (c * (c - 1.0));
}

std::string matrix_fingerprint(const Matrix& m) {
  std::uint64_t hash = 1469598103934665603ULL;
  auto mix = [&hash](const void* data, std::size_t len) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      hash ^= bytes[i];
      hash *= 1099511628211ULL;
    }
  };
  const std::int64_t rows = m.rows();
  const std::int64_t cols = m.cols();
  mix(&rows, sizeof(rows));
  mix(&cols, sizeof(cols));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const double v = m(i, j);
      mix(&v, sizeof(v));
    }
  return fmt::format("{:016x}", hash);
}

namespace {

void write_matrix(std::ostream& out, const char* label, const Matrix& m) {
  out << label << "\n";
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (j > 0) out << ' ';
      out << fmt::format("{}", m(i, j));  // shortest round-trip form
    }
    out << '\n';
  }
}

bool read_matrix(std::istream& in, const std::string& label, Eigen::Index c, Matrix& m) {
  std::string line;
  if (!std::getline(in, line) || line != label) return false;
  m.resize(c, c);
  for (Eigen::Index i = 0; i < c; ++i) {
    if (!std::getline(in, line)) return false;
    std::istringstream row(line);
    for (Eigen::Index j = 0; j < c; ++j)
      if (!(row >> m(i, j))) return false;
  }
  return true;
}

}  // namespace

void save_stats_cache(const std::filesystem::path& path, const CorrStats& stats,
                      const std::string& dataset, const std::string& split_fingerprint) {
  std::ofstream out(path);
  if (!out)
    throw std::runtime_error(fmt::format("save_stats_cache: cannot open '{}'", path.string()));
  out << "corr-cache v1\n";
  out << "dataset " << dataset << "\n";
  out << "split " << split_fingerprint << "\n";
  out << "metric " << metric_name(stats.metric) << "\n";
  out << "rows " << stats.source_rows << "\n";
  out << "channels " << stats.channel_count << "\n";
  out << "warnings " << stats.warnings.size() << "\n";
  for (const auto& w : stats.warnings) out << w << "\n";
  write_matrix(out, "raw", stats.raw);
  write_matrix(out, "similarity", stats.similarity);
  write_matrix(out, "centered", stats.centered);
}

std::optional<CorrStats> load_stats_cache(const std::filesystem::path& path,
                                          const std::string& dataset,
                                          const std::string& split_fingerprint, Metric metric) {
  std::ifstream in(path);
  if (!in) return std::nullopt;

  auto expect = [&in](const std::string& key) -> std::optional<std::string> {
    std::string line;
    if (!std::getline(in, line)) return std::nullopt;
    if (line.rfind(key + " ", 0) != 0) return std::nullopt;
    return line.substr(key.size() + 1);
  };

  std::string header;
  if (!std::getline(in, header) || header != "corr-cache v1") return std::nullopt;
  auto file_dataset = expect("dataset");
  auto file_split = expect("split");
  auto file_metric = expect("metric");
  auto file_rows = expect("rows");
  auto file_channels = expect("channels");
  auto file_warnings = expect("warnings");
  if (!file_dataset || !file_split || !file_metric || !file_rows || !file_channels ||
      !file_warnings)
    return std::nullopt;
  if (*file_dataset != dataset || *file_split != split_fingerprint ||
      *file_metric != metric_name(metric))
    return std::nullopt;

  CorrStats stats;
  stats.metric = metric;
  try {
    stats.source_rows = std::stol(*file_rows);
    stats.channel_count = std::stoi(*file_channels);
    const int warning_count = std::stoi(*file_warnings);
    for (int i = 0; i < warning_count; ++i) {
      std::string line;
      if (!std::getline(in, line)) return std::nullopt;
      stats.warnings.push_back(line);
    }
  } catch (const std::exception&) {
    return std::nullopt;
  }

  const auto c = static_cast<Eigen::Index>(stats.channel_count);
  if (!read_matrix(in, "raw", c, stats.raw)) return std::nullopt;
  if (!read_matrix(in, "similarity", c, stats.similarity)) return std::nullopt;
  if (!read_matrix(in, "centered", c, stats.centered)) return std::nullopt;
  return stats;
}

}  // namespace pcd
