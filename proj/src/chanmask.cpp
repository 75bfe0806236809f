#include "pcd/chanmask.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace pcd {

const char* mask_kind_name(MaskKind kind) {
  switch (kind) {
    case MaskKind::all_ones: return "ones";
    case MaskKind::abs_similarity: return "abs";
    case MaskKind::centered_similarity: return "centered";
    case MaskKind::scalar_identity: return "scalar-identity";
    case MaskKind::scalar: return "scalar";
    case MaskKind::vector: return "vector";
    case MaskKind::asym_vector: return "asym";
    case MaskKind::matrix: return "matrix";
  }
  throw std::logic_error("mask_kind_name: unknown kind");
}

MaskKind mask_kind_from_name(const std::string& name) {
  if (name == "ones") return MaskKind::all_ones;
  if (name == "abs") return MaskKind::abs_similarity;
  if (name == "centered") return MaskKind::centered_similarity;
  if (name == "scalar-identity") return MaskKind::scalar_identity;
  if (name == "scalar") return MaskKind::scalar;
  if (name == "vector") return MaskKind::vector;
  if (name == "asym") return MaskKind::asym_vector;
  if (name == "matrix") return MaskKind::matrix;
  throw std::invalid_argument(fmt::format("unknown mask kind '{}'", name));
}

bool mask_kind_is_learnable(MaskKind kind) {
  switch (kind) {
    case MaskKind::all_ones:
    case MaskKind::abs_similarity:
    case MaskKind::centered_similarity:
      return false;
    default:
      return true;
  }
}

namespace {

void require_tensor(const Tensor& t, MaskKind kind, const char* role, Eigen::Index rows,
                    Eigen::Index cols) {
  if (!t.defined())
    throw std::invalid_argument(fmt::format("mask_graph: kind '{}' needs a {} tensor",
                                            mask_kind_name(kind), role));
  if ((rows > 0 && t.rows() != rows) || (cols > 0 && t.cols() != cols))
    throw std::invalid_argument(
        fmt::format("mask_graph: {} tensor for kind '{}' must be {}x{}, got {}x{}", role,
                    mask_kind_name(kind), rows > 0 ? fmt::format("{}", rows) : std::string("C"),
                    cols > 0 ? fmt::format("{}", cols) : std::string("*"), t.rows(), t.cols()));
}

// row_norm(.) = row-wise softmax after ReLU.
Tensor row_norm(const Tensor& z) { return softmax_rows(relu(z)); }

}  // namespace

Tensor mask_graph(Tape& tape, MaskKind kind, const CorrStats& stats,
                  const MaskParamTensors& params) {
  const Eigen::Index c = stats.similarity.rows();
  if (c < 1) throw std::invalid_argument("mask_graph: stats carry no channels");

  switch (kind) {
    case MaskKind::all_ones:
      return tape.constant(Matrix::Ones(c, c));
    case MaskKind::abs_similarity:
      return tape.constant(stats.similarity);
    case MaskKind::centered_similarity:
      return tape.constant(stats.centered);
    case MaskKind::scalar_identity: {
      require_tensor(params.scale, kind, "scale", 1, 1);
      require_tensor(params.shift, kind, "shift", 1, 1);
      Tensor basis = tape.constant(Matrix::Identity(c, c));
      return sigmoid(scale_shift(basis, params.scale, params.shift));
    }
    case MaskKind::scalar: {
      require_tensor(params.scale, kind, "scale", 1, 1);
      require_tensor(params.shift, kind, "shift", 1, 1);
      Tensor basis = tape.constant(stats.centered);
      return sigmoid(scale_shift(basis, params.scale, params.shift));
    }
    case MaskKind::vector: {
      require_tensor(params.embed_left, kind, "embed", c, 0);
      Tensor gram = matmul(params.embed_left, transpose(params.embed_left));
      return hadamard(row_norm(gram), tape.constant(stats.centered));
    }
    case MaskKind::asym_vector: {
      require_tensor(params.embed_left, kind, "left embed", c, 0);
      require_tensor(params.embed_right, kind, "right embed", c, params.embed_left.cols());
      Tensor gram = matmul(params.embed_left, transpose(params.embed_right));
      return hadamard(row_norm(gram), tape.constant(stats.centered));
    }
    case MaskKind::matrix: {
      require_tensor(params.weights, kind, "weights", c, c);
      return hadamard(params.weights, tape.constant(stats.centered));
    }
  }
  throw std::logic_error("mask_graph: unknown kind");
}

ChannelMask build_mask(const CorrStats& stats, MaskKind kind, const DomainParams* params) {
  Tape tape;
  MaskParamTensors tensors;

  if (mask_kind_is_learnable(kind)) {
    if (params == nullptr)
      throw std::invalid_argument(fmt::format(
          "build_mask: kind '{}' is learnable and needs domain parameters", mask_kind_name(kind)));

    if (kind == MaskKind::scalar || kind == MaskKind::scalar_identity) {
      const auto* scalar = std::get_if<ScalarMaskParams>(params);
      if (scalar == nullptr)
        throw std::invalid_argument(
            fmt::format("build_mask: kind '{}' needs scalar parameters", mask_kind_name(kind)));
      tensors.scale = tape.constant(Matrix::Constant(1, 1, scalar->scale));
      tensors.shift = tape.constant(Matrix::Constant(1, 1, scalar->shift));
    } else if (kind == MaskKind::vector) {
      const auto* vec = std::get_if<VectorMaskParams>(params);
      if (vec == nullptr)
        throw std::invalid_argument("build_mask: kind 'vector' needs vector parameters");
      tensors.embed_left = tape.constant(vec->embed);
    } else if (kind == MaskKind::asym_vector) {
      const auto* asym = std::get_if<AsymVectorMaskParams>(params);
      if (asym == nullptr)
        throw std::invalid_argument("build_mask: kind 'asym' needs asymmetric vector parameters");
      tensors.embed_left = tape.constant(asym->embed_left);
      tensors.embed_right = tape.constant(asym->embed_right);
    } else {
      const auto* mat = std::get_if<MatrixMaskParams>(params);
      if (mat == nullptr)
        throw std::invalid_argument("build_mask: kind 'matrix' needs matrix parameters");
      tensors.weights = tape.constant(mat->weights);
    }
  }

  ChannelMask mask;
  mask.values = mask_graph(tape, kind, stats, tensors).value();
  mask.kind = kind;
  mask.mixing_ratio = cd_ratio(mask.values);
  return mask;
}

void ParamsRegistry::register_params(const std::string& dataset, const std::string& task,
                                     const ScalarMaskParams& params, double centered_ratio) {
  if (dataset.empty())
    throw std::invalid_argument("register_params: dataset name must be non-empty");
  auto it = entries_.find(dataset);
  if (it != entries_.end())
    notices_.push_back(fmt::format("registry: overwriting parameters for dataset '{}'", dataset));
  entries_[dataset] =
      RegistryEntry{dataset, task, params.scale, params.shift, centered_ratio};
}

const RegistryEntry* ParamsRegistry::find(const std::string& dataset) const {
  auto it = entries_.find(dataset);
  return it == entries_.end() ? nullptr : &it->second;
}

std::vector<RegistryEntry> ParamsRegistry::entries() const {
  std::vector<RegistryEntry> out;
  out.reserve(entries_.size());
  for (const auto& [_, entry] : entries_) out.push_back(entry);
  return out;
}

void ParamsRegistry::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out)
    throw std::runtime_error(fmt::format("registry save: cannot open '{}'", path.string()));
  out << "params-registry v1\n";
  out << "entries " << entries_.size() << "\n";
  for (const auto& [_, entry] : entries_) {
    out << "dataset " << entry.dataset << "\n";
    out << "task " << entry.task << "\n";
    out << "scale " << fmt::format("{}", entry.scale) << "\n";
    out << "shift " << fmt::format("{}", entry.shift) << "\n";
    out << "centered_ratio " << fmt::format("{}", entry.centered_ratio) << "\n";
  }
}

ParamsRegistry ParamsRegistry::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in)
    throw std::runtime_error(fmt::format("registry load: cannot open '{}'", path.string()));

  auto next_value = [&in, &path](const std::string& key) {
    std::string line;
    if (!std::getline(in, line) || line.rfind(key + " ", 0) != 0)
      throw std::runtime_error(
          fmt::format("registry load: '{}' is malformed near key '{}'", path.string(), key));
    return line.substr(key.size() + 1);
  };

  std::string header;
  if (!std::getline(in, header) || header != "params-registry v1")
    throw std::runtime_error(
        fmt::format("registry load: '{}' is not a params-registry file", path.string()));

  ParamsRegistry registry;
  const long count = std::stol(next_value("entries"));
  for (long i = 0; i < count; ++i) {
    RegistryEntry entry;
    entry.dataset = next_value("dataset");
    entry.task = next_value("task");
    entry.scale = std::stod(next_value("scale"));
    entry.shift = std::stod(next_value("shift"));
    entry.centered_ratio = std::stod(next_value("centered_ratio"));
    registry.entries_[entry.dataset] = entry;
  }
  return registry;
}

const char* selection_strategy_name(SelectionStrategy strategy) {
  switch (strategy) {
    case SelectionStrategy::average_all: return "avg_all";
    case SelectionStrategy::average_forecast: return "avg_forecast";
    case SelectionStrategy::closest_ratio: return "closest_rbar";
  }
  throw std::logic_error("selection_strategy_name: unknown strategy");
}

SelectionStrategy selection_strategy_from_name(const std::string& name) {
  if (name == "avg_all") return SelectionStrategy::average_all;
  if (name == "avg_forecast") return SelectionStrategy::average_forecast;
  if (name == "closest_rbar") return SelectionStrategy::closest_ratio;
  throw std::invalid_argument(fmt::format("unknown selection strategy '{}'", name));
}

ScalarMaskParams select_unseen_params(const ParamsRegistry& registry,
                                      SelectionStrategy strategy,
                                      double target_centered_ratio) {
  std::vector<RegistryEntry> candidates;
  for (const RegistryEntry& entry : registry.entries()) {
    if (strategy == SelectionStrategy::average_forecast && entry.task != "forecast") continue;
    candidates.push_back(entry);
  }
  if (candidates.empty())
    throw std::invalid_argument(
        fmt::format("select_unseen_params: no registry entries eligible for strategy '{}'",
                    selection_strategy_name(strategy)));

  if (strategy == SelectionStrategy::closest_ratio) {
    // entries() is name-sorted, so strict improvement keeps the
    // lexicographically smallest dataset on ties.
    const RegistryEntry* best = &candidates.front();
    double best_gap = std::abs(best->centered_ratio - target_centered_ratio);
    for (const RegistryEntry& entry : candidates) {
      double gap = std::abs(entry.centered_ratio - target_centered_ratio);
      if (gap < best_gap) {
        best = &entry;
        best_gap = gap;
      }
    }
    return {best->scale, best->shift};
  }

  double scale = 0.0;
  double shift = 0.0;
  for (const RegistryEntry& entry : candidates) {
    scale += entry.scale;
    shift += entry.shift;
  }
  const double n = static_cast<double>(candidates.size());
  return {scale / n, shift / n};
}

}  // namespace pcd
