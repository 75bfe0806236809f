// Channel masks built from channel statistics.
//
// A mask is a C x C matrix applied multiplicatively to channel-wise
// attention logits. The learnable parameterizations share one entry point:
//
//   scalar           sigmoid(scale * centered + shift)         symmetric
//   scalar_identity  sigmoid(scale * I + shift)                symmetric
//   vector           row_norm(E E^T) .* centered               symmetric
//   asym_vector      row_norm(E1 E2^T) .* centered             asymmetric
//   matrix           W .* centered                              asymmetric
//
// with row_norm(.) = row-wise softmax after ReLU. Only the scalar kinds
// squash through a sigmoid; the others are deliberately left unclamped.
// Alongside these sit parameter-free reference masks for ablations:
// all-ones, the absolute similarity itself, and the centered similarity.

#pragma once

#include "pcd/autodiff.hpp"
#include "pcd/chanstats.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

namespace pcd {

enum class MaskKind {
  all_ones,
  abs_similarity,
  centered_similarity,
  scalar_identity,
  scalar,
  vector,
  asym_vector,
  matrix,
};

const char* mask_kind_name(MaskKind kind);
MaskKind mask_kind_from_name(const std::string& name);
bool mask_kind_is_learnable(MaskKind kind);

struct ScalarMaskParams {
  double scale = 1.0;
  double shift = 0.0;
};

struct VectorMaskParams {
  Matrix embed;  // C x dim
};

struct AsymVectorMaskParams {
  Matrix embed_left;   // C x dim
  Matrix embed_right;  // C x dim
};

struct MatrixMaskParams {
  Matrix weights;  // C x C
};

using DomainParams =
    std::variant<ScalarMaskParams, VectorMaskParams, AsymVectorMaskParams, MatrixMaskParams>;

struct ChannelMask {
  Matrix values;
  MaskKind kind = MaskKind::all_ones;
  double mixing_ratio = 0.0;  // cd_ratio(values), cached at construction
};

// Mounted parameter handles for mask_graph. Only the tensors the kind uses
// need to be defined; shapes are validated against the stats.
struct MaskParamTensors {
  Tensor scale;        // 1x1, scalar kinds
  Tensor shift;        // 1x1, scalar kinds
  Tensor embed_left;   // C x dim, vector and asym_vector
  Tensor embed_right;  // C x dim, asym_vector
  Tensor weights;      // C x C, matrix
};

// Differentiable mask construction on the caller's tape. Gradients flow
// into whatever parameter tensors the kind consumes; the statistics enter
// as constants.
Tensor mask_graph(Tape& tape, MaskKind kind, const CorrStats& stats,
                  const MaskParamTensors& params = {});

// Eager evaluation on a scratch tape. Learnable kinds require params of the
// matching alternative; reference kinds ignore them.
ChannelMask build_mask(const CorrStats& stats, MaskKind kind,
                       const DomainParams* params = nullptr);

// One trained (scale, shift) pair per dataset, with the mixing ratio of the
// dataset's centered similarity recorded for nearest-neighbor selection.
struct RegistryEntry {
  std::string dataset;
  std::string task;
  double scale = 1.0;
  double shift = 0.0;
  double centered_ratio = 0.0;
};

class ParamsRegistry {
 public:
  // Re-registering a dataset overwrites the entry and records a notice.
  void register_params(const std::string& dataset, const std::string& task,
                       const ScalarMaskParams& params, double centered_ratio);

  const RegistryEntry* find(const std::string& dataset) const;
  std::vector<RegistryEntry> entries() const;  // sorted by dataset name
  std::size_t size() const { return entries_.size(); }
  const std::vector<std::string>& notices() const { return notices_; }

  // Textual file; doubles round-trip bit-identically across save/load.
  void save(const std::filesystem::path& path) const;
  static ParamsRegistry load(const std::filesystem::path& path);

 private:
  std::map<std::string, RegistryEntry> entries_;
  std::vector<std::string> notices_;
};

enum class SelectionStrategy { average_all, average_forecast, closest_ratio };

const char* selection_strategy_name(SelectionStrategy strategy);
SelectionStrategy selection_strategy_from_name(const std::string& name);

// Picks mask parameters for a dataset the registry has never seen:
// average over everything, average over forecasting entries only, or the
// single entry whose centered ratio is closest to `target_centered_ratio`
// (ties broken toward the lexicographically smallest dataset name).
// Contract: the strategy's candidate set is non-empty.
ScalarMaskParams select_unseen_params(const ParamsRegistry& registry,
                                      SelectionStrategy strategy,
                                      double target_centered_ratio);

}  // namespace pcd
