// Channel-token transformer forecaster.
//
// Each channel of an L x C input window becomes one d-dimensional token, so
// attention runs over channels, not time steps. The channel mask modulates
// the pre-softmax attention logits:
//
//   ci   off-diagonal logits replaced by -inf (no cross-channel flow)
//   cd   logits untouched
//   pcd  mask-modulated, per the weight composition below
//
// Compositions in pcd mode: local_only leaves the logits alone (ablation
// control), both multiplies mask and logits elementwise, global_only drops
// Q/K entirely and uses the row-softmaxed mask as the attention weights for
// every head. One mask is shared across all layers and heads.
//
// ci uses additive -inf rather than multiplying logits by the identity:
// zeroed logits would still win softmax weight e^0, which is not channel
// independence. With -inf the off-diagonal weights are exactly 0.0, so a
// channel's forecast is bit-for-bit a function of its own history.

#pragma once

#include "pcd/autodiff.hpp"
#include "pcd/chanmask.hpp"
#include "pcd/chanstats.hpp"
#include "pcd/matrix.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace pcd {

enum class AttentionMode { ci, cd, pcd };

const char* attention_mode_name(AttentionMode mode);
AttentionMode attention_mode_from_name(const std::string& name);

enum class WeightComposition { local_only, global_only, both };

const char* composition_name(WeightComposition composition);
WeightComposition composition_from_name(const std::string& name);

struct ModelConfig {
  int lookback = 96;
  int horizon = 24;
  int embed_dim = 32;
  int heads = 2;
  int layers = 1;
  AttentionMode mode = AttentionMode::pcd;
  WeightComposition composition = WeightComposition::both;
  bool instance_norm = true;
  MaskKind mask_kind = MaskKind::scalar;
  int mask_embed_dim = 8;  // vector and asym_vector kinds only
};

// Contract checks: positive dimensions, embed_dim divisible by heads, and
// global_only composition only in pcd mode.
void validate_config(const ModelConfig& config);

// Per-window, per-channel normalization stats. The variance floor keeps
// constant channels finite: stddev = sqrt(population variance + 1e-5).
struct WindowStats {
  Eigen::RowVectorXd mean;    // 1 x C
  Eigen::RowVectorXd stddev;  // 1 x C
};

WindowStats window_stats(const Matrix& window);
Matrix instance_normalize(const Matrix& window, const WindowStats& stats);
Matrix instance_denormalize(const Matrix& forecast, const WindowStats& stats);

// Owns the trainable parameters. The parameter list (names, shapes, order)
// is a pure function of the config and channel count; values are a pure
// function of those plus the seed. Mask parameters draw from a stream
// decoupled from the transformer weights, so models differing only in mask
// handling share identical transformer initialization at equal seeds.
class ForecastModel {
 public:
  ForecastModel(ModelConfig config, CorrStats stats, std::uint64_t seed);

  ForecastModel(ForecastModel&&) = default;
  ForecastModel& operator=(ForecastModel&&) = default;

  const ModelConfig& config() const { return config_; }
  const CorrStats& stats() const { return stats_; }
  std::uint64_t seed() const { return seed_; }
  int channels() const { return stats_.channel_count; }

  const std::vector<Param*>& params() const { return handles_; }
  Param& param(std::string_view name);
  const Param& param(std::string_view name) const;
  bool has_param(std::string_view name) const;

  // Scratch-tape forward pass; H x C forecast on the original scale.
  Matrix predict(const Matrix& window);

  // Same, but normalizing and denormalizing with the given statistics
  // instead of the window's own. Lets a window whose channel was imputed
  // keep the original channel's output scale. Ignored without instance
  // normalization.
  Matrix predict(const Matrix& window, const WindowStats& stats);

  // Eager mask snapshot from the current parameter values. Contract: pcd.
  ChannelMask current_mask() const;

  // Scalar-kind snapshot (scale, shift) for reports and the registry.
  ScalarMaskParams scalar_snapshot() const;

 private:
  Param* add(std::string name, Matrix value);

  ModelConfig config_;
  CorrStats stats_;
  std::uint64_t seed_ = 0;
  std::vector<std::unique_ptr<Param>> storage_;
  std::vector<Param*> handles_;
};

// One tape-bound view of a model: parameters are mounted once and the mask
// subgraph is built once, after which any number of windows can be forecast
// on the same tape (a training batch, or a whole evaluation pass). The tape
// and model must outlive the graph.
class ModelGraph {
 public:
  ModelGraph(Tape& tape, ForecastModel& model);

  // L x C window -> H x C forecast on the original scale, differentiable
  // back to every parameter the configuration uses. The second form takes
  // the normalization statistics from the caller.
  Tensor forecast(const Matrix& window);
  Tensor forecast(const Matrix& window, const WindowStats& stats);

  // Exposed stages, mainly for verification.
  Tensor embed_channels(const Matrix& normalized_window);  // L x C -> C x d
  Tensor attention(const Tensor& tokens, int layer);       // C x d -> C x d
  std::vector<Tensor> attention_weights(const Tensor& tokens, int layer);

  // The mask node shared by every layer. Contract: pcd mode.
  Tensor mask() const;

 private:
  Tensor leaf(std::string_view name) const;
  Tensor broadcast_rows(const Tensor& row, Eigen::Index rows);
  Tensor block(const Tensor& tokens, int layer);

  Tape* tape_;
  ForecastModel* model_;
  std::map<std::string, Tensor, std::less<>> leaves_;
  Tensor mask_;
  Tensor global_weights_;
  Matrix ci_bias_;
};

// Checkpoint: textual header (config, correlation stats metadata, parameter
// names and shapes) followed by a float64 payload holding the correlation
// matrices and parameter values. Round-trips are value-exact.
void save_checkpoint(const ForecastModel& model, const std::filesystem::path& path);
ForecastModel load_checkpoint(const std::filesystem::path& path);

}  // namespace pcd
