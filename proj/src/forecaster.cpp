#include "pcd/forecaster.hpp"

#include "pcd/rng.hpp"

#include <fmt/format.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace pcd {

const char* attention_mode_name(AttentionMode mode) {
  switch (mode) {
    case AttentionMode::ci: return "ci";
    case AttentionMode::cd: return "cd";
    case AttentionMode::pcd: return "pcd";
  }
  throw std::logic_error("attention_mode_name: unknown mode");
}

AttentionMode attention_mode_from_name(const std::string& name) {
  if (name == "ci") return AttentionMode::ci;
  if (name == "cd") return AttentionMode::cd;
  if (name == "pcd") return AttentionMode::pcd;
  throw std::invalid_argument(
      fmt::format("unknown attention mode '{}', expected ci, cd, or pcd", name));
}

const char* composition_name(WeightComposition composition) {
  switch (composition) {
    case WeightComposition::local_only: return "local";
    case WeightComposition::global_only: return "global";
    case WeightComposition::both: return "both";
  }
  throw std::logic_error("composition_name: unknown composition");
}

WeightComposition composition_from_name(const std::string& name) {
  if (name == "local" || name == "local_only") return WeightComposition::local_only;
  if (name == "global" || name == "global_only") return WeightComposition::global_only;
  if (name == "both") return WeightComposition::both;
  throw std::invalid_argument(
      fmt::format("unknown weight composition '{}', expected local, global, or both", name));
}

void validate_config(const ModelConfig& config) {
  if (config.lookback < 1 || config.horizon < 1 || config.embed_dim < 1 || config.heads < 1 ||
      config.layers < 1)
    throw std::invalid_argument(fmt::format(
        "model config: lookback {}, horizon {}, embed dim {}, heads {}, layers {} must all be >= 1",
        config.lookback, config.horizon, config.embed_dim, config.heads, config.layers));
  if (config.embed_dim % config.heads != 0)
    throw std::invalid_argument(fmt::format("model config: embed dim {} not divisible by {} heads",
                                            config.embed_dim, config.heads));
  if (config.composition == WeightComposition::global_only && config.mode != AttentionMode::pcd)
    throw std::invalid_argument("model config: global composition requires pcd mode");
  if (config.mode == AttentionMode::pcd &&
      (config.mask_kind == MaskKind::vector || config.mask_kind == MaskKind::asym_vector) &&
      config.mask_embed_dim < 1)
    throw std::invalid_argument(fmt::format("model config: mask embed dim {} must be >= 1",
                                            config.mask_embed_dim));
}

WindowStats window_stats(const Matrix& window) {
  if (window.size() == 0) throw std::invalid_argument("window_stats: empty window");
  WindowStats stats;
  stats.mean = window.colwise().mean();
  Matrix centered = window.rowwise() - stats.mean;
  stats.stddev = (centered.array().square().colwise().mean() + 1e-5).sqrt().matrix();
  return stats;
}

Matrix instance_normalize(const Matrix& window, const WindowStats& stats) {
  if (window.cols() != stats.mean.cols())
    throw std::invalid_argument(fmt::format("instance_normalize: {} channels, stats carry {}",
                                            window.cols(), stats.mean.cols()));
  return ((window.rowwise() - stats.mean).array().rowwise() / stats.stddev.array()).matrix();
}

Matrix instance_denormalize(const Matrix& forecast, const WindowStats& stats) {
  if (forecast.cols() != stats.mean.cols())
    throw std::invalid_argument(fmt::format("instance_denormalize: {} channels, stats carry {}",
                                            forecast.cols(), stats.mean.cols()));
  Matrix scaled = (forecast.array().rowwise() * stats.stddev.array()).matrix();
  return scaled.rowwise() + stats.mean;
}

namespace {

Matrix uniform_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double bound) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.uniform(-bound, bound);
  return m;
}

// Stream separation constant for mask parameters; see the class comment.
constexpr std::uint64_t kMaskStreamSalt = 0x8d8f3b6a25c9e041ULL;

}  // namespace

ForecastModel::ForecastModel(ModelConfig config, CorrStats stats, std::uint64_t seed)
    : config_(config), stats_(std::move(stats)), seed_(seed) {
  validate_config(config_);
  const Eigen::Index c = stats_.channel_count;
  if (c < 1 || stats_.similarity.rows() != c || stats_.similarity.cols() != c)
    throw std::invalid_argument("forecast model: channel stats are empty or inconsistent");

  const Eigen::Index lookback = config_.lookback;
  const Eigen::Index d = config_.embed_dim;
  const Eigen::Index hidden = 4 * d;
  const Eigen::Index horizon = config_.horizon;

  Rng weights_rng(seed);
  add("embed.weight", uniform_matrix(weights_rng, lookback, d, 1.0 / std::sqrt(double(lookback))));
  add("embed.bias", Matrix::Zero(1, d));
  const double d_bound = 1.0 / std::sqrt(double(d));
  for (int layer = 0; layer < config_.layers; ++layer) {
    const std::string prefix = fmt::format("layer{}.", layer);
    add(prefix + "attn_norm.gain", Matrix::Ones(1, d));
    add(prefix + "attn_norm.bias", Matrix::Zero(1, d));
    add(prefix + "attn.wq", uniform_matrix(weights_rng, d, d, d_bound));
    add(prefix + "attn.wk", uniform_matrix(weights_rng, d, d, d_bound));
    add(prefix + "attn.wv", uniform_matrix(weights_rng, d, d, d_bound));
    add(prefix + "attn.wo", uniform_matrix(weights_rng, d, d, d_bound));
    add(prefix + "ff_norm.gain", Matrix::Ones(1, d));
    add(prefix + "ff_norm.bias", Matrix::Zero(1, d));
    add(prefix + "ff.w1", uniform_matrix(weights_rng, d, hidden, d_bound));
    add(prefix + "ff.b1", Matrix::Zero(1, hidden));
    add(prefix + "ff.w2", uniform_matrix(weights_rng, hidden, d, 1.0 / std::sqrt(double(hidden))));
    add(prefix + "ff.b2", Matrix::Zero(1, d));
  }
  add("final_norm.gain", Matrix::Ones(1, d));
  add("final_norm.bias", Matrix::Zero(1, d));
  add("proj.weight", uniform_matrix(weights_rng, d, horizon, d_bound));
  add("proj.bias", Matrix::Zero(1, horizon));

  if (config_.mode == AttentionMode::pcd && mask_kind_is_learnable(config_.mask_kind)) {
    Rng mask_rng(seed ^ kMaskStreamSalt);
    const Eigen::Index m = config_.mask_embed_dim;
    switch (config_.mask_kind) {
      case MaskKind::scalar:
      case MaskKind::scalar_identity:
        add("mask.scale", Matrix::Constant(1, 1, 1.0));
        add("mask.shift", Matrix::Zero(1, 1));
        break;
      case MaskKind::vector:
        add("mask.embed", uniform_matrix(mask_rng, c, m, 1.0 / std::sqrt(double(m))));
        break;
      case MaskKind::asym_vector:
        add("mask.embed_left", uniform_matrix(mask_rng, c, m, 1.0 / std::sqrt(double(m))));
        add("mask.embed_right", uniform_matrix(mask_rng, c, m, 1.0 / std::sqrt(double(m))));
        break;
      case MaskKind::matrix:
        add("mask.weights", uniform_matrix(mask_rng, c, c, 1.0 / std::sqrt(double(c))));
        break;
      default:
        throw std::logic_error("forecast model: unexpected learnable mask kind");
    }
  }
}

Param* ForecastModel::add(std::string name, Matrix value) {
  storage_.push_back(std::make_unique<Param>(std::move(name), std::move(value)));
  handles_.push_back(storage_.back().get());
  return handles_.back();
}

Param& ForecastModel::param(std::string_view name) {
  for (Param* p : handles_)
    if (p->name == name) return *p;
  throw std::invalid_argument(fmt::format("forecast model: no parameter named '{}'", name));
}

const Param& ForecastModel::param(std::string_view name) const {
  for (const Param* p : handles_)
    if (p->name == name) return *p;
  throw std::invalid_argument(fmt::format("forecast model: no parameter named '{}'", name));
}

bool ForecastModel::has_param(std::string_view name) const {
  for (const Param* p : handles_)
    if (p->name == name) return true;
  return false;
}

Matrix ForecastModel::predict(const Matrix& window) {
  Tape tape;
  ModelGraph graph(tape, *this);
  return graph.forecast(window).value();
}

Matrix ForecastModel::predict(const Matrix& window, const WindowStats& stats) {
  Tape tape;
  ModelGraph graph(tape, *this);
  return graph.forecast(window, stats).value();
}

ChannelMask ForecastModel::current_mask() const {
  if (config_.mode != AttentionMode::pcd)
    throw std::logic_error(
        fmt::format("current_mask: model runs in {} mode", attention_mode_name(config_.mode)));
  if (!mask_kind_is_learnable(config_.mask_kind))
    return build_mask(stats_, config_.mask_kind);

  DomainParams params;
  switch (config_.mask_kind) {
    case MaskKind::scalar:
    case MaskKind::scalar_identity:
      params = ScalarMaskParams{param("mask.scale").value(0, 0), param("mask.shift").value(0, 0)};
      break;
    case MaskKind::vector:
      params = VectorMaskParams{param("mask.embed").value};
      break;
    case MaskKind::asym_vector:
      params = AsymVectorMaskParams{param("mask.embed_left").value,
                                    param("mask.embed_right").value};
      break;
    case MaskKind::matrix:
      params = MatrixMaskParams{param("mask.weights").value};
      break;
    default:
      throw std::logic_error("current_mask: unexpected learnable mask kind");
  }
  return build_mask(stats_, config_.mask_kind, &params);
}

ScalarMaskParams ForecastModel::scalar_snapshot() const {
  if (!has_param("mask.scale"))
    throw std::logic_error("scalar_snapshot: model has no scalar mask parameters");
  return {param("mask.scale").value(0, 0), param("mask.shift").value(0, 0)};
}

ModelGraph::ModelGraph(Tape& tape, ForecastModel& model) : tape_(&tape), model_(&model) {
  for (Param* p : model.params()) leaves_.emplace(p->name, tape.leaf(*p));

  const ModelConfig& config = model.config();
  const Eigen::Index c = model.channels();
  if (config.mode == AttentionMode::ci) {
    ci_bias_ = Matrix::Constant(c, c, -std::numeric_limits<double>::infinity());
    ci_bias_.diagonal().setZero();
  }
  if (config.mode == AttentionMode::pcd) {
    MaskParamTensors tensors;
    switch (config.mask_kind) {
      case MaskKind::scalar:
      case MaskKind::scalar_identity:
        tensors.scale = leaf("mask.scale");
        tensors.shift = leaf("mask.shift");
        break;
      case MaskKind::vector:
        tensors.embed_left = leaf("mask.embed");
        break;
      case MaskKind::asym_vector:
        tensors.embed_left = leaf("mask.embed_left");
        tensors.embed_right = leaf("mask.embed_right");
        break;
      case MaskKind::matrix:
        tensors.weights = leaf("mask.weights");
        break;
      default:
        break;  // reference kinds need no parameters
    }
    mask_ = mask_graph(tape, config.mask_kind, model.stats(), tensors);
    if (config.composition == WeightComposition::global_only)
      global_weights_ = softmax_rows(mask_);
  }
}

Tensor ModelGraph::leaf(std::string_view name) const {
  auto it = leaves_.find(name);
  if (it == leaves_.end())
    throw std::logic_error(fmt::format("model graph: no mounted parameter '{}'", name));
  return it->second;
}

Tensor ModelGraph::mask() const {
  if (!mask_.defined()) throw std::logic_error("model graph: mask exists only in pcd mode");
  return mask_;
}

Tensor ModelGraph::broadcast_rows(const Tensor& row, Eigen::Index rows) {
  return matmul(tape_->constant(Matrix::Ones(rows, 1)), row);
}

Tensor ModelGraph::embed_channels(const Matrix& normalized_window) {
  const ModelConfig& config = model_->config();
  const Eigen::Index c = model_->channels();
  if (normalized_window.rows() != config.lookback || normalized_window.cols() != c)
    throw std::invalid_argument(fmt::format("embed_channels: window is {}x{}, expected {}x{}",
                                            normalized_window.rows(), normalized_window.cols(),
                                            config.lookback, c));
  Tensor history = tape_->constant(normalized_window.transpose());
  return add(matmul(history, leaf("embed.weight")), broadcast_rows(leaf("embed.bias"), c));
}

std::vector<Tensor> ModelGraph::attention_weights(const Tensor& tokens, int layer) {
  const ModelConfig& config = model_->config();
  if (layer < 0 || layer >= config.layers)
    throw std::invalid_argument(fmt::format("attention: layer {} out of {}", layer, config.layers));

  std::vector<Tensor> weights;
  weights.reserve(config.heads);
  if (config.mode == AttentionMode::pcd &&
      config.composition == WeightComposition::global_only) {
    // Q/K bypassed: the softmaxed mask is the weight matrix for every head.
    for (int head = 0; head < config.heads; ++head) weights.push_back(global_weights_);
    return weights;
  }

  const std::string prefix = fmt::format("layer{}.attn.", layer);
  const Eigen::Index dk = config.embed_dim / config.heads;
  Tensor q = matmul(tokens, leaf(prefix + "wq"));
  Tensor k = matmul(tokens, leaf(prefix + "wk"));
  for (int head = 0; head < config.heads; ++head) {
    Tensor qh = slice_cols(q, head * dk, dk);
    Tensor kh = slice_cols(k, head * dk, dk);
    Tensor logits = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(double(dk)));
    if (config.mode == AttentionMode::ci)
      logits = add(logits, tape_->constant(ci_bias_));
    else if (config.mode == AttentionMode::pcd &&
             config.composition == WeightComposition::both)
      logits = hadamard(mask_, logits);
    // cd and pcd/local_only leave the logits untouched
    weights.push_back(softmax_rows(logits));
  }
  return weights;
}

Tensor ModelGraph::attention(const Tensor& tokens, int layer) {
  const ModelConfig& config = model_->config();
  const std::string prefix = fmt::format("layer{}.attn.", layer);
  const Eigen::Index dk = config.embed_dim / config.heads;

  std::vector<Tensor> weights = attention_weights(tokens, layer);
  Tensor v = matmul(tokens, leaf(prefix + "wv"));
  std::vector<Tensor> heads;
  heads.reserve(weights.size());
  for (int head = 0; head < config.heads; ++head)
    heads.push_back(matmul(weights[head], slice_cols(v, head * dk, dk)));
  Tensor merged = concat_cols(heads);
  return matmul(merged, leaf(prefix + "wo"));
}

Tensor ModelGraph::block(const Tensor& tokens, int layer) {
  const std::string prefix = fmt::format("layer{}.", layer);
  const Eigen::Index c = tokens.rows();

  Tensor attn_in = layer_norm_rows(tokens, leaf(prefix + "attn_norm.gain"),
                                   leaf(prefix + "attn_norm.bias"));
  Tensor x = add(tokens, attention(attn_in, layer));

  Tensor ff_in = layer_norm_rows(x, leaf(prefix + "ff_norm.gain"), leaf(prefix + "ff_norm.bias"));
  Tensor hidden = relu(add(matmul(ff_in, leaf(prefix + "ff.w1")),
                           broadcast_rows(leaf(prefix + "ff.b1"), c)));
  Tensor out = add(matmul(hidden, leaf(prefix + "ff.w2")),
                   broadcast_rows(leaf(prefix + "ff.b2"), c));
  return add(x, out);
}

Tensor ModelGraph::forecast(const Matrix& window) {
  return forecast(window, model_->config().instance_norm ? window_stats(window) : WindowStats{});
}

Tensor ModelGraph::forecast(const Matrix& window, const WindowStats& stats) {
  const ModelConfig& config = model_->config();
  const Eigen::Index c = model_->channels();
  if (window.rows() != config.lookback || window.cols() != c)
    throw std::invalid_argument(fmt::format("forecast: window is {}x{}, expected {}x{}",
                                            window.rows(), window.cols(), config.lookback, c));
  if (!window.allFinite()) throw std::invalid_argument("forecast: window has non-finite values");

  Matrix normalized = window;
  if (config.instance_norm) normalized = instance_normalize(window, stats);

  Tensor tokens = embed_channels(normalized);
  for (int layer = 0; layer < config.layers; ++layer) tokens = block(tokens, layer);
  tokens = layer_norm_rows(tokens, leaf("final_norm.gain"), leaf("final_norm.bias"));

  Tensor projected = add(matmul(tokens, leaf("proj.weight")),
                         broadcast_rows(leaf("proj.bias"), c));
  Tensor forecast = transpose(projected);  // H x C

  if (config.instance_norm) {
    Matrix spread = stats.stddev.replicate(config.horizon, 1);
    Matrix center = stats.mean.replicate(config.horizon, 1);
    forecast = add(hadamard(forecast, tape_->constant(std::move(spread))),
                   tape_->constant(std::move(center)));
  }
  return forecast;
}

namespace {

void append_matrix(std::vector<double>& payload, const Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) payload.push_back(m(i, j));
}

Matrix take_matrix(const std::vector<double>& payload, std::size_t& cursor, Eigen::Index rows,
                   Eigen::Index cols) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = payload.at(cursor++);
  return m;
}

[[noreturn]] void checkpoint_error(const std::filesystem::path& path, const std::string& what) {
  throw std::runtime_error(fmt::format("checkpoint {}: {}", path.string(), what));
}

}  // namespace

void save_checkpoint(const ForecastModel& model, const std::filesystem::path& path) {
  const ModelConfig& config = model.config();
  const CorrStats& stats = model.stats();

  std::string header = "pcd-checkpoint v1\n";
  header += fmt::format("lookback {}\n", config.lookback);
  header += fmt::format("horizon {}\n", config.horizon);
  header += fmt::format("embed-dim {}\n", config.embed_dim);
  header += fmt::format("heads {}\n", config.heads);
  header += fmt::format("layers {}\n", config.layers);
  header += fmt::format("mode {}\n", attention_mode_name(config.mode));
  header += fmt::format("composition {}\n", composition_name(config.composition));
  header += fmt::format("instance-norm {}\n", config.instance_norm ? 1 : 0);
  header += fmt::format("mask-kind {}\n", mask_kind_name(config.mask_kind));
  header += fmt::format("mask-embed-dim {}\n", config.mask_embed_dim);
  header += fmt::format("seed {}\n", model.seed());
  header += fmt::format("metric {}\n", metric_name(stats.metric));
  header += fmt::format("source-rows {}\n", stats.source_rows);
  header += fmt::format("channels {}\n", stats.channel_count);
  for (const std::string& warning : stats.warnings)
    header += fmt::format("warning {}\n", warning);
  for (const Param* p : model.params())
    header += fmt::format("param {} {} {}\n", p->name, p->value.rows(), p->value.cols());

  std::vector<double> payload;
  append_matrix(payload, stats.raw);
  append_matrix(payload, stats.similarity);
  append_matrix(payload, stats.centered);
  for (const Param* p : model.params()) append_matrix(payload, p->value);
  header += fmt::format("payload {}\n", payload.size() * sizeof(double));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) checkpoint_error(path, "cannot open for writing");
  out << header;
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(double)));
  if (!out.good()) checkpoint_error(path, "write failed");
}

ForecastModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) checkpoint_error(path, "cannot open");

  std::string line;
  if (!std::getline(in, line) || line != "pcd-checkpoint v1")
    checkpoint_error(path, "not a checkpoint file");

  ModelConfig config;
  std::uint64_t seed = 0;
  CorrStats stats;
  struct ParamPlan {
    std::string name;
    Eigen::Index rows = 0, cols = 0;
  };
  std::vector<ParamPlan> plan;
  std::size_t payload_bytes = 0;
  bool saw_payload = false;

  while (std::getline(in, line)) {
    std::istringstream fields(line);
    std::string key;
    fields >> key;
    if (key == "lookback") fields >> config.lookback;
    else if (key == "horizon") fields >> config.horizon;
    else if (key == "embed-dim") fields >> config.embed_dim;
    else if (key == "heads") fields >> config.heads;
    else if (key == "layers") fields >> config.layers;
    else if (key == "instance-norm") { int flag = 0; fields >> flag; config.instance_norm = flag != 0; }
    else if (key == "mask-embed-dim") fields >> config.mask_embed_dim;
    else if (key == "seed") fields >> seed;
    else if (key == "source-rows") fields >> stats.source_rows;
    else if (key == "channels") fields >> stats.channel_count;
    else if (key == "mode") { std::string v; fields >> v; config.mode = attention_mode_from_name(v); }
    else if (key == "composition") { std::string v; fields >> v; config.composition = composition_from_name(v); }
    else if (key == "mask-kind") { std::string v; fields >> v; config.mask_kind = mask_kind_from_name(v); }
    else if (key == "metric") { std::string v; fields >> v; stats.metric = metric_from_name(v); }
    else if (key == "warning") {
      stats.warnings.push_back(line.size() > 8 ? line.substr(8) : std::string());
    } else if (key == "param") {
      ParamPlan p;
      fields >> p.name >> p.rows >> p.cols;
      plan.push_back(std::move(p));
    } else if (key == "payload") {
      fields >> payload_bytes;
      saw_payload = true;
      break;
    } else {
      checkpoint_error(path, fmt::format("unknown header field '{}'", key));
    }
    if (fields.fail()) checkpoint_error(path, fmt::format("malformed header line '{}'", line));
  }
  if (!saw_payload) checkpoint_error(path, "missing payload");
  if (payload_bytes % sizeof(double) != 0)
    checkpoint_error(path, "payload is not a whole number of float64 values");

  std::vector<double> payload(payload_bytes / sizeof(double));
  in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload_bytes));
  if (static_cast<std::size_t>(in.gcount()) != payload_bytes)
    checkpoint_error(path, "payload truncated");

  const Eigen::Index c = stats.channel_count;
  if (c < 1) checkpoint_error(path, "channel count missing");
  std::size_t cursor = 0;
  try {
    stats.raw = take_matrix(payload, cursor, c, c);
    stats.similarity = take_matrix(payload, cursor, c, c);
    stats.centered = take_matrix(payload, cursor, c, c);

    ForecastModel model(config, std::move(stats), seed);
    const auto& params = model.params();
    if (params.size() != plan.size())
      checkpoint_error(path, fmt::format("file lists {} parameters, config implies {}",
                                         plan.size(), params.size()));
    for (std::size_t i = 0; i < plan.size(); ++i) {
      Param* p = params[i];
      if (p->name != plan[i].name || p->value.rows() != plan[i].rows ||
          p->value.cols() != plan[i].cols)
        checkpoint_error(path, fmt::format("parameter {} is '{}' {}x{}, config implies '{}' {}x{}",
                                           i, plan[i].name, plan[i].rows, plan[i].cols, p->name,
                                           p->value.rows(), p->value.cols()));
      p->value = take_matrix(payload, cursor, plan[i].rows, plan[i].cols);
    }
    if (cursor != payload.size())
      checkpoint_error(path, fmt::format("payload holds {} values, header implies {}",
                                         payload.size(), cursor));
    return model;
  } catch (const std::out_of_range&) {
    checkpoint_error(path, "payload shorter than the header implies");
  }
}

}  // namespace pcd
