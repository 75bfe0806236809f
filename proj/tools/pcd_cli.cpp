// Command-line front end for the channel-dependence forecasting library.
//
// Subcommands: train, eval, mcp (masked channel prediction), analyze
// (channel statistics and mixing ratios), ablate (mask/composition grid),
// robustness (missing-data sweep), unseen-params (registry selection), and
// gradcheck (finite-difference gradient audit).
//
// Every command writes a report file into --out: a machine block of
// "key value" lines and whitespace-separated tables, then a prose summary.
// Reports carry no timestamps or absolute paths and print doubles with 17
// significant digits, so identical inputs produce byte-identical files.
// A config file (INI/TOML, sections named after subcommands) mirrors every
// long flag; explicit command-line flags win over file values.

#include "pcd/chanmask.hpp"
#include "pcd/chanstats.hpp"
#include "pcd/dataio.hpp"
#include "pcd/forecaster.hpp"
#include "pcd/harness.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

namespace fs = std::filesystem;
using namespace pcd;

namespace {

// --- Deterministic report files.

class Report {
 public:
  explicit Report(std::string_view command) {
    lines_.push_back(fmt::format("report {}", command));
  }

  static std::string num(double value) { return fmt::format("{:.17g}", value); }

  void put(std::string_view key, std::string_view value) {
    lines_.push_back(fmt::format("{} {}", key, value));
  }
  void put(std::string_view key, double value) { put(key, num(value)); }
  template <class T, std::enable_if_t<std::is_integral_v<T>, int> = 0>
  void put(std::string_view key, T value) {
    lines_.push_back(fmt::format("{} {}", key, value));
  }

  void begin_table(std::string_view name, std::string_view columns) {
    lines_.push_back(fmt::format("table {}", name));
    lines_.push_back(fmt::format("columns {}", columns));
  }
  template <class... T>
  void row(const T&... cells) {
    std::string line = "row";
    ((line += ' ', line += cell(cells)), ...);
    lines_.push_back(std::move(line));
  }
  void row_cells(const std::vector<std::string>& cells) {
    std::string line = "row";
    for (const auto& c : cells) {
      line += ' ';
      line += c;
    }
    lines_.push_back(std::move(line));
  }
  void end_table() { lines_.push_back("end"); }

  void note(std::string line) { notes_.push_back(std::move(line)); }

  fs::path write(const fs::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out)
      throw std::runtime_error(fmt::format("cannot write report file '{}'", path.string()));
    for (const auto& line : lines_) out << line << '\n';
    out << "summary\n";
    for (const auto& line : notes_) out << line << '\n';
    out.close();
    if (!out)
      throw std::runtime_error(fmt::format("failed while writing '{}'", path.string()));
    return path;
  }

 private:
  static std::string cell(double value) { return num(value); }
  static std::string cell(std::string_view value) { return std::string(value); }
  template <class T, std::enable_if_t<std::is_integral_v<T>, int> = 0>
  static std::string cell(T value) {
    return fmt::format("{}", value);
  }

  std::vector<std::string> lines_;
  std::vector<std::string> notes_;
};

void put_matrix(Report& report, std::string_view name, const Matrix& m) {
  std::string columns = "channel";
  for (Eigen::Index j = 0; j < m.cols(); ++j) columns += fmt::format(" c{}", j);
  report.begin_table(name, columns);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<std::string> cells;
    cells.push_back(fmt::format("c{}", i));
    for (Eigen::Index j = 0; j < m.cols(); ++j) cells.push_back(Report::num(m(i, j)));
    report.row_cells(cells);
  }
  report.end_table();
}

// --- Shared option bundles. Enum-valued flags stay strings here and are
// converted at use time so the library's name tables are the single
// source of accepted spellings.

struct DataArgs {
  std::string csv;
  std::string synth;
  std::string name_override;
  double data_ratio = 1.0;
  double train_fraction = 0.7;
};

void add_data_flags(CLI::App& cmd, DataArgs& args) {
  cmd.add_option("--data", args.csv, "CSV dataset (optional header row and timestamp column)")
      ->check(CLI::ExistingFile);
  cmd.add_option("--synth-spec", args.synth,
                 "synthetic dataset: inline JSON or a JSON file path (keys: coupling "
                 "{independent,lagged,mixture}, channels, rows, seed, lag, noise, weights, name)");
  cmd.add_option("--dataset-name", args.name_override,
                 "name used in reports, the correlation cache, and the registry");
  cmd.add_option("--data-ratio", args.data_ratio, "keep only this leading fraction of rows")
      ->capture_default_str();
  cmd.add_option("--train-fraction", args.train_fraction,
                 "training fraction; the remainder splits 1:2 into validation and test")
      ->capture_default_str();
}

SynthSpec parse_synth_spec(const std::string& text, std::string* name_out) {
  std::string body = text;
  if (!text.empty() && text.front() != '{') {
    std::ifstream in(text);
    if (!in)
      throw std::invalid_argument(fmt::format(
          "synthetic spec '{}' is neither inline JSON nor a readable file", text));
    body.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }

  nlohmann::json spec;
  try {
    spec = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(fmt::format("synthetic spec: {}", e.what()));
  }

  static const std::array<std::string_view, 8> known = {
      "name", "channels", "rows", "seed", "coupling", "lag", "noise", "weights"};
  for (const auto& item : spec.items())
    if (std::find(known.begin(), known.end(), item.key()) == known.end())
      throw std::invalid_argument(fmt::format("synthetic spec: unknown key '{}'", item.key()));

  SynthSpec result;
  try {
    result.channels = spec.value("channels", result.channels);
    result.rows = spec.value("rows", result.rows);
    result.seed = spec.value("seed", result.seed);
    const std::string coupling = spec.value("coupling", std::string("lagged"));
    if (coupling == "independent") {
      result.coupling = IndependentCoupling{};
    } else if (coupling == "lagged") {
      LaggedCopyCoupling lagged;
      lagged.lag = spec.value("lag", lagged.lag);
      lagged.noise = spec.value("noise", lagged.noise);
      result.coupling = lagged;
    } else if (coupling == "mixture") {
      MixtureCoupling mixture{{0.6, 0.3, 0.1}};
      mixture.weights = spec.value("weights", mixture.weights);
      result.coupling = mixture;
    } else {
      throw std::invalid_argument(fmt::format(
          "synthetic spec: coupling '{}' is not independent, lagged, or mixture", coupling));
    }
    if (name_out != nullptr) *name_out = spec.value("name", std::string());
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(fmt::format("synthetic spec: {}", e.what()));
  }
  return result;
}

RawDataset load_data(const DataArgs& args) {
  if (args.csv.empty() == args.synth.empty())
    throw std::invalid_argument("exactly one of --data or --synth-spec is required");

  RawDataset dataset;
  if (!args.csv.empty()) {
    dataset = load_csv(args.csv);
  } else {
    std::string spec_name;
    dataset = synth_generate(parse_synth_spec(args.synth, &spec_name));
    if (!spec_name.empty()) dataset.name = spec_name;
  }
  if (args.data_ratio != 1.0) dataset = subsample_fraction(dataset, args.data_ratio);
  if (!args.name_override.empty()) dataset.name = args.name_override;
  return dataset;
}

SplitSpec split_spec(double train_fraction) {
  if (!(train_fraction > 0.0) || !(train_fraction < 1.0))
    throw std::invalid_argument(
        fmt::format("--train-fraction {} must lie strictly between 0 and 1", train_fraction));
  SplitSpec spec;
  spec.train = train_fraction;
  spec.val = (1.0 - train_fraction) / 3.0;
  spec.test = 1.0 - train_fraction - spec.val;
  return spec;
}

struct ModelArgs {
  std::string mode = "pcd";
  std::string composition = "both";
  std::string mask_variant = "scalar";
  int lookback = 96;
  int horizon = 24;
  int embed_dim = 32;
  int heads = 2;
  int layers = 1;
  int mask_embed_dim = 8;
  bool no_instance_norm = false;
};

void add_model_flags(CLI::App& cmd, ModelArgs& args, bool with_mode) {
  if (with_mode) {
    cmd.add_option("--mode", args.mode, "attention coupling: ci, cd, or pcd")
        ->capture_default_str();
    cmd.add_option("--composition", args.composition,
                   "where the mask acts: local, global, or both")
        ->capture_default_str();
    cmd.add_option("--mask-variant", args.mask_variant,
                   "mask parameterization: scalar, vector, asym, or matrix")
        ->capture_default_str();
  }
  cmd.add_option("--lookback", args.lookback, "input window length")->capture_default_str();
  cmd.add_option("--horizon", args.horizon, "forecast length")->capture_default_str();
  cmd.add_option("--embed-dim", args.embed_dim, "channel-token embedding width")
      ->capture_default_str();
  cmd.add_option("--heads", args.heads, "attention heads")->capture_default_str();
  cmd.add_option("--layers", args.layers, "encoder blocks")->capture_default_str();
  cmd.add_option("--mask-embed-dim", args.mask_embed_dim,
                 "embedding width for vector and asym mask variants")
      ->capture_default_str();
  cmd.add_flag("--no-instance-norm", args.no_instance_norm,
               "skip per-window normalization of model inputs");
}

ModelConfig to_model_config(const ModelArgs& args) {
  ModelConfig config;
  config.lookback = args.lookback;
  config.horizon = args.horizon;
  config.embed_dim = args.embed_dim;
  config.heads = args.heads;
  config.layers = args.layers;
  config.mode = attention_mode_from_name(args.mode);
  config.composition = composition_from_name(args.composition);
  config.mask_kind = mask_kind_from_name(args.mask_variant);
  config.mask_embed_dim = args.mask_embed_dim;
  config.instance_norm = !args.no_instance_norm;
  validate_config(config);
  return config;
}

struct TrainArgs {
  int epochs = 10;
  int batch = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

void add_train_flags(CLI::App& cmd, TrainArgs& args) {
  cmd.add_option("--epochs", args.epochs, "training epochs")->capture_default_str();
  cmd.add_option("--batch", args.batch, "windows per optimizer step")->capture_default_str();
  cmd.add_option("--lr", args.learning_rate, "Adam learning rate")->capture_default_str();
  cmd.add_option("--seed", args.seed, "seed for parameters and batch order")
      ->capture_default_str();
}

TrainConfig to_train_config(const TrainArgs& args) {
  TrainConfig config;
  config.epochs = args.epochs;
  config.batch_size = args.batch;
  config.learning_rate = args.learning_rate;
  config.seed = args.seed;
  validate_train_config(config);
  return config;
}

fs::path out_dir(const std::string& out) {
  fs::path dir(out);
  fs::create_directories(dir);
  return dir;
}

// --- Report fragments shared between commands.

void put_dataset(Report& report, const RawDataset& dataset, const SplitSpec& split) {
  report.put("dataset", dataset.name);
  report.put("dataset.rows", dataset.values.rows());
  report.put("dataset.channels", dataset.values.cols());
  report.put("split.train", split.train);
  report.put("split.val", split.val);
  report.put("split.test", split.test);
  for (const auto& notice : dataset.notices) report.note(fmt::format("note: {}", notice));
}

void put_model_dims(Report& report, const ModelConfig& config) {
  report.put("config.lookback", config.lookback);
  report.put("config.horizon", config.horizon);
  report.put("config.embed_dim", config.embed_dim);
  report.put("config.heads", config.heads);
  report.put("config.layers", config.layers);
  report.put("config.instance_norm", config.instance_norm ? 1 : 0);
}

void put_model_config(Report& report, const ModelConfig& config) {
  report.put("config.mode", attention_mode_name(config.mode));
  if (config.mode == AttentionMode::pcd) {
    report.put("config.composition", composition_name(config.composition));
    report.put("config.mask_variant", mask_kind_name(config.mask_kind));
    if (config.mask_kind == MaskKind::vector || config.mask_kind == MaskKind::asym_vector)
      report.put("config.mask_embed_dim", config.mask_embed_dim);
  }
  put_model_dims(report, config);
}

void put_eval(Report& report, const EvalReport& eval) {
  if (eval.has_mask) report.put("mask.ratio", eval.mask_ratio);
  if (eval.has_scalar_mask) {
    report.put("mask.scale", eval.mask_scale);
    report.put("mask.shift", eval.mask_shift);
  }
  report.put("test.mse", eval.average.mse);
  report.put("test.mae", eval.average.mae);
  report.begin_table("horizon_metrics", "step mse mae");
  for (std::size_t i = 0; i < eval.per_horizon.size(); ++i)
    report.row(i + 1, eval.per_horizon[i].mse, eval.per_horizon[i].mae);
  report.end_table();
}

std::string describe_model(const ModelConfig& config) {
  if (config.mode != AttentionMode::pcd)
    return std::string(attention_mode_name(config.mode)) + " forecaster";
  return fmt::format("pcd forecaster ({} composition, {} mask)",
                     composition_name(config.composition), mask_kind_name(config.mask_kind));
}

CorrStats stats_with_cache(const Matrix& train_split, Metric metric, const std::string& cache,
                           const std::string& dataset, std::string* cache_note) {
  if (cache.empty()) return channel_stats(train_split, metric);
  const std::string fingerprint = matrix_fingerprint(train_split);
  if (auto hit = load_stats_cache(cache, dataset, fingerprint, metric)) {
    if (cache_note != nullptr) *cache_note = fmt::format("correlation cache hit: {}", cache);
    return *hit;
  }
  CorrStats stats = channel_stats(train_split, metric);
  save_stats_cache(cache, stats, dataset, fingerprint);
  if (cache_note != nullptr) *cache_note = fmt::format("correlation cache written: {}", cache);
  return stats;
}

// --- train

struct TrainCmd {
  DataArgs data;
  ModelArgs model;
  TrainArgs train;
  std::string metric = "pearson";
  std::string out;
  std::string registry;
  std::string task = "forecast";
  std::string corr_cache;
};

void run_train(const TrainCmd& cmd) {
  const RawDataset dataset = load_data(cmd.data);
  const SplitSpec split = split_spec(cmd.data.train_fraction);
  const ModelConfig config = to_model_config(cmd.model);
  const Metric metric = metric_from_name(cmd.metric);
  const TrainConfig train_config = to_train_config(cmd.train);

  if (!cmd.registry.empty() &&
      (config.mode != AttentionMode::pcd || config.mask_kind != MaskKind::scalar))
    throw std::invalid_argument(
        "--registry records scalar-mask pcd runs; drop the flag or use --mode pcd "
        "--mask-variant scalar");

  const PreparedData prepared = prepare_windows(dataset, split, config.lookback, config.horizon);
  std::string cache_note;
  const CorrStats stats =
      stats_with_cache(prepared.train_split, metric, cmd.corr_cache, dataset.name, &cache_note);

  ForecastModel model(config, stats, train_config.seed);
  const TrainHistory history = train(model, prepared.train, prepared.val, train_config);
  const EvalReport eval = evaluate(model, prepared.test);

  const fs::path dir = out_dir(cmd.out);
  save_checkpoint(model, dir / "model.ckpt");

  Report report("train");
  put_dataset(report, dataset, split);
  report.put("metric", metric_name(metric));
  put_model_config(report, config);
  report.put("train.epochs", train_config.epochs);
  report.put("train.batch", train_config.batch_size);
  report.put("train.learning_rate", train_config.learning_rate);
  report.put("train.seed", train_config.seed);
  report.put("windows.train", prepared.train.size());
  report.put("windows.val", prepared.val.size());
  report.put("windows.test", prepared.test.size());
  report.put("stats.abs_ratio", cd_ratio(stats.similarity));
  report.put("stats.centered_ratio", cd_ratio(stats.centered));
  report.put("history.best_epoch", history.best_epoch);
  report.put("history.best_val_loss", history.best_val_loss);
  put_eval(report, eval);
  report.put("checkpoint", "model.ckpt");

  const bool scalar_trajectory = eval.has_scalar_mask;
  report.begin_table("epochs", scalar_trajectory ? "epoch train_loss val_loss mask_scale mask_shift"
                                                 : "epoch train_loss val_loss");
  for (const auto& record : history.epochs) {
    if (scalar_trajectory)
      report.row(record.epoch, record.train_loss, record.val_loss, record.mask_scale,
                 record.mask_shift);
    else
      report.row(record.epoch, record.train_loss, record.val_loss);
  }
  report.end_table();

  if (!cmd.registry.empty()) {
    ParamsRegistry registry =
        fs::exists(cmd.registry) ? ParamsRegistry::load(cmd.registry) : ParamsRegistry();
    const ScalarMaskParams snapshot = model.scalar_snapshot();
    const double centered_ratio = cd_ratio(stats.centered);
    registry.register_params(dataset.name, cmd.task, snapshot, centered_ratio);
    registry.save(cmd.registry);
    report.put("registry.dataset", dataset.name);
    report.put("registry.task", cmd.task);
    report.put("registry.scale", snapshot.scale);
    report.put("registry.shift", snapshot.shift);
    report.put("registry.centered_ratio", centered_ratio);
  }

  report.note(fmt::format("Trained a {} on '{}': {} rows, {} channels, lookback {} -> horizon {}.",
                          describe_model(config), dataset.name, dataset.values.rows(),
                          dataset.values.cols(), config.lookback, config.horizon));
  report.note(fmt::format("Best validation epoch {}/{} with loss {}; test mse {}, mae {}.",
                          history.best_epoch, train_config.epochs,
                          Report::num(history.best_val_loss), Report::num(eval.average.mse),
                          Report::num(eval.average.mae)));
  if (eval.has_mask)
    report.note(fmt::format("Learned mask mixing ratio {}.", Report::num(eval.mask_ratio)));

  const fs::path path = report.write(dir / "train.report");
  if (!cache_note.empty()) fmt::print("{}\n", cache_note);
  if (!cmd.registry.empty()) fmt::print("registered '{}' in {}\n", dataset.name, cmd.registry);
  fmt::print("wrote {}\nwrote {}\ntest mse {} mae {}\n", (dir / "model.ckpt").string(),
             path.string(), Report::num(eval.average.mse), Report::num(eval.average.mae));
}

// --- eval / mcp

struct EvalCmd {
  DataArgs data;
  std::string model_path;
  std::string out;
};

void add_eval_flags(CLI::App& cmd, EvalCmd& args) {
  add_data_flags(cmd, args.data);
  cmd.add_option("--model", args.model_path, "checkpoint written by train")
      ->required()
      ->check(CLI::ExistingFile);
  cmd.add_option("--out", args.out, "output directory for the report")->required();
}

void run_eval(const EvalCmd& cmd) {
  ForecastModel model = load_checkpoint(cmd.model_path);
  const RawDataset dataset = load_data(cmd.data);
  const SplitSpec split = split_spec(cmd.data.train_fraction);
  const PreparedData prepared =
      prepare_windows(dataset, split, model.config().lookback, model.config().horizon);
  const EvalReport eval = evaluate(model, prepared.test);

  Report report("eval");
  put_dataset(report, dataset, split);
  report.put("metric", metric_name(model.stats().metric));
  put_model_config(report, model.config());
  report.put("windows.test", prepared.test.size());
  put_eval(report, eval);
  report.note(fmt::format("Evaluated a {} on '{}': test mse {}, mae {} over {} windows.",
                          describe_model(model.config()), dataset.name,
                          Report::num(eval.average.mse), Report::num(eval.average.mae),
                          prepared.test.size()));

  const fs::path path = report.write(out_dir(cmd.out) / "eval.report");
  fmt::print("wrote {}\ntest mse {} mae {}\n", path.string(), Report::num(eval.average.mse),
             Report::num(eval.average.mae));
}

void run_mcp(const EvalCmd& cmd) {
  ForecastModel model = load_checkpoint(cmd.model_path);
  const RawDataset dataset = load_data(cmd.data);
  const SplitSpec split = split_spec(cmd.data.train_fraction);
  const PreparedData prepared =
      prepare_windows(dataset, split, model.config().lookback, model.config().horizon);
  const MaskedChannelReport masked = masked_channel_prediction(model, prepared.test);

  double mean = 0.0;
  std::size_t worst = 0;
  std::size_t best = 0;
  for (std::size_t c = 0; c < masked.per_channel.size(); ++c) {
    mean += masked.per_channel[c];
    if (masked.per_channel[c] > masked.per_channel[worst]) worst = c;
    if (masked.per_channel[c] < masked.per_channel[best]) best = c;
  }
  mean /= double(masked.per_channel.size());

  Report report("mcp");
  put_dataset(report, dataset, split);
  put_model_config(report, model.config());
  report.put("windows.test", prepared.test.size());
  report.put("mcp.mean", mean);
  report.begin_table("channel_losses", "channel name loss");
  for (std::size_t c = 0; c < masked.per_channel.size(); ++c) {
    const std::string name =
        c < dataset.channel_names.size() ? dataset.channel_names[c] : fmt::format("c{}", c);
    report.row(c, name, masked.per_channel[c]);
  }
  report.end_table();
  report.note(fmt::format(
      "Masked-channel prediction over {} test windows: mean loss {}, hardest channel {} ({}), "
      "easiest channel {} ({}).",
      prepared.test.size(), Report::num(mean), worst, Report::num(masked.per_channel[worst]),
      best, Report::num(masked.per_channel[best])));

  const fs::path path = report.write(out_dir(cmd.out) / "mcp.report");
  fmt::print("wrote {}\nmean masked-channel loss {}\n", path.string(), Report::num(mean));
}

// --- analyze

struct AnalyzeCmd {
  DataArgs data;
  std::string metric = "pearson";
  std::string out;
  std::string corr_cache;
};

void run_analyze(const AnalyzeCmd& cmd) {
  const RawDataset dataset = load_data(cmd.data);
  const SplitSpec split = split_spec(cmd.data.train_fraction);
  const Metric metric = metric_from_name(cmd.metric);

  const DatasetSplits splits = chrono_split(dataset, split);
  const ChannelStandardizer standardizer = fit_standardizer(splits.train);
  const Matrix train_split = apply_standardizer(splits.train, standardizer);
  std::string cache_note;
  const CorrStats stats =
      stats_with_cache(train_split, metric, cmd.corr_cache, dataset.name, &cache_note);

  Report report("analyze");
  put_dataset(report, dataset, split);
  report.put("metric", metric_name(metric));
  report.put("stats.rows", stats.source_rows);
  report.put("stats.abs_ratio", cd_ratio(stats.similarity));
  report.put("stats.centered_ratio", cd_ratio(stats.centered));
  report.put("stats.centered_mean", stats.centered.mean());
  report.begin_table("channels", "channel name");
  for (Eigen::Index c = 0; c < dataset.values.cols(); ++c) {
    const std::string name = std::size_t(c) < dataset.channel_names.size()
                                 ? dataset.channel_names[c]
                                 : fmt::format("c{}", c);
    report.row(c, name);
  }
  report.end_table();
  put_matrix(report, "raw", stats.raw);
  put_matrix(report, "similarity", stats.similarity);
  put_matrix(report, "centered", stats.centered);
  for (const auto& warning : stats.warnings) report.note(fmt::format("warning: {}", warning));
  report.note(fmt::format(
      "Channel statistics ({}) on the standardized training split of '{}' ({} rows, {} "
      "channels): mean off-diagonal similarity {}.",
      metric_name(metric), dataset.name, stats.source_rows, stats.channel_count,
      Report::num(cd_ratio(stats.similarity))));

  const fs::path path = report.write(out_dir(cmd.out) / "analyze.report");
  if (!cache_note.empty()) fmt::print("{}\n", cache_note);
  fmt::print("wrote {}\nmixing ratio {}\n", path.string(),
             Report::num(cd_ratio(stats.similarity)));
}

// --- ablate

struct AblateCmd {
  DataArgs data;
  ModelArgs model;
  TrainArgs train;
  std::string metric = "pearson";
  std::string out;
};

void run_ablate(const AblateCmd& cmd) {
  const RawDataset dataset = load_data(cmd.data);
  const SplitSpec split = split_spec(cmd.data.train_fraction);
  ModelConfig base;
  base.lookback = cmd.model.lookback;
  base.horizon = cmd.model.horizon;
  base.embed_dim = cmd.model.embed_dim;
  base.heads = cmd.model.heads;
  base.layers = cmd.model.layers;
  base.mask_embed_dim = cmd.model.mask_embed_dim;
  base.instance_norm = !cmd.model.no_instance_norm;
  const Metric metric = metric_from_name(cmd.metric);
  const TrainConfig train_config = to_train_config(cmd.train);

  const PreparedData prepared = prepare_windows(dataset, split, base.lookback, base.horizon);
  const AblationTable table = ablation_run(prepared, base, train_config, metric);

  std::size_t winner = 0;
  std::size_t runner_up = 0;
  for (std::size_t i = 1; i < table.cells.size(); ++i)
    if (table.cells[i].mse < table.cells[winner].mse) winner = i;
  for (std::size_t i = 0; i < table.cells.size(); ++i)
    if (i != winner &&
        (runner_up == winner || table.cells[i].mse < table.cells[runner_up].mse))
      runner_up = i;

  Report report("ablate");
  put_dataset(report, dataset, split);
  report.put("metric", metric_name(metric));
  put_model_dims(report, base);
  report.put("train.epochs", train_config.epochs);
  report.put("train.batch", train_config.batch_size);
  report.put("train.learning_rate", train_config.learning_rate);
  report.put("train.seed", train_config.seed);
  report.put("best.mask", mask_kind_name(table.cells[winner].kind));
  report.put("best.composition", composition_name(table.cells[winner].composition));
  report.put("best.mse", table.cells[winner].mse);
  report.begin_table("grid", "mask composition mse mae");
  for (const auto& cell : table.cells)
    report.row(mask_kind_name(cell.kind), composition_name(cell.composition), cell.mse, cell.mae);
  report.end_table();
  report.note(fmt::format(
      "Trained {} mask/composition cells on '{}' at seed {}: best is {} mask with {} "
      "composition (mse {}), runner-up {} with {} (mse {}).",
      table.cells.size(), dataset.name, train_config.seed,
      mask_kind_name(table.cells[winner].kind), composition_name(table.cells[winner].composition),
      Report::num(table.cells[winner].mse), mask_kind_name(table.cells[runner_up].kind),
      composition_name(table.cells[runner_up].composition),
      Report::num(table.cells[runner_up].mse)));

  const fs::path path = report.write(out_dir(cmd.out) / "ablate.report");
  fmt::print("wrote {}\nbest cell: {} mask, {} composition, mse {}\n", path.string(),
             mask_kind_name(table.cells[winner].kind),
             composition_name(table.cells[winner].composition),
             Report::num(table.cells[winner].mse));
}

// --- robustness

struct RobustnessCmd {
  DataArgs data;
  ModelArgs model;
  TrainArgs train;
  std::string metric = "pearson";
  std::string out;
  std::vector<double> ratios = {0.1, 0.25, 0.5, 0.75};
  std::uint64_t corrupt_seed = 0;
};

void run_robustness(const RobustnessCmd& cmd) {
  const RawDataset dataset = load_data(cmd.data);
  const SplitSpec split = split_spec(cmd.data.train_fraction);
  const ModelConfig config = to_model_config(cmd.model);
  const Metric metric = metric_from_name(cmd.metric);
  const TrainConfig train_config = to_train_config(cmd.train);

  const RobustnessTable table = robustness_sweep(dataset, split, config, train_config, cmd.ratios,
                                                 cmd.corrupt_seed, metric);

  Report report("robustness");
  put_dataset(report, dataset, split);
  report.put("metric", metric_name(metric));
  put_model_config(report, config);
  report.put("train.epochs", train_config.epochs);
  report.put("train.batch", train_config.batch_size);
  report.put("train.learning_rate", train_config.learning_rate);
  report.put("train.seed", train_config.seed);
  report.put("corrupt.seed", cmd.corrupt_seed);
  report.begin_table("sweep", "missing_ratio abs_ratio mse mae");
  for (const auto& row : table.rows)
    report.row(row.missing_ratio, row.abs_ratio, row.mse, row.mae);
  report.end_table();

  const RobustnessRow& clean = table.rows.front();
  report.note(fmt::format("Clean baseline on '{}': mixing ratio {}, test mse {}.", dataset.name,
                          Report::num(clean.abs_ratio), Report::num(clean.mse)));
  for (std::size_t i = 1; i < table.rows.size(); ++i) {
    const RobustnessRow& row = table.rows[i];
    report.note(fmt::format(
        "At {}% missing: mixing ratio drifts {} and mse changes {}% against clean.",
        Report::num(row.missing_ratio * 100.0), Report::num(row.abs_ratio - clean.abs_ratio),
        Report::num((row.mse / clean.mse - 1.0) * 100.0)));
  }

  const fs::path path = report.write(out_dir(cmd.out) / "robustness.report");
  fmt::print("wrote {}\n{} rows (clean baseline first)\n", path.string(), table.rows.size());
}

// --- unseen-params

struct UnseenCmd {
  std::string registry;
  std::string strategy = "avg_all";
  double target_ratio = 0.0;
  std::string out;
};

void run_unseen(const UnseenCmd& cmd) {
  const ParamsRegistry registry = ParamsRegistry::load(cmd.registry);
  const SelectionStrategy strategy = selection_strategy_from_name(cmd.strategy);
  const ScalarMaskParams selected =
      select_unseen_params(registry, strategy, cmd.target_ratio);

  Report report("unseen-params");
  report.put("strategy", selection_strategy_name(strategy));
  report.put("target_ratio", cmd.target_ratio);
  report.put("registry.entries", registry.size());
  report.put("selected.scale", selected.scale);
  report.put("selected.shift", selected.shift);
  report.begin_table("registry", "dataset task scale shift centered_ratio");
  for (const auto& entry : registry.entries())
    report.row(entry.dataset, entry.task, entry.scale, entry.shift, entry.centered_ratio);
  report.end_table();
  report.note(fmt::format("Strategy {} over {} registered datasets selects scale {}, shift {}.",
                          selection_strategy_name(strategy), registry.size(),
                          Report::num(selected.scale), Report::num(selected.shift)));

  const fs::path path = report.write(out_dir(cmd.out) / "unseen-params.report");
  fmt::print("wrote {}\nselected scale {} shift {}\n", path.string(),
             Report::num(selected.scale), Report::num(selected.shift));
}

// --- gradcheck

struct GradcheckCmd {
  ModelArgs model;
  std::string metric = "pearson";
  std::string out;
  int channels = 4;
  std::uint64_t seed = 0;
  double step = 1e-5;
  double tolerance = 1e-4;
  double mask_tolerance = 1e-6;
};

void run_gradcheck(const GradcheckCmd& cmd) {
  const ModelConfig config = to_model_config(cmd.model);
  const Metric metric = metric_from_name(cmd.metric);

  SynthSpec spec;
  spec.channels = cmd.channels;
  spec.rows = config.lookback + config.horizon + 128;
  spec.coupling = LaggedCopyCoupling{2, 0.05};
  spec.seed = cmd.seed;
  const RawDataset dataset = synth_generate(spec);
  const ChannelStandardizer standardizer = fit_standardizer(dataset.values);
  const CorrStats stats =
      channel_stats(apply_standardizer(dataset.values, standardizer), metric);

  const Matrix window = dataset.values.topRows(config.lookback);
  const Matrix target = dataset.values.middleRows(config.lookback, config.horizon);

  ForecastModel model(config, stats, cmd.seed);
  long elements = 0;
  for (const Param* param : model.params()) elements += param->value.size();
  const GradCheckReport full = grad_check(
      [&](Tape& tape) {
        ModelGraph graph(tape, model);
        return mse_loss(graph.forecast(window), tape.constant(target));
      },
      std::span<Param* const>(model.params()), cmd.step);

  // The mask pipeline is audited on its own: sigmoid of scaled centered
  // similarity, compared against a zero target so every entry contributes.
  ModelConfig mask_config = config;
  mask_config.mode = AttentionMode::pcd;
  mask_config.composition = WeightComposition::both;
  mask_config.mask_kind = MaskKind::scalar;
  ForecastModel mask_model(mask_config, stats, cmd.seed);
  const std::array<Param*, 2> mask_params = {&mask_model.param("mask.scale"),
                                             &mask_model.param("mask.shift")};
  const Matrix zeros = Matrix::Zero(cmd.channels, cmd.channels);
  const GradCheckReport mask = grad_check(
      [&](Tape& tape) {
        ModelGraph graph(tape, mask_model);
        return mse_loss(graph.mask(), tape.constant(zeros));
      },
      std::span<Param* const>(mask_params), cmd.step);

  const bool pass = full.max_rel_error < cmd.tolerance && mask.max_rel_error < cmd.mask_tolerance;

  Report report("gradcheck");
  report.put("channels", cmd.channels);
  report.put("metric", metric_name(metric));
  put_model_config(report, config);
  report.put("seed", cmd.seed);
  report.put("step", cmd.step);
  report.put("full.param_elements", elements);
  report.put("full.max_rel_error", full.max_rel_error);
  report.put("full.worst_param", full.worst_param);
  report.put("full.tolerance", cmd.tolerance);
  report.put("mask.max_rel_error", mask.max_rel_error);
  report.put("mask.worst_param", mask.worst_param);
  report.put("mask.tolerance", cmd.mask_tolerance);
  report.put("status", pass ? "pass" : "fail");
  report.note(fmt::format(
      "Full forecaster: max relative gradient error {} over {} parameter elements "
      "(worst {}, tolerance {}).",
      Report::num(full.max_rel_error), elements, full.worst_param, Report::num(cmd.tolerance)));
  report.note(fmt::format("Mask pipeline: max relative gradient error {} (worst {}, tolerance {}).",
                          Report::num(mask.max_rel_error), mask.worst_param,
                          Report::num(cmd.mask_tolerance)));
  report.note(pass ? "PASS" : "FAIL");

  const fs::path path = report.write(out_dir(cmd.out) / "gradcheck.report");
  fmt::print("wrote {}\nfull {} mask {}\n", path.string(), Report::num(full.max_rel_error),
             Report::num(mask.max_rel_error));
  if (!pass)
    throw std::runtime_error(fmt::format(
        "gradient check failed: full {} (tolerance {}), mask {} (tolerance {})",
        Report::num(full.max_rel_error), Report::num(cmd.tolerance),
        Report::num(mask.max_rel_error), Report::num(cmd.mask_tolerance)));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"partial channel dependence forecasting toolkit"};
  app.require_subcommand(1);
  app.set_config("--config", "",
                 "INI/TOML file whose sections name subcommands and whose keys mirror the long "
                 "flags; explicit flags win");

  TrainCmd train_cmd;
  auto* train_sub = app.add_subcommand("train", "fit a forecaster, write checkpoint and report");
  add_data_flags(*train_sub, train_cmd.data);
  add_model_flags(*train_sub, train_cmd.model, true);
  add_train_flags(*train_sub, train_cmd.train);
  train_sub->add_option("--metric", train_cmd.metric,
                        "channel similarity metric: pearson, cosine, euclid, or dtw")
      ->capture_default_str();
  train_sub->add_option("--out", train_cmd.out, "output directory")->required();
  train_sub->add_option("--registry", train_cmd.registry,
                        "parameter registry file to update with the trained scalar mask");
  train_sub->add_option("--task", train_cmd.task, "task tag stored in the registry")
      ->capture_default_str();
  train_sub->add_option("--corr-cache", train_cmd.corr_cache,
                        "sidecar file caching channel statistics per dataset and split");
  train_sub->callback([&train_cmd] { run_train(train_cmd); });

  EvalCmd eval_cmd;
  auto* eval_sub = app.add_subcommand("eval", "evaluate a checkpoint on a dataset's test split");
  add_eval_flags(*eval_sub, eval_cmd);
  eval_sub->callback([&eval_cmd] { run_eval(eval_cmd); });

  EvalCmd mcp_cmd;
  auto* mcp_sub = app.add_subcommand(
      "mcp", "masked channel prediction: per-channel loss with that channel's history erased");
  add_eval_flags(*mcp_sub, mcp_cmd);
  mcp_sub->callback([&mcp_cmd] { run_mcp(mcp_cmd); });

  AnalyzeCmd analyze_cmd;
  auto* analyze_sub =
      app.add_subcommand("analyze", "channel statistics and mixing ratios for a dataset");
  add_data_flags(*analyze_sub, analyze_cmd.data);
  analyze_sub->add_option("--metric", analyze_cmd.metric,
                          "channel similarity metric: pearson, cosine, euclid, or dtw")
      ->capture_default_str();
  analyze_sub->add_option("--out", analyze_cmd.out, "output directory")->required();
  analyze_sub->add_option("--corr-cache", analyze_cmd.corr_cache,
                          "sidecar file caching channel statistics per dataset and split");
  analyze_sub->callback([&analyze_cmd] { run_analyze(analyze_cmd); });

  AblateCmd ablate_cmd;
  auto* ablate_sub =
      app.add_subcommand("ablate", "train the mask-variant x composition grid and compare");
  add_data_flags(*ablate_sub, ablate_cmd.data);
  add_model_flags(*ablate_sub, ablate_cmd.model, false);
  add_train_flags(*ablate_sub, ablate_cmd.train);
  ablate_sub->add_option("--metric", ablate_cmd.metric,
                         "channel similarity metric: pearson, cosine, euclid, or dtw")
      ->capture_default_str();
  ablate_sub->add_option("--out", ablate_cmd.out, "output directory")->required();
  ablate_sub->callback([&ablate_cmd] { run_ablate(ablate_cmd); });

  RobustnessCmd robustness_cmd;
  auto* robustness_sub = app.add_subcommand(
      "robustness", "missing-data sweep: corrupt, interpolate, retrain, compare");
  add_data_flags(*robustness_sub, robustness_cmd.data);
  add_model_flags(*robustness_sub, robustness_cmd.model, true);
  add_train_flags(*robustness_sub, robustness_cmd.train);
  robustness_sub->add_option("--metric", robustness_cmd.metric,
                             "channel similarity metric: pearson, cosine, euclid, or dtw")
      ->capture_default_str();
  robustness_sub->add_option("--ratios", robustness_cmd.ratios, "missing-value ratios to sweep")
      ->delimiter(',')
      ->capture_default_str();
  robustness_sub->add_option("--corrupt-seed", robustness_cmd.corrupt_seed,
                             "seed for gap placement")
      ->capture_default_str();
  robustness_sub->add_option("--out", robustness_cmd.out, "output directory")->required();
  robustness_sub->callback([&robustness_cmd] { run_robustness(robustness_cmd); });

  UnseenCmd unseen_cmd;
  auto* unseen_sub = app.add_subcommand(
      "unseen-params", "pick mask parameters for an unregistered dataset from the registry");
  unseen_sub->add_option("--registry", unseen_cmd.registry, "parameter registry file")
      ->required()
      ->check(CLI::ExistingFile);
  unseen_sub->add_option("--strategy", unseen_cmd.strategy,
                         "selection strategy: avg_all, avg_forecast, or closest_rbar")
      ->capture_default_str();
  unseen_sub->add_option("--target-ratio", unseen_cmd.target_ratio,
                         "centered mixing ratio of the new dataset (closest_rbar)")
      ->capture_default_str();
  unseen_sub->add_option("--out", unseen_cmd.out, "output directory")->required();
  unseen_sub->callback([&unseen_cmd] { run_unseen(unseen_cmd); });

  GradcheckCmd gradcheck_cmd;
  gradcheck_cmd.model.lookback = 16;
  gradcheck_cmd.model.horizon = 8;
  gradcheck_cmd.model.embed_dim = 8;
  auto* gradcheck_sub = app.add_subcommand(
      "gradcheck", "compare analytic gradients against central finite differences");
  add_model_flags(*gradcheck_sub, gradcheck_cmd.model, true);
  gradcheck_sub->add_option("--channels", gradcheck_cmd.channels, "synthetic dataset channels")
      ->capture_default_str();
  gradcheck_sub->add_option("--metric", gradcheck_cmd.metric,
                            "channel similarity metric: pearson, cosine, euclid, or dtw")
      ->capture_default_str();
  gradcheck_sub->add_option("--seed", gradcheck_cmd.seed, "seed for data and parameters")
      ->capture_default_str();
  gradcheck_sub->add_option("--step", gradcheck_cmd.step, "finite-difference step")
      ->capture_default_str();
  gradcheck_sub->add_option("--tolerance", gradcheck_cmd.tolerance,
                            "max relative error allowed for the full forecaster")
      ->capture_default_str();
  gradcheck_sub->add_option("--mask-tolerance", gradcheck_cmd.mask_tolerance,
                            "max relative error allowed for the mask pipeline")
      ->capture_default_str();
  gradcheck_sub->add_option("--out", gradcheck_cmd.out, "output directory")->required();
  gradcheck_sub->callback([&gradcheck_cmd] { run_gradcheck(gradcheck_cmd); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
  return 0;
}
