#include "rareloss/runner.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "rareloss/error.hpp"
#include "rareloss/io.hpp"

namespace rareloss {
namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

const std::set<std::string> kTopLevelKeys = {
    "dataset", "split",         "model", "history_len", "losses", "lambda",  "exp_cap",
    "aow_full_gradient", "lead_times", "ensemble_size", "seeds", "train", "density", "metrics",
    "output_dir"};

[[noreturn]] void config_error(const std::string& what) { throw RunError(kExitConfig, "config: " + what); }

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    config_error(std::string("field '") + key + "' has the wrong type");
  }
}

std::ostream& log_of(const RunOptions& opt) {
  static std::ostringstream sink;
  return opt.log ? *opt.log : sink;
}

std::mutex& log_mutex() {
  static std::mutex m;
  return m;
}

template <class... Args>
void log_line(const RunOptions& opt, const Args&... args) {
  if (!opt.log) return;
  std::lock_guard lock(log_mutex());
  auto& os = log_of(opt);
  (os << ... << args);
  os << '\n';
  os.flush();
}

ordered_json loss_json(const LossEntry& l) {
  ordered_json j;
  j["loss"] = l.name();
  if (l.kind == LossKind::kRe) {
    j["lambda"] = l.lambda;
    j["exp_cap"] = l.exp_cap;
  }
  if (l.kind == LossKind::kAow) j["aow_full_gradient"] = l.aow_full_gradient;
  return j;
}

ordered_json model_json(const ModelConfig& m) {
  ordered_json j;
  j["pre_dense"] = m.pre_dense;
  j["recurrent_units"] = m.recurrent_units;
  j["post_dense"] = m.post_dense;
  j["activation"] = std::string(to_string(m.activation));
  j["input_features"] = m.input_features;
  j["history_len"] = m.history_len;
  return j;
}

ordered_json train_json(const TrainConfig& t) {
  ordered_json j;
  j["lr"] = t.lr;
  j["beta1"] = t.beta1;
  j["beta2"] = t.beta2;
  j["eps_adam"] = t.eps_adam;
  j["batch_size"] = t.batch_size;
  j["max_epochs"] = t.max_epochs;
  j["patience"] = t.patience;
  j["noise_frac"] = t.noise_frac;
  j["noise_on_targets"] = t.noise_on_targets;
  j["validate_with_mse"] = t.validate_with_mse;
  return j;
}

bool needs_density(const LossEntry& l) { return l.kind == LossKind::kOw || l.kind == LossKind::kAow; }

TimeSeriesDataset load_dataset(const RunConfig& cfg, const RunOptions& opt) {
  if (const auto* csv = std::get_if<CsvSource>(&cfg.dataset)) {
    try {
      return load_csv(csv->path, csv->schema);
    } catch (const Error& e) {
      throw RunError(kExitConfig, std::string("dataset: ") + e.what());
    }
  }
  const RunPaths paths{cfg.output_dir};
  if (!fs::exists(paths.data_csv())) cmd_synth(cfg, opt);
  CsvSchema schema;
  schema.time_column = "t";
  schema.target_column = "y";
  return load_csv(paths.data_csv(), schema);
}

RowRange training_rows(const RunConfig& cfg, std::size_t rows) {
  return {0, static_cast<std::size_t>(std::floor(cfg.split.train * static_cast<double>(rows)))};
}

struct Prepared {
  std::shared_ptr<const TimeSeriesDataset> normalized;
  std::string data_checksum;
};

Prepared prepare_normalized(const RunConfig& cfg, const NormalizationStats& stats,
                            const RunOptions& opt) {
  const auto raw = load_dataset(cfg, opt);
  Prepared p;
  p.data_checksum = raw.provenance;
  p.normalized = std::make_shared<const TimeSeriesDataset>(apply_normalization(raw, stats));
  return p;
}

Split make_split(const RunConfig& cfg, const Prepared& prep, std::size_t lead) {
  try {
    return split_contiguous(WindowedSamples(prep.normalized, cfg.history_len, lead), cfg.split);
  } catch (const Error& e) {
    throw RunError(kExitConfig, std::string("windowing: ") + e.what());
  }
}

NormalizationStats read_normalization(const RunPaths& paths, int missing_exit) {
  if (!fs::exists(paths.normalization())) {
    throw RunError(missing_exit, "missing " + paths.normalization().string() + " (run fit-density first)");
  }
  return NormalizationStats::from_text(io::read_file(paths.normalization()));
}

std::string config_checksum(const RunConfig& cfg, const ModelConfig& model, const LossEntry& loss,
                            std::size_t lead, std::uint64_t seed) {
  ordered_json j;
  j["model"] = model_json(model);
  j["loss"] = loss_json(loss);
  j["train"] = train_json(cfg.train);
  j["split"] = {cfg.split.train, cfg.split.val, cfg.split.test};
  j["density_bins"] = cfg.density_bins;
  j["lead_steps"] = lead;
  j["seed"] = seed;
  return io::hex64(io::fnv1a(j.dump()));
}

void write_aggregate_curve(const fs::path& path, const std::string& xname, const std::string& yname,
                           const std::vector<double>& grid,
                           const std::vector<const std::vector<CurvePoint>*>& curves,
                           bool with_members = false) {
  std::string out = xname + "," + yname + "_mean," + yname + "_p10," + yname + "_p90";
  if (with_members) out += ",n_members";
  out += "\n";
  for (std::size_t k = 0; k < grid.size(); ++k) {
    std::vector<double> values;
    for (const auto* c : curves) {
      if (k < c->size() && (*c)[k].defined) values.push_back((*c)[k].value);
    }
    if (values.empty()) continue;
    const auto a = aggregate(values);
    out += io::format_double(grid[k]) + "," + io::format_double(a.mean) + "," +
           io::format_double(a.p10) + "," + io::format_double(a.p90);
    if (with_members) out += "," + std::to_string(values.size());
    out += "\n";
  }
  io::write_file(path, out);
}

}  // namespace

ModelConfig ModelChoice::resolve(std::size_t input_features, std::size_t history_len) const {
  if (name == "kolmogorov") return ModelConfig::kolmogorov(input_features, history_len);
  if (name == "cylinder") return ModelConfig::cylinder(input_features, history_len);
  ModelConfig m{pre_dense, recurrent_units, post_dense, activation, input_features, history_len};
  m.validate();
  return m;
}

std::string RunPaths::member_key(const LossEntry& loss, std::size_t lead, std::uint64_t seed) {
  return loss.name() + "_tau" + std::to_string(lead) + "_seed" + std::to_string(seed);
}

void RunConfig::validate() const {
  if (losses.empty()) config_error("at least one loss is required");
  if (lead_times.empty()) config_error("at least one lead time is required");
  if (ensemble_size == 0) config_error("ensemble_size must be >= 1");
  if (!seeds.empty() && seeds.size() < ensemble_size) {
    config_error("need at least ensemble_size seeds");
  }
  for (std::size_t lead : lead_times) {
    if (lead == 0) config_error("lead times must be >= 1 step");
  }
  if (history_len == 0) config_error("history_len must be >= 1");
  if (density_bins < 5) config_error("density bins must be >= 5");
  try {
    split.validate();
    train.validate();
    if (const auto* s = std::get_if<SynthParams>(&dataset)) s->validate();
    if (model.name == "inline") model.resolve(1, history_len);
    for (const auto& l : losses) {
      if (!(l.lambda >= 0) || !(l.exp_cap > 0)) config_error("lambda must be >= 0 and exp_cap > 0");
    }
  } catch (const Error& e) {
    config_error(e.what());
  }
  auto seeds_used = member_seeds();
  std::sort(seeds_used.begin(), seeds_used.end());
  if (std::adjacent_find(seeds_used.begin(), seeds_used.end()) != seeds_used.end()) {
    config_error("seeds must be distinct");
  }
  if (output_dir.empty()) config_error("output_dir is empty");
}

std::vector<std::uint64_t> RunConfig::member_seeds() const {
  if (seeds.empty()) {
    std::vector<std::uint64_t> s(ensemble_size);
    for (std::size_t i = 0; i < ensemble_size; ++i) s[i] = i + 1;
    return s;
  }
  return {seeds.begin(), seeds.begin() + static_cast<std::ptrdiff_t>(ensemble_size)};
}

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    config_error(std::string("not valid JSON: ") + e.what());
  }
  if (!j.is_object()) config_error("top level must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!kTopLevelKeys.contains(key)) config_error("unknown key '" + key + "'");
  }

  RunConfig cfg;
  if (j.contains("dataset")) {
    const auto& d = j["dataset"];
    if (d.contains("csv")) {
      const auto& c = d["csv"];
      CsvSource src;
      src.path = get_or<std::string>(c, "path", "");
      if (src.path.empty()) config_error("dataset.csv.path is required");
      if (c.contains("time_column") && !c["time_column"].is_null()) {
        src.schema.time_column = get_or<std::string>(c, "time_column", "t");
      }
      src.schema.target_column = get_or<std::string>(c, "target_column", "y");
      src.schema.input_columns = get_or<std::vector<std::string>>(c, "input_columns", {});
      cfg.dataset = src;
    } else if (d.contains("synth")) {
      try {
        cfg.dataset = SynthParams::from_json_text(d["synth"].dump());
      } catch (const Error& e) {
        config_error(e.what());
      }
    } else {
      config_error("dataset must contain 'csv' or 'synth'");
    }
  }
  if (j.contains("split")) {
    const auto& s = j["split"];
    cfg.split = {get_or(s, "train", 0.5), get_or(s, "val", 0.1), get_or(s, "test", 0.4)};
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    if (m.is_string()) {
      cfg.model.name = m.get<std::string>();
      if (cfg.model.name != "kolmogorov" && cfg.model.name != "cylinder") {
        config_error("unknown model '" + cfg.model.name + "'");
      }
    } else if (m.is_object()) {
      cfg.model.name = "inline";
      cfg.model.pre_dense = get_or<std::vector<std::size_t>>(m, "pre_dense", {});
      cfg.model.recurrent_units = get_or<std::size_t>(m, "recurrent_units", 16);
      cfg.model.post_dense = get_or<std::vector<std::size_t>>(m, "post_dense", {});
      try {
        cfg.model.activation = parse_activation(get_or<std::string>(m, "activation", "swish"));
      } catch (const Error& e) {
        config_error(e.what());
      }
    } else {
      config_error("model must be a name or an object");
    }
  }
  cfg.history_len = get_or<std::size_t>(j, "history_len", cfg.history_len);

  const double default_lambda = get_or(j, "lambda", 0.1);
  const double default_cap = get_or(j, "exp_cap", 50.0);
  const bool default_full = get_or(j, "aow_full_gradient", true);
  if (j.contains("losses")) {
    for (const auto& e : j["losses"]) {
      LossEntry l;
      l.lambda = default_lambda;
      l.exp_cap = default_cap;
      l.aow_full_gradient = default_full;
      try {
        if (e.is_string()) {
          l.kind = parse_loss_kind(e.get<std::string>());
        } else if (e.is_object()) {
          l.kind = parse_loss_kind(get_or<std::string>(e, "loss", ""));
          l.lambda = get_or(e, "lambda", default_lambda);
          l.exp_cap = get_or(e, "exp_cap", default_cap);
          l.aow_full_gradient = get_or(e, "aow_full_gradient", default_full);
        } else {
          config_error("loss entries must be names or objects");
        }
      } catch (const Error& err) {
        config_error(err.what());
      }
      cfg.losses.push_back(l);
    }
  }
  cfg.lead_times = get_or<std::vector<std::size_t>>(j, "lead_times", {});
  cfg.ensemble_size = get_or<std::size_t>(j, "ensemble_size", cfg.ensemble_size);
  cfg.seeds = get_or<std::vector<std::uint64_t>>(j, "seeds", {});
  if (j.contains("train")) {
    const auto& t = j["train"];
    auto& tc = cfg.train;
    tc.lr = get_or(t, "lr", tc.lr);
    tc.beta1 = get_or(t, "beta1", tc.beta1);
    tc.beta2 = get_or(t, "beta2", tc.beta2);
    tc.eps_adam = get_or(t, "eps_adam", tc.eps_adam);
    tc.batch_size = get_or(t, "batch_size", tc.batch_size);
    tc.max_epochs = get_or(t, "max_epochs", tc.max_epochs);
    tc.patience = get_or(t, "patience", tc.patience);
    tc.noise_frac = get_or(t, "noise_frac", tc.noise_frac);
    tc.noise_on_targets = get_or(t, "noise_on_targets", tc.noise_on_targets);
    tc.validate_with_mse = get_or(t, "validate_with_mse", tc.validate_with_mse);
  }
  if (j.contains("density")) cfg.density_bins = get_or<std::size_t>(j["density"], "bins", 100);
  if (j.contains("metrics")) {
    const auto& m = j["metrics"];
    cfg.omega_grid = get_or<std::vector<double>>(m, "omega_grid", {});
    if (cfg.omega_grid.empty() && m.contains("omega_points")) {
      cfg.omega_grid = default_omega_grid(get_or<std::size_t>(m, "omega_points", 30));
    }
    cfg.eps_points = get_or<std::size_t>(m, "eps_points", cfg.eps_points);
    cfg.distance.width_squared = get_or(m, "width_squared", true);
    cfg.distance.grid_points = get_or<std::size_t>(m, "grid_points", 200);
    cfg.perfect_predictor = get_or(m, "perfect_predictor", false);
  }
  cfg.distance.bins = cfg.density_bins;
  cfg.output_dir = get_or<std::string>(j, "output_dir", cfg.output_dir.string());
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const fs::path& path) {
  std::string text;
  try {
    text = io::read_file(path);
  } catch (const Error& e) {
    throw RunError(kExitConfig, e.what());
  }
  RunConfig cfg = parse_run_config(text);
  if (auto* csv = std::get_if<CsvSource>(&cfg.dataset); csv && csv->path.is_relative()) {
    csv->path = path.parent_path() / csv->path;
  }
  return cfg;
}

SynthOutcome cmd_synth(const RunConfig& cfg, const RunOptions& opt) {
  const auto* params = std::get_if<SynthParams>(&cfg.dataset);
  if (!params) throw RunError(kExitConfig, "synth needs a 'synth' dataset in the config");
  SynthResult res;
  try {
    res = synth_bursts(*params);
  } catch (const Error& e) {
    throw RunError(kExitConfig, e.what());
  }
  const RunPaths paths{cfg.output_dir};
  const std::string csv = to_csv(res.data);
  io::write_file(paths.data_csv(), csv);

  ordered_json manifest;
  manifest["generator"] = "synth_bursts";
  manifest["params"] = json::parse(params->to_text());
  manifest["rows"] = res.data.rows;
  manifest["crossings"] = res.crossings.size();
  manifest["csv_checksum"] = "fnv1a:" + io::hex64(io::fnv1a(csv));
  io::write_file(paths.data_manifest(), manifest.dump(2) + "\n");
  log_line(opt, "synth: wrote ", res.data.rows, " rows (", res.crossings.size(), " bursts) to ",
           paths.data_csv().string());
  return {paths.data_csv(), res.data.rows};
}

FitDensityOutcome cmd_fit_density(const RunConfig& cfg, const RunOptions& opt) {
  const auto raw = load_dataset(cfg, opt);
  const RunPaths paths{cfg.output_dir};
  const RowRange rows = training_rows(cfg, raw.rows);
  FitDensityOutcome out;
  try {
    out.stats = compute_normalization(raw, rows);
    std::vector<double> targets(rows.size());
    for (std::size_t r = rows.begin; r < rows.end; ++r) {
      targets[r - rows.begin] = out.stats.normalize_target(raw.target[r]);
    }
    out.density = fit_density(targets, cfg.density_bins);
  } catch (const Error& e) {
    throw RunError(kExitDensity, std::string("fit-density: ") + e.what());
  }
  out.max_abs_log_residual = out.density.diagnostics().max_abs_log_residual;
  io::write_file(paths.normalization(), out.stats.to_text());
  io::write_file(paths.density(), out.density.to_text());
  log_line(opt, "fit-density: lengthscale=", io::format_double(out.density.lengthscale()),
           " signal_var=", io::format_double(out.density.signal_var()),
           " max_abs_log_residual=", io::format_double(out.max_abs_log_residual),
           " collocation_points=", out.density.size());
  return out;
}

TrainOutcome cmd_train(const RunConfig& cfg, const RunOptions& opt) {
  const RunPaths paths{cfg.output_dir};
  const auto stats = read_normalization(paths, kExitDensity);
  std::shared_ptr<const GpLogDensity> density;
  std::string density_checksum;
  if (std::any_of(cfg.losses.begin(), cfg.losses.end(), needs_density)) {
    if (!fs::exists(paths.density())) {
      throw RunError(kExitDensity, "missing " + paths.density().string() + " (run fit-density first)");
    }
    const std::string text = io::read_file(paths.density());
    density = std::make_shared<const GpLogDensity>(GpLogDensity::from_text(text));
    density_checksum = io::hex64(io::fnv1a(text));
  }
  const Prepared prep = prepare_normalized(cfg, stats, opt);
  const auto seeds = cfg.member_seeds();

  struct Task {
    LossEntry loss;
    std::size_t lead;
    std::uint64_t seed;
    std::string key;
    std::string checksum;
    const Split* split;
    ModelConfig model;
  };
  std::map<std::size_t, Split> splits;
  for (std::size_t lead : cfg.lead_times) splits.emplace(lead, make_split(cfg, prep, lead));

  TrainOutcome outcome;
  std::vector<Task> tasks;
  for (std::size_t lead : cfg.lead_times) {
    const Split& split = splits.at(lead);
    const ModelConfig model = cfg.model.resolve(split.train.features(), cfg.history_len);
    for (const auto& loss : cfg.losses) {
      for (std::uint64_t seed : seeds) {
        Task t{loss, lead, seed, RunPaths::member_key(loss, lead, seed),
               config_checksum(cfg, model, loss, lead, seed), &split, model};
        const auto model_path = paths.model_dir() / (t.key + ".model.json");
        const auto manifest_path = paths.model_dir() / (t.key + ".manifest.json");
        if (opt.resume && fs::exists(model_path) && fs::exists(manifest_path)) {
          const auto m = json::parse(io::read_file(manifest_path), nullptr, false);
          const std::string model_sum = io::hex64(io::fnv1a(io::read_file(model_path)));
          const bool match = !m.is_discarded() &&
                             m.value("config_checksum", "") == t.checksum &&
                             m.value("data_checksum", "") == prep.data_checksum &&
                             m.value("density_checksum", "") ==
                                 (needs_density(loss) ? density_checksum : std::string()) &&
                             m.value("model_checksum", "") == model_sum;
          if (!match) {
            throw RunError(kExitResumeMismatch,
                           "manifest checksum mismatch for " + t.key + "; refusing to resume");
          }
          ++outcome.skipped;
          log_line(opt, "train: ", t.key, " complete, skipping");
          continue;
        }
        tasks.push_back(std::move(t));
      }
    }
  }

  std::atomic<std::size_t> next{0}, trained{0}, failed{0};
  std::mutex error_mutex;
  std::optional<std::string> fatal;
  auto work = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) {
      const Task& t = tasks[i];
      LossSpec spec;
      spec.kind = t.loss.kind;
      spec.lambda = t.loss.lambda;
      spec.exp_cap = t.loss.exp_cap;
      spec.aow_full_gradient = t.loss.aow_full_gradient;
      if (needs_density(t.loss)) spec.density = density;
      TrainConfig tc = cfg.train;
      tc.seed = t.seed;
      const auto stem = paths.model_dir() / t.key;
      try {
        const auto model = train(t.model, spec, *t.split, tc);
        const std::string model_text = model_to_text(model.cfg, model.params);
        io::write_file(fs::path(stem.string() + ".model.json"), model_text);
        io::write_file(fs::path(stem.string() + ".log.csv"), model.history_csv());
        ordered_json m;
        m["key"] = t.key;
        m["loss"] = loss_json(t.loss);
        m["lead_steps"] = t.lead;
        m["seed"] = t.seed;
        m["model"] = model_json(t.model);
        m["train"] = train_json(cfg.train);
        m["split"] = {cfg.split.train, cfg.split.val, cfg.split.test};
        m["history_len"] = cfg.history_len;
        m["config_checksum"] = t.checksum;
        m["data_checksum"] = prep.data_checksum;
        m["density_checksum"] = needs_density(t.loss) ? density_checksum : std::string();
        m["model_checksum"] = io::hex64(io::fnv1a(model_text));
        m["stopped_epoch"] = model.stopped_epoch;
        m["best_epoch"] = model.best_epoch;
        m["best_val"] = model.history.empty() ? 0.0 : model.history.back().best_val;
        m["clamped_exponents"] = model.clamped_exponents;
        io::write_file(fs::path(stem.string() + ".manifest.json"), m.dump(2) + "\n");
        ++trained;
        log_line(opt, "train: ", t.key, " stopped at epoch ", model.stopped_epoch, " (best ",
                 model.best_epoch, ", val ", io::format_double(model.history.back().best_val), ")");
      } catch (const TrainingDiverged& e) {
        ordered_json f;
        f["key"] = t.key;
        f["error"] = e.what();
        f["epochs_completed"] = e.history().size();
        io::write_file(fs::path(stem.string() + ".failed.json"), f.dump(2) + "\n");
        ++failed;
        log_line(opt, "train: ", t.key, " diverged: ", e.what());
      } catch (const std::exception& e) {
        std::lock_guard lock(error_mutex);
        if (!fatal) fatal = t.key + ": " + e.what();
      }
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(opt.workers, 1, std::max<std::size_t>(tasks.size(), 1));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  if (fatal) throw RunError(kExitConfig, "train: " + *fatal);
  outcome.trained = trained;
  outcome.failed = failed;
  return outcome;
}

EvaluateOutcome cmd_evaluate(const RunConfig& cfg, const RunOptions& opt) {
  const RunPaths paths{cfg.output_dir};
  const auto stats = read_normalization(paths, kExitEvaluationInputs);
  if (!fs::exists(paths.density())) {
    throw RunError(kExitEvaluationInputs, "missing " + paths.density().string());
  }
  const auto density = GpLogDensity::from_text(io::read_file(paths.density()));
  const Prepared prep = prepare_normalized(cfg, stats, opt);
  const auto seeds = cfg.member_seeds();

  std::vector<std::string> missing;
  if (!cfg.perfect_predictor) {
    for (std::size_t lead : cfg.lead_times) {
      for (const auto& loss : cfg.losses) {
        for (std::uint64_t seed : seeds) {
          const auto key = RunPaths::member_key(loss, lead, seed);
          if (!fs::exists(paths.model_dir() / (key + ".model.json"))) missing.push_back(key);
        }
      }
    }
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& k : missing) list += "\n  " + k;
    throw RunError(kExitEvaluationInputs, "missing model files:" + list);
  }

  EvaluateOutcome outcome;
  std::string d_summary = "loss,tau,d_mean,d_p10,d_p90,n_members\n";
  for (std::size_t lead : cfg.lead_times) {
    const Split split = make_split(cfg, prep, lead);
    const auto y_test = split.test.targets();
    const auto omega = cfg.omega_grid.empty() ? default_omega_grid() : cfg.omega_grid;
    const auto eps = default_eps_grid(y_test, density, cfg.eps_points);

    for (const auto& loss : cfg.losses) {
      CellMetrics cell{loss, lead, {}};
      cell.members.resize(seeds.size());
      std::atomic<std::size_t> next{0};
      std::mutex error_mutex;
      std::optional<std::string> fatal;
      auto work = [&] {
        for (std::size_t i = next++; i < seeds.size(); i = next++) {
          const auto key = RunPaths::member_key(loss, lead, seeds[i]);
          try {
            std::vector<double> y_hat;
            if (cfg.perfect_predictor) {
              y_hat = y_test;
            } else {
              ModelConfig mc;
              ParamVector params;
              model_from_text(io::read_file(paths.model_dir() / (key + ".model.json")), mc, params);
              y_hat = predict(mc, params, split.test);
            }
            auto report = full_report(y_test, y_hat, density, eps, omega, cfg.distance);
            io::write_file(paths.metrics_dir() / (key + ".metrics.json"), report.to_text());
            cell.members[i] = {seeds[i], std::move(report)};
          } catch (const std::exception& e) {
            std::lock_guard lock(error_mutex);
            if (!fatal) fatal = key + ": " + e.what();
          }
        }
      };
      const std::size_t workers = std::clamp<std::size_t>(opt.workers, 1, seeds.size());
      if (workers == 1) {
        work();
      } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
      }
      if (fatal) throw RunError(kExitEvaluationInputs, "evaluate: " + *fatal);

      const std::string stem = loss.name() + "_tau" + std::to_string(lead);
      std::vector<const std::vector<CurvePoint>*> alpha, f1, mse;
      std::vector<double> dvals;
      for (const auto& m : cell.members) {
        alpha.push_back(&m.report.alpha);
        f1.push_back(&m.report.f1);
        mse.push_back(&m.report.mse_eps);
        if (m.report.density_distance_defined) dvals.push_back(m.report.density_distance);
      }
      write_aggregate_curve(paths.metrics_dir() / (stem + "_alpha.csv"), "omega", "alpha", omega, alpha);
      write_aggregate_curve(paths.metrics_dir() / (stem + "_f1.csv"), "omega", "f1", omega, f1);
      write_aggregate_curve(paths.metrics_dir() / (stem + "_mse_eps.csv"), "eps", "mse", eps, mse, true);
      const auto agg = aggregate(dvals);
      d_summary += loss.name() + "," + std::to_string(lead) + "," +
                   (dvals.empty() ? std::string("inf,inf,inf")
                                  : io::format_double(agg.mean) + "," + io::format_double(agg.p10) +
                                        "," + io::format_double(agg.p90)) +
                   "," + std::to_string(dvals.size()) + "\n";
      log_line(opt, "evaluate: ", stem, " D mean ", dvals.empty() ? "inf" : io::format_double(agg.mean),
               " over ", dvals.size(), " members");
      outcome.cells.push_back(std::move(cell));
    }
  }
  io::write_file(paths.metrics_dir() / "d_summary.csv", d_summary);
  return outcome;
}

}  // namespace rareloss
