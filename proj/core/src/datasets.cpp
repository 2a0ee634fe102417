#include "rareloss/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "rareloss/error.hpp"
#include "rareloss/io.hpp"

namespace rareloss {
namespace {

std::vector<std::string_view> split_line(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      cells.push_back(line.substr(start));
      break;
    }
    cells.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  for (auto& c : cells) {
    while (!c.empty() && (c.front() == ' ' || c.front() == '"')) c.remove_prefix(1);
    while (!c.empty() && (c.back() == ' ' || c.back() == '"' || c.back() == '\r')) c.remove_suffix(1);
  }
  return cells;
}

}  // namespace

void TimeSeriesDataset::validate() const {
  if (rows < 2) throw Error(ErrorCode::kInvalidInput, "dataset needs at least two rows");
  if (inputs.size() != rows * features || target.size() != rows) {
    throw Error(ErrorCode::kShapeMismatch, "dataset arrays do not match its row count");
  }
  if (channel_names.size() != features) {
    throw Error(ErrorCode::kShapeMismatch, "channel names do not match feature count");
  }
  if (!(dt > 0)) throw Error(ErrorCode::kInvalidInput, "dt must be positive");
  for (double v : inputs) {
    if (!std::isfinite(v)) throw Error(ErrorCode::kInvalidInput, "non-finite input value");
  }
  for (double v : target) {
    if (!std::isfinite(v)) throw Error(ErrorCode::kInvalidInput, "non-finite target value");
  }
}

TimeSeriesDataset parse_csv(const std::string& text, const CsvSchema& schema,
                            const std::string& provenance) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::kParse, "empty CSV");
  const auto header_views = split_line(line);
  std::vector<std::string> header(header_views.begin(), header_views.end());

  auto find_column = [&](const std::string& name) -> std::size_t {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw Error(ErrorCode::kMissingColumn, "column '" + name + "' not in header");
    return static_cast<std::size_t>(it - header.begin());
  };

  std::optional<std::size_t> time_col;
  if (schema.time_column) time_col = find_column(*schema.time_column);
  const std::size_t target_col = find_column(schema.target_column);
  std::vector<std::size_t> input_cols;
  std::vector<std::string> names;
  if (schema.input_columns.empty()) {
    for (std::size_t c = 0; c < header.size(); ++c) {
      if (c == target_col || (time_col && c == *time_col)) continue;
      input_cols.push_back(c);
      names.push_back(header[c]);
    }
  } else {
    for (const auto& name : schema.input_columns) {
      input_cols.push_back(find_column(name));
      names.push_back(name);
    }
  }
  if (input_cols.empty()) throw Error(ErrorCode::kMissingColumn, "no input columns");

  TimeSeriesDataset ds;
  ds.channel_names = names;
  ds.features = input_cols.size();
  ds.target_name = schema.target_column;
  ds.provenance = provenance;
  std::vector<double> times;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_line(line);
    if (cells.size() != header.size()) {
      throw Error(ErrorCode::kParse, "row " + std::to_string(line_no) + " has " +
                                         std::to_string(cells.size()) + " cells, header has " +
                                         std::to_string(header.size()));
    }
    auto cell = [&](std::size_t c) {
      try {
        return io::parse_double(cells[c]);
      } catch (const Error&) {
        throw Error(ErrorCode::kParse, "non-numeric cell at row " + std::to_string(line_no) +
                                           ", column '" + header[c] + "'");
      }
    };
    if (time_col) times.push_back(cell(*time_col));
    for (std::size_t c : input_cols) ds.inputs.push_back(cell(c));
    ds.target.push_back(cell(target_col));
  }
  ds.rows = ds.target.size();
  if (ds.rows < 2) throw Error(ErrorCode::kInvalidInput, "dataset needs at least two rows");

  if (time_col) {
    ds.t0 = times.front();
    ds.dt = times[1] - times[0];
    if (!(ds.dt > 0)) throw Error(ErrorCode::kNonUniformGrid, "time column is not increasing");
    for (std::size_t k = 1; k < times.size(); ++k) {
      const double step = times[k] - times[k - 1];
      if (std::abs(step - ds.dt) > 1e-6 * ds.dt) {
        throw Error(ErrorCode::kNonUniformGrid, "time step between rows " + std::to_string(k) +
                                                    " and " + std::to_string(k + 1) + " is " +
                                                    io::format_double(step) + ", expected " +
                                                    io::format_double(ds.dt));
      }
    }
  }
  ds.validate();
  return ds;
}

TimeSeriesDataset load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  const std::string text = io::read_file(path);
  return parse_csv(text, schema, "fnv1a:" + io::hex64(io::fnv1a(text)));
}

std::string to_csv(const TimeSeriesDataset& ds) {
  std::string out = "t";
  for (const auto& n : ds.channel_names) out += "," + n;
  out += "," + ds.target_name + "\n";
  for (std::size_t r = 0; r < ds.rows; ++r) {
    out += io::format_double(ds.t0 + static_cast<double>(r) * ds.dt);
    for (std::size_t c = 0; c < ds.features; ++c) {
      out += ',';
      out += io::format_double(ds.input(r, c));
    }
    out += ',';
    out += io::format_double(ds.target[r]);
    out += '\n';
  }
  return out;
}

std::string NormalizationStats::to_text() const {
  nlohmann::ordered_json j;
  j["format"] = "rareloss.normalization";
  j["target_mean"] = target_mean;
  j["target_std"] = target_std;
  j["input_mean"] = input_mean;
  j["input_std"] = input_std;
  j["source_rows"] = {source.begin, source.end};
  return j.dump(2) + "\n";
}

NormalizationStats NormalizationStats::from_text(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    NormalizationStats s;
    s.target_mean = j.at("target_mean").get<double>();
    s.target_std = j.at("target_std").get<double>();
    s.input_mean = j.at("input_mean").get<std::vector<double>>();
    s.input_std = j.at("input_std").get<std::vector<double>>();
    s.source = {j.at("source_rows").at(0).get<std::size_t>(),
                j.at("source_rows").at(1).get<std::size_t>()};
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("normalization file: ") + e.what());
  }
}

NormalizationStats compute_normalization(const TimeSeriesDataset& ds, RowRange segment) {
  if (segment.begin >= segment.end || segment.end > ds.rows) {
    throw Error(ErrorCode::kInvalidInput, "normalization segment is empty or out of range");
  }
  const double n = static_cast<double>(segment.size());
  auto stats = [&](auto&& get, const std::string& name) {
    double mean = 0.0;
    for (std::size_t r = segment.begin; r < segment.end; ++r) mean += get(r);
    mean /= n;
    double var = 0.0;
    for (std::size_t r = segment.begin; r < segment.end; ++r) {
      const double d = get(r) - mean;
      var += d * d;
    }
    var /= n;
    if (!(var > 0)) throw Error(ErrorCode::kDegenerateChannel, "channel '" + name + "' is constant");
    return std::pair{mean, std::sqrt(var)};
  };
  NormalizationStats s;
  s.source = segment;
  std::tie(s.target_mean, s.target_std) = stats([&](std::size_t r) { return ds.target[r]; }, ds.target_name);
  for (std::size_t c = 0; c < ds.features; ++c) {
    auto [m, sd] = stats([&](std::size_t r) { return ds.input(r, c); }, ds.channel_names[c]);
    s.input_mean.push_back(m);
    s.input_std.push_back(sd);
  }
  return s;
}

TimeSeriesDataset apply_normalization(const TimeSeriesDataset& ds, const NormalizationStats& s) {
  if (s.input_mean.size() != ds.features) {
    throw Error(ErrorCode::kShapeMismatch, "normalization stats do not match dataset channels");
  }
  TimeSeriesDataset out = ds;
  for (std::size_t r = 0; r < ds.rows; ++r) {
    out.target[r] = s.normalize_target(ds.target[r]);
    for (std::size_t c = 0; c < ds.features; ++c) {
      out.inputs[r * ds.features + c] = (ds.input(r, c) - s.input_mean[c]) / s.input_std[c];
    }
  }
  return out;
}

TimeSeriesDataset invert_normalization(const TimeSeriesDataset& ds, const NormalizationStats& s) {
  TimeSeriesDataset out = ds;
  for (std::size_t r = 0; r < ds.rows; ++r) {
    out.target[r] = s.denormalize_target(ds.target[r]);
    for (std::size_t c = 0; c < ds.features; ++c) {
      out.inputs[r * ds.features + c] = ds.input(r, c) * s.input_std[c] + s.input_mean[c];
    }
  }
  return out;
}

NormalizedDataset normalize(const TimeSeriesDataset& ds, RowRange segment) {
  auto stats = compute_normalization(ds, segment);
  return {apply_normalization(ds, stats), std::move(stats)};
}

WindowedSamples::WindowedSamples(std::shared_ptr<const TimeSeriesDataset> source,
                                 std::size_t history, std::size_t lead_steps)
    : source_(std::move(source)), history_(history), lead_(lead_steps) {
  if (history_ == 0 || lead_ == 0) {
    throw Error(ErrorCode::kInvalidInput, "history and lead time must be positive");
  }
  if (source_->rows < history_ + lead_) {
    throw Error(ErrorCode::kSeriesTooShort,
                "series of " + std::to_string(source_->rows) + " rows is shorter than history " +
                    std::to_string(history_) + " + lead " + std::to_string(lead_));
  }
  count_ = source_->rows - history_ - lead_ + 1;
}

std::span<const double> WindowedSamples::window(std::size_t i) const {
  const std::size_t f = source_->features;
  return {source_->inputs.data() + (first_ + i) * f, history_ * f};
}

double WindowedSamples::target(std::size_t i) const { return source_->target[target_row(i)]; }

std::vector<double> WindowedSamples::targets() const {
  std::vector<double> out(count_);
  for (std::size_t i = 0; i < count_; ++i) out[i] = target(i);
  return out;
}

WindowedSamples WindowedSamples::slice(std::size_t begin, std::size_t count) const {
  if (begin + count > count_) throw Error(ErrorCode::kInvalidInput, "slice out of range");
  WindowedSamples s = *this;
  s.first_ = first_ + begin;
  s.count_ = count;
  return s;
}

WindowedSamples make_windows(const TimeSeriesDataset& ds, std::size_t history, std::size_t lead_steps) {
  return WindowedSamples(std::make_shared<const TimeSeriesDataset>(ds), history, lead_steps);
}

void SynthParams::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::kInvalidSpec, what); };
  if (m < 2) fail("m must be >= 2");
  if (!(dt > 0)) fail("dt must be > 0");
  if (!(ou_theta > 0)) fail("ou_theta must be > 0");
  if (!(ou_sigma > 0)) fail("ou_sigma must be > 0");
  if (!(burst_amp >= 0)) fail("burst_amp must be >= 0");
  if (!(burst_width > 0)) fail("burst_width must be > 0");
  if (precursor_lead_steps == 0) fail("precursor_lead_steps must be >= 1");
  if (!(noise_std > 0)) fail("noise_std must be > 0");
  if (!(obs_noise_std >= 0)) fail("obs_noise_std must be >= 0");
  if (!std::isfinite(trigger_level)) fail("trigger_level must be finite");
}

std::string SynthParams::to_text() const {
  nlohmann::ordered_json j;
  j["m"] = m;
  j["dt"] = dt;
  j["ou_theta"] = ou_theta;
  j["ou_sigma"] = ou_sigma;
  j["trigger_level"] = trigger_level;
  j["burst_amp"] = burst_amp;
  j["burst_width"] = burst_width;
  j["precursor_lead_steps"] = precursor_lead_steps;
  j["noise_std"] = noise_std;
  j["obs_noise_std"] = obs_noise_std;
  j["seed"] = seed;
  return j.dump(2) + "\n";
}

SynthParams SynthParams::from_json_text(const std::string& text) {
  SynthParams p;
  try {
    const auto j = nlohmann::json::parse(text);
    static const std::set<std::string> known = {
        "m",         "dt",        "ou_theta",      "ou_sigma", "trigger_level", "burst_amp",
        "burst_width", "precursor_lead_steps", "noise_std", "obs_noise_std", "seed"};
    for (const auto& [key, value] : j.items()) {
      if (!known.count(key)) throw Error(ErrorCode::kInvalidSpec, "unknown synth parameter '" + key + "'");
    }
    p.m = j.value("m", p.m);
    p.dt = j.value("dt", p.dt);
    p.ou_theta = j.value("ou_theta", p.ou_theta);
    p.ou_sigma = j.value("ou_sigma", p.ou_sigma);
    p.trigger_level = j.value("trigger_level", p.trigger_level);
    p.burst_amp = j.value("burst_amp", p.burst_amp);
    p.burst_width = j.value("burst_width", p.burst_width);
    p.precursor_lead_steps = j.value("precursor_lead_steps", p.precursor_lead_steps);
    p.noise_std = j.value("noise_std", p.noise_std);
    p.obs_noise_std = j.value("obs_noise_std", p.obs_noise_std);
    p.seed = j.value("seed", p.seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidSpec, std::string("synth params: ") + e.what());
  }
  p.validate();
  return p;
}

SynthResult synth_bursts(const SynthParams& p) {
  p.validate();
  std::mt19937_64 rng(p.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  const double decay = std::exp(-p.ou_theta * p.dt);
  const double stationary_std = p.ou_sigma / std::sqrt(2.0 * p.ou_theta);
  const double step_std = stationary_std * std::sqrt(1.0 - decay * decay);
  const double level = p.trigger_level * stationary_std;

  SynthResult res;
  res.latent.resize(p.m);
  res.latent[0] = stationary_std * normal(rng);
  for (std::size_t k = 1; k < p.m; ++k) {
    res.latent[k] = decay * res.latent[k - 1] + step_std * normal(rng);
  }
  for (std::size_t k = 1; k < p.m; ++k) {
    if (res.latent[k - 1] < level && res.latent[k] >= level) {
      res.crossings.push_back(k);
      res.burst_centers.push_back(k + p.precursor_lead_steps);
    }
  }

  auto& ds = res.data;
  ds.rows = p.m;
  ds.features = 3;
  ds.dt = p.dt;
  ds.t0 = 0.0;
  ds.channel_names = {"z_obs", "dz", "noise"};
  ds.target_name = "y";
  ds.target.resize(p.m);
  ds.inputs.resize(p.m * 3);
  for (std::size_t k = 0; k < p.m; ++k) ds.target[k] = p.noise_std * normal(rng);
  // Bumps are truncated at 6 widths.
  const double reach = 6.0 * p.burst_width;
  for (std::size_t c : res.burst_centers) {
    const double center = static_cast<double>(c);
    const auto lo = static_cast<std::size_t>(std::max(0.0, std::ceil(center - reach)));
    const auto hi = static_cast<std::size_t>(
        std::min(static_cast<double>(p.m - 1), std::floor(center + reach)));
    for (std::size_t k = lo; k <= hi && k < p.m; ++k) {
      const double d = (static_cast<double>(k) - center) / p.burst_width;
      ds.target[k] += p.burst_amp * std::exp(-0.5 * d * d);
    }
  }
  for (std::size_t k = 0; k < p.m; ++k) {
    const double z = res.latent[k];
    ds.inputs[3 * k + 0] = z + p.obs_noise_std * stationary_std * normal(rng);
    ds.inputs[3 * k + 1] = k == 0 ? 0.0 : z - res.latent[k - 1];
    ds.inputs[3 * k + 2] = normal(rng);
  }
  ds.provenance = "synth:seed=" + std::to_string(p.seed);
  return res;
}

}  // namespace rareloss
