#pragma once

// Batch experiment pipeline behind the `rareloss` command line:
//   synth -> fit-density -> train -> evaluate
// Every stage reads the same run configuration and communicates with the
// next one only through files under the output directory.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <variant>
#include <vector>

#include "rareloss/datasets.hpp"
#include "rareloss/losses.hpp"
#include "rareloss/metrics.hpp"
#include "rareloss/regressor.hpp"
#include "rareloss/training.hpp"

namespace rareloss {

enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 2,
  kExitDensity = 3,
  kExitResumeMismatch = 4,
  kExitEvaluationInputs = 5,
};

// Failure of a pipeline stage, tagged with the process exit status it maps to.
class RunError : public std::runtime_error {
 public:
  RunError(int exit_code, const std::string& what) : std::runtime_error(what), exit_code_(exit_code) {}
  int exit_code() const noexcept { return exit_code_; }

 private:
  int exit_code_;
};

struct CsvSource {
  std::filesystem::path path;
  CsvSchema schema;
};

struct LossEntry {
  LossKind kind = LossKind::kMse;
  double lambda = 0.1;
  double exp_cap = 50.0;
  bool aow_full_gradient = true;

  std::string name() const { return std::string(to_string(kind)); }
};

struct ModelChoice {
  std::string name;  // "kolmogorov", "cylinder" or "inline"
  std::vector<std::size_t> pre_dense;
  std::size_t recurrent_units = 0;
  std::vector<std::size_t> post_dense;
  Activation activation = Activation::kSwish;

  ModelConfig resolve(std::size_t input_features, std::size_t history_len) const;
};

struct RunConfig {
  std::variant<CsvSource, SynthParams> dataset = SynthParams{};
  SplitSpec split;
  ModelChoice model{"kolmogorov", {}, 0, {}, Activation::kSwish};
  std::size_t history_len = 50;
  std::vector<LossEntry> losses;
  std::vector<std::size_t> lead_times;
  std::size_t ensemble_size = 20;
  std::vector<std::uint64_t> seeds;
  TrainConfig train;
  std::size_t density_bins = 100;
  std::vector<double> omega_grid;  // empty: default grid
  std::size_t eps_points = 30;
  DensityDistanceOptions distance;
  bool perfect_predictor = false;  // evaluate y_hat := y, harness self-test
  std::filesystem::path output_dir = "rareloss-out";

  void validate() const;
  // Seeds actually used: the first ensemble_size entries.
  std::vector<std::uint64_t> member_seeds() const;
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);

struct RunOptions {
  std::size_t workers = 1;
  bool resume = false;
  std::ostream* log = nullptr;
};

// Output layout.
struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path data_csv() const { return root / "data" / "series.csv"; }
  std::filesystem::path data_manifest() const { return root / "data" / "series.manifest.json"; }
  std::filesystem::path density() const { return root / "density" / "density.json"; }
  std::filesystem::path normalization() const { return root / "density" / "normalization.json"; }
  std::filesystem::path model_dir() const { return root / "models"; }
  std::filesystem::path metrics_dir() const { return root / "metrics"; }
  static std::string member_key(const LossEntry& loss, std::size_t lead, std::uint64_t seed);
};

struct SynthOutcome {
  std::filesystem::path csv;
  std::size_t rows = 0;
};
SynthOutcome cmd_synth(const RunConfig& cfg, const RunOptions& opt = {});

struct FitDensityOutcome {
  GpLogDensity density;
  NormalizationStats stats;
  double max_abs_log_residual = 0.0;
};
FitDensityOutcome cmd_fit_density(const RunConfig& cfg, const RunOptions& opt = {});

struct TrainOutcome {
  std::size_t trained = 0;
  std::size_t skipped = 0;
  std::size_t failed = 0;
};
TrainOutcome cmd_train(const RunConfig& cfg, const RunOptions& opt = {});

struct MemberMetrics {
  std::uint64_t seed = 0;
  MetricsReport report;
};
struct CellMetrics {
  LossEntry loss;
  std::size_t lead = 0;
  std::vector<MemberMetrics> members;
};
struct EvaluateOutcome {
  std::vector<CellMetrics> cells;
};
EvaluateOutcome cmd_evaluate(const RunConfig& cfg, const RunOptions& opt = {});

}  // namespace rareloss
