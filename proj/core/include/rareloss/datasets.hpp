#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rareloss {

// Uniformly sampled inputs (row-major, rows x features) and a scalar target.
struct TimeSeriesDataset {
  double dt = 1.0;
  double t0 = 0.0;
  std::size_t rows = 0;
  std::size_t features = 0;
  std::vector<double> inputs;
  std::vector<double> target;
  std::vector<std::string> channel_names;
  std::string target_name = "y";
  std::string provenance;

  double input(std::size_t row, std::size_t channel) const { return inputs[row * features + channel]; }
  void validate() const;
};

struct CsvSchema {
  std::optional<std::string> time_column;
  std::string target_column = "y";
  // Empty means every column other than time and target, in file order.
  std::vector<std::string> input_columns;
};

TimeSeriesDataset load_csv(const std::filesystem::path& path, const CsvSchema& schema);
TimeSeriesDataset parse_csv(const std::string& text, const CsvSchema& schema,
                            const std::string& provenance = {});
// Header `t,<channels...>,<target>`, shortest round-trip decimals.
std::string to_csv(const TimeSeriesDataset& ds);

// Half-open row range [begin, end).
struct RowRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

struct NormalizationStats {
  double target_mean = 0.0;
  double target_std = 1.0;
  std::vector<double> input_mean;
  std::vector<double> input_std;
  RowRange source;

  double normalize_target(double v) const { return (v - target_mean) / target_std; }
  double denormalize_target(double v) const { return v * target_std + target_mean; }

  std::string to_text() const;
  static NormalizationStats from_text(const std::string& text);
};

NormalizationStats compute_normalization(const TimeSeriesDataset& ds, RowRange segment);
TimeSeriesDataset apply_normalization(const TimeSeriesDataset& ds, const NormalizationStats& stats);
TimeSeriesDataset invert_normalization(const TimeSeriesDataset& ds, const NormalizationStats& stats);

struct NormalizedDataset {
  TimeSeriesDataset data;
  NormalizationStats stats;
};
// Statistics from `segment` only, applied to the whole series.
NormalizedDataset normalize(const TimeSeriesDataset& ds, RowRange segment);

// (window, target) pairs. Sample i reads source rows [i, i + h) and targets
// row i + h - 1 + lead_steps. Windows are views into a shared copy of the
// source inputs.
class WindowedSamples {
 public:
  WindowedSamples() = default;
  WindowedSamples(std::shared_ptr<const TimeSeriesDataset> source, std::size_t history,
                  std::size_t lead_steps);

  std::size_t size() const { return count_; }
  std::size_t history() const { return history_; }
  std::size_t lead_steps() const { return lead_; }
  std::size_t features() const { return source_ ? source_->features : 0; }
  // Offset of the first sample within the full windowed series.
  std::size_t first() const { return first_; }

  std::span<const double> window(std::size_t i) const;
  double target(std::size_t i) const;
  std::size_t target_row(std::size_t i) const { return first_ + i + history_ - 1 + lead_; }
  std::size_t window_begin_row(std::size_t i) const { return first_ + i; }
  std::vector<double> targets() const;

  // Contiguous sub-range [begin, begin + count) of this sample set.
  WindowedSamples slice(std::size_t begin, std::size_t count) const;
  const TimeSeriesDataset& source() const { return *source_; }

 private:
  std::shared_ptr<const TimeSeriesDataset> source_;
  std::size_t history_ = 0;
  std::size_t lead_ = 0;
  std::size_t first_ = 0;
  std::size_t count_ = 0;
};

WindowedSamples make_windows(const TimeSeriesDataset& ds, std::size_t history, std::size_t lead_steps);

struct SynthParams {
  std::size_t m = 20000;
  double dt = 0.1;
  double ou_theta = 1.0;
  double ou_sigma = 1.0;
  double trigger_level = 2.0;  // in units of the stationary std of z
  double burst_amp = 6.0;
  double burst_width = 1.0;    // steps
  std::size_t precursor_lead_steps = 10;
  double noise_std = 1.0;
  double obs_noise_std = 0.05;  // relative to the stationary std of z
  std::uint64_t seed = 1;

  void validate() const;
  std::string to_text() const;
  static SynthParams from_json_text(const std::string& text);
};

struct SynthResult {
  TimeSeriesDataset data;
  std::vector<double> latent;             // noiseless z
  std::vector<std::size_t> crossings;     // rows of upward trigger crossings
  std::vector<std::size_t> burst_centers; // crossing + precursor lead
};

// Latent Ornstein-Uhlenbeck path; every upward crossing of the trigger level
// schedules a Gaussian bump in the target precursor_lead_steps later.
// Inputs: z + observation noise, one-step difference of z, pure noise.
SynthResult synth_bursts(const SynthParams& params);

}  // namespace rareloss
