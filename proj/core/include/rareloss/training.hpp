#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rareloss/datasets.hpp"
#include "rareloss/error.hpp"
#include "rareloss/losses.hpp"
#include "rareloss/regressor.hpp"

namespace rareloss {

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_adam = 1e-8;
  std::size_t batch_size = 128;
  std::size_t max_epochs = 500;
  std::size_t patience = 5;
  double noise_frac = 0.1;
  bool noise_on_targets = false;
  // Validation uses the training loss unless this is set.
  bool validate_with_mse = false;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SplitSpec {
  double train = 0.5;
  double val = 0.1;
  double test = 0.4;

  void validate() const;
};

struct Split {
  WindowedSamples train, val, test;
};

// Contiguous train/val/test segments of sizes floor(f N); the remainder goes to test.
Split split_contiguous(const WindowedSamples& samples, const SplitSpec& spec = {});

struct AdamState {
  std::vector<double> m, v;
  std::uint64_t t = 0;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

// One bias-corrected Adam update in place. batch_index is reported if the
// gradient is not finite.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               const TrainConfig& cfg, std::size_t batch_index = 0);

// Tracks the best validation loss and decides when to stop.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  // Returns true if `val_loss` is a new best.
  bool update(double val_loss);
  bool should_stop() const { return since_best_ >= patience_; }
  double best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }  // 1-based, 0 before any update

 private:
  std::size_t patience_;
  double best_ = 0.0;
  std::size_t best_epoch_ = 0;
  std::size_t epoch_ = 0;
  std::size_t since_best_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double best_val = 0.0;
  double elapsed_s = 0.0;
};

struct TrainedModel {
  ModelConfig cfg;
  ParamVector params;  // best-validation snapshot
  LossSpec loss;
  std::vector<EpochRecord> history;
  std::size_t stopped_epoch = 0;
  std::size_t best_epoch = 0;
  std::size_t clamped_exponents = 0;

  std::string history_csv() const;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Minibatch Adam with per-epoch shuffling, Gaussian input-noise injection
// scaled to the training split, and early stopping on validation loss.
// For OW/AOW the loss density must be fitted on training targets.
TrainedModel train(const ModelConfig& cfg, const LossSpec& loss, const Split& data,
                   const TrainConfig& tcfg, const EpochCallback& on_epoch = {});

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, std::vector<EpochRecord> history)
      : Error(ErrorCode::kDivergence, what), history_(std::move(history)) {}
  const std::vector<EpochRecord>& history() const { return history_; }

 private:
  std::vector<EpochRecord> history_;
};

SequenceBatch gather_batch(const WindowedSamples& samples, std::span<const std::size_t> indices);
SequenceBatch gather_range(const WindowedSamples& samples, std::size_t begin, std::size_t count);
// Predictions for every sample, evaluated in chunks.
std::vector<double> predict(const ModelConfig& cfg, std::span<const double> params,
                            const WindowedSamples& samples, std::size_t chunk = 512);

// Linear interpolation between order statistics at position q (n - 1).
double percentile(std::vector<double> values, double q);

struct Aggregate {
  double mean = 0.0;
  double p10 = 0.0;
  double p90 = 0.0;
  std::size_t n = 0;
};
Aggregate aggregate(std::span<const double> values);

struct EnsembleResult {
  std::vector<std::optional<TrainedModel>> members;  // same order as seeds
  std::vector<std::string> failures;                 // empty string for success
  std::size_t failed = 0;
};

// Independent trainings, one per seed. A failing member is recorded and the
// rest continue. workers > 1 trains members concurrently.
EnsembleResult train_ensemble(const ModelConfig& cfg, const LossSpec& loss, const Split& data,
                              const TrainConfig& tcfg, std::span<const std::uint64_t> seeds,
                              std::size_t workers = 1);

}  // namespace rareloss
