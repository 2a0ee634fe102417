#include "rareloss/training.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <thread>

#include "rareloss/io.hpp"

namespace rareloss {

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::kInvalidSpec, what); };
  if (!(lr > 0)) fail("lr must be > 0");
  if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) fail("Adam betas must lie in (0, 1)");
  if (!(eps_adam > 0)) fail("eps_adam must be > 0");
  if (batch_size == 0) fail("batch_size must be >= 1");
  if (max_epochs == 0) fail("max_epochs must be >= 1");
  if (patience == 0) fail("patience must be >= 1");
  if (!(noise_frac >= 0)) fail("noise_frac must be >= 0");
}

void SplitSpec::validate() const {
  if (!(train > 0 && val > 0 && test > 0)) {
    throw Error(ErrorCode::kInvalidSpec, "split fractions must be positive");
  }
  if (std::abs(train + val + test - 1.0) > 1e-12) {
    throw Error(ErrorCode::kInvalidSpec, "split fractions must sum to 1");
  }
}

Split split_contiguous(const WindowedSamples& samples, const SplitSpec& spec) {
  spec.validate();
  const std::size_t n = samples.size();
  const auto n_train = static_cast<std::size_t>(std::floor(spec.train * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::floor(spec.val * static_cast<double>(n)));
  const std::size_t n_test = n - n_train - n_val;
  if (n_train < 10 || n_val < 10 || n_test < 10) {
    throw Error(ErrorCode::kTooFewSamples,
                "split of " + std::to_string(n) + " samples leaves fewer than 10 in a segment");
  }
  return {samples.slice(0, n_train), samples.slice(n_train, n_val),
          samples.slice(n_train + n_val, n_test)};
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               const TrainConfig& cfg, std::size_t batch_index) {
  if (params.size() != grads.size() || state.m.size() != params.size() ||
      state.v.size() != params.size()) {
    throw Error(ErrorCode::kShapeMismatch, "Adam parameter, gradient and state sizes differ");
  }
  for (double g : grads) {
    if (!std::isfinite(g)) {
      throw Error(ErrorCode::kNonFiniteGradient,
                  "non-finite gradient in batch " + std::to_string(batch_index));
    }
  }
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    const double g = grads[k];
    state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g;
    state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g;
    const double m_hat = state.m[k] / c1;
    const double v_hat = state.v[k] / c2;
    params[k] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps_adam);
  }
}

bool EarlyStopping::update(double val_loss) {
  ++epoch_;
  if (best_epoch_ == 0 || val_loss < best_) {
    best_ = val_loss;
    best_epoch_ = epoch_;
    since_best_ = 0;
    return true;
  }
  ++since_best_;
  return false;
}

std::string TrainedModel::history_csv() const {
  std::string out = "epoch,train_loss,val_loss,best_val,elapsed_s\n";
  for (const auto& r : history) {
    out += std::to_string(r.epoch) + "," + io::format_double(r.train_loss) + "," +
           io::format_double(r.val_loss) + "," + io::format_double(r.best_val) + "," +
           io::format_double(r.elapsed_s) + "\n";
  }
  return out;
}

SequenceBatch gather_batch(const WindowedSamples& samples, std::span<const std::size_t> indices) {
  SequenceBatch b;
  b.batch = indices.size();
  b.history_len = samples.history();
  b.features = samples.features();
  const std::size_t stride = b.history_len * b.features;
  b.inputs.resize(b.batch * stride);
  b.targets.resize(b.batch);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto w = samples.window(indices[k]);
    std::copy(w.begin(), w.end(), b.inputs.begin() + static_cast<std::ptrdiff_t>(k * stride));
    b.targets[k] = samples.target(indices[k]);
  }
  return b;
}

SequenceBatch gather_range(const WindowedSamples& samples, std::size_t begin, std::size_t count) {
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), begin);
  return gather_batch(samples, idx);
}

std::vector<double> predict(const ModelConfig& cfg, std::span<const double> params,
                            const WindowedSamples& samples, std::size_t chunk) {
  std::vector<double> out;
  out.reserve(samples.size());
  for (std::size_t begin = 0; begin < samples.size(); begin += chunk) {
    const std::size_t count = std::min(chunk, samples.size() - begin);
    const auto y = forward(params, cfg, gather_range(samples, begin, count));
    out.insert(out.end(), y.begin(), y.end());
  }
  return out;
}

namespace {

// Per-channel std over the source rows read by the training windows.
std::vector<double> channel_std(const WindowedSamples& train) {
  const auto& src = train.source();
  const std::size_t begin = train.window_begin_row(0);
  const std::size_t end = train.window_begin_row(train.size() - 1) + train.history();
  const double n = static_cast<double>(end - begin);
  std::vector<double> out(src.features, 0.0);
  for (std::size_t c = 0; c < src.features; ++c) {
    double mean = 0.0;
    for (std::size_t r = begin; r < end; ++r) mean += src.input(r, c);
    mean /= n;
    double var = 0.0;
    for (std::size_t r = begin; r < end; ++r) {
      const double d = src.input(r, c) - mean;
      var += d * d;
    }
    out[c] = std::sqrt(var / n);
  }
  return out;
}

double vector_std(std::span<const double> v) {
  const double n = static_cast<double>(v.size());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  return std::sqrt(var / n);
}

}  // namespace

TrainedModel train(const ModelConfig& cfg, const LossSpec& loss, const Split& data,
                   const TrainConfig& tcfg, const EpochCallback& on_epoch) {
  cfg.validate();
  tcfg.validate();
  loss.validate();
  if (data.train.size() == 0 || data.val.size() == 0) {
    throw Error(ErrorCode::kTooFewSamples, "empty training or validation split");
  }
  if (data.train.features() != cfg.input_features) {
    throw Error(ErrorCode::kShapeMismatch, "data channels do not match the model input width");
  }

  const auto started = std::chrono::steady_clock::now();
  TrainedModel result;
  result.cfg = cfg;
  result.loss = loss;
  ParamVector params = init_params(cfg, tcfg.seed);
  AdamState adam(params.size());
  std::mt19937_64 rng(tcfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> normal(0.0, 1.0);

  const auto train_targets = data.train.targets();
  const auto val_targets = data.val.targets();
  const auto input_noise = channel_std(data.train);
  const double target_noise = tcfg.noise_on_targets ? tcfg.noise_frac * vector_std(train_targets) : 0.0;

  std::vector<double> train_weights, val_weights;
  if (loss.kind == LossKind::kOw) {
    train_weights = loss.ow_weights && loss.ow_weights->size() == train_targets.size()
                        ? *loss.ow_weights
                        : precompute_ow_weights(train_targets, *loss.density);
    val_weights = precompute_ow_weights(val_targets, *loss.density);
  }
  const LossSpec val_loss_spec = tcfg.validate_with_mse ? LossSpec::mse() : loss;

  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  EarlyStopping stopper(tcfg.patience);
  ParamVector best_params = params;
  std::vector<double> batch_weights;

  for (std::size_t epoch = 1; epoch <= tcfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double train_acc = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += tcfg.batch_size, ++batch_index) {
      const std::size_t count = std::min(tcfg.batch_size, order.size() - begin);
      const std::span<const std::size_t> idx(order.data() + begin, count);
      SequenceBatch batch = gather_batch(data.train, idx);
      if (tcfg.noise_frac > 0) {
        const std::size_t f = batch.features;
        for (std::size_t k = 0; k < batch.inputs.size(); ++k) {
          batch.inputs[k] += tcfg.noise_frac * input_noise[k % f] * normal(rng);
        }
        if (target_noise > 0) {
          for (double& t : batch.targets) t += target_noise * normal(rng);
        }
      }
      Tape tape(params, cfg, batch);
      LossEval eval;
      if (loss.kind == LossKind::kOw) {
        batch_weights.resize(count);
        for (std::size_t k = 0; k < count; ++k) batch_weights[k] = train_weights[idx[k]];
        eval = eval_ow(batch.targets, tape.outputs(), batch_weights);
      } else {
        eval = eval_loss(loss, batch.targets, tape.outputs());
      }
      result.clamped_exponents += eval.clamped;
      if (!std::isfinite(eval.value)) {
        throw TrainingDiverged("non-finite training loss in epoch " + std::to_string(epoch) +
                                   ", batch " + std::to_string(batch_index),
                               result.history);
      }
      train_acc += eval.value * static_cast<double>(count);
      const ParamVector grad = tape.backward(eval.grad);
      adam_step(params, grad, adam, tcfg, batch_index);
    }
    const double train_loss = train_acc / static_cast<double>(order.size());

    const auto val_pred = predict(cfg, params, data.val);
    double val_loss = 0.0;
    try {
      val_loss = val_loss_spec.kind == LossKind::kOw
                     ? eval_ow(val_targets, val_pred, val_weights).value
                     : eval_loss(val_loss_spec, val_targets, val_pred).value;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kInvalidInput) throw;
      val_loss = std::numeric_limits<double>::quiet_NaN();
    }
    if (!std::isfinite(train_loss) || !std::isfinite(val_loss)) {
      throw TrainingDiverged("non-finite loss after epoch " + std::to_string(epoch), result.history);
    }
    if (stopper.update(val_loss)) best_params = params;

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = train_loss;
    rec.val_loss = val_loss;
    rec.best_val = stopper.best();
    rec.elapsed_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (stopper.should_stop()) break;
  }
  result.params = std::move(best_params);
  result.stopped_epoch = result.history.size();
  result.best_epoch = stopper.best_epoch();
  return result;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw Error(ErrorCode::kInvalidInput, "percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

Aggregate aggregate(std::span<const double> values) {
  Aggregate a;
  a.n = values.size();
  if (values.empty()) return a;
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  // Summing in sorted order keeps the mean independent of member order.
  a.mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / static_cast<double>(sorted.size());
  a.p10 = percentile(sorted, 0.1);
  a.p90 = percentile(sorted, 0.9);
  return a;
}

EnsembleResult train_ensemble(const ModelConfig& cfg, const LossSpec& loss, const Split& data,
                              const TrainConfig& tcfg, std::span<const std::uint64_t> seeds,
                              std::size_t workers) {
  if (seeds.empty()) throw Error(ErrorCode::kInvalidSpec, "ensemble needs at least one seed");
  {
    std::vector<std::uint64_t> sorted(seeds.begin(), seeds.end());
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw Error(ErrorCode::kInvalidSpec, "ensemble seeds must be distinct");
    }
  }
  EnsembleResult res;
  res.members.resize(seeds.size());
  res.failures.assign(seeds.size(), std::string());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < seeds.size(); i = next++) {
      TrainConfig member = tcfg;
      member.seed = seeds[i];
      try {
        res.members[i] = train(cfg, loss, data, member);
      } catch (const Error& e) {
        res.failures[i] = e.what();
      }
    }
  };
  workers = std::clamp<std::size_t>(workers, 1, seeds.size());
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  res.failed = static_cast<std::size_t>(
      std::count_if(res.failures.begin(), res.failures.end(), [](const auto& s) { return !s.empty(); }));
  return res;
}

}  // namespace rareloss
