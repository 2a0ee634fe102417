#pragma once

// Training objectives for regression with rare, extreme targets. Each
// evaluation returns the batch-mean value and its exact gradient with respect
// to the predictions.

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rareloss/density.hpp"

namespace rareloss {

enum class LossKind { kMse, kOw, kAow, kRe };

std::string_view to_string(LossKind kind);
LossKind parse_loss_kind(std::string_view name);

struct LossSpec {
  LossKind kind = LossKind::kMse;
  double lambda = 0.1;  // RE only; 0 gives the one-sided objective
  double exp_cap = 50.0;
  // AOW: differentiate through p(y_hat). false freezes that weight.
  bool aow_full_gradient = true;
  std::shared_ptr<const GpLogDensity> density;  // OW and AOW
  // OW fast path: 1 / p(y_i) for the training set
  std::shared_ptr<const std::vector<double>> ow_weights;

  static LossSpec mse() { return {}; }
  static LossSpec ow(std::shared_ptr<const GpLogDensity> g);
  static LossSpec aow(std::shared_ptr<const GpLogDensity> g, bool full_gradient = true);
  static LossSpec re(double lambda = 0.1, double exp_cap = 50.0);

  // Throws kInvalidSpec if the fields are inconsistent with the kind.
  void validate() const;
  // Short tag used in file names, e.g. "mse", "re".
  std::string name() const { return std::string(to_string(kind)); }
};

struct LossEval {
  double value = 0.0;
  std::vector<double> grad;
  // RE only: exponent arguments clamped at exp_cap
  std::size_t clamped = 0;
};

LossEval eval_mse(std::span<const double> y, std::span<const double> y_hat);
// w_i are constants with respect to y_hat.
LossEval eval_ow(std::span<const double> y, std::span<const double> y_hat,
                 std::span<const double> weights);
LossEval eval_ow(std::span<const double> y, std::span<const double> y_hat, const LossSpec& spec);
LossEval eval_aow(std::span<const double> y, std::span<const double> y_hat, const LossSpec& spec);
// One-sided relative entropy surrogate; spec.lambda is ignored.
LossEval eval_re(std::span<const double> y, std::span<const double> y_hat,
                 const LossSpec& spec = LossSpec::re(0.0));
LossEval eval_re_lambda(std::span<const double> y, std::span<const double> y_hat,
                        const LossSpec& spec);

// Dispatch on spec.kind. RE goes through eval_re_lambda.
LossEval eval_loss(const LossSpec& spec, std::span<const double> y, std::span<const double> y_hat);
// As eval_loss but OW uses the supplied per-sample weights.
LossEval eval_loss(const LossSpec& spec, std::span<const double> y, std::span<const double> y_hat,
                   std::span<const double> ow_weights);

std::vector<double> precompute_ow_weights(std::span<const double> y, const GpLogDensity& g);

}  // namespace rareloss
