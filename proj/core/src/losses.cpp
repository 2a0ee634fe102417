#include "rareloss/losses.hpp"

#include <algorithm>
#include <cmath>

#include "rareloss/error.hpp"

namespace rareloss {
namespace {

void check_inputs(std::span<const double> y, std::span<const double> y_hat) {
  if (y.size() != y_hat.size()) {
    throw Error(ErrorCode::kLengthMismatch, "targets have " + std::to_string(y.size()) +
                                                " entries, predictions " +
                                                std::to_string(y_hat.size()));
  }
  if (y.empty()) throw Error(ErrorCode::kInvalidInput, "empty batch");
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!std::isfinite(y[i]) || !std::isfinite(y_hat[i])) {
      throw Error(ErrorCode::kInvalidInput, "non-finite value at index " + std::to_string(i));
    }
  }
}

const GpLogDensity& require_density(const LossSpec& spec) {
  if (!spec.density) {
    throw Error(ErrorCode::kInvalidSpec,
                std::string(to_string(spec.kind)) + " loss needs a fitted density model");
  }
  return *spec.density;
}

double clamp_exponent(double v, double cap, std::size_t& clamped) {
  if (v > cap) {
    ++clamped;
    return cap;
  }
  if (v < -cap) {
    ++clamped;
    return -cap;
  }
  return v;
}

// Adds scale * (mean over i of e^{s yh_i} - e^{s y_i} yh_i s) and its gradient,
// with s = +1 for the direct term and s = -1 for the mirrored one.
void accumulate_re(std::span<const double> y, std::span<const double> y_hat, double sign,
                   double scale, double cap, LossEval& out) {
  const double inv_m = 1.0 / static_cast<double>(y.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double f = clamp_exponent(sign * y[i], cap, out.clamped);
    const double fh = clamp_exponent(sign * y_hat[i], cap, out.clamped);
    const double ef = std::exp(f);
    const double efh = std::exp(fh);
    acc += efh - ef * fh;
    // d/dyh of (e^{s yh} - e^{s y} s yh) = s (e^{s yh} - e^{s y})
    out.grad[i] += scale * inv_m * sign * (efh - ef);
  }
  out.value += scale * inv_m * acc;
}

}  // namespace

std::string_view to_string(LossKind kind) {
  switch (kind) {
    case LossKind::kMse: return "mse";
    case LossKind::kOw: return "ow";
    case LossKind::kAow: return "aow";
    case LossKind::kRe: return "re";
  }
  return "?";
}

LossKind parse_loss_kind(std::string_view name) {
  if (name == "mse") return LossKind::kMse;
  if (name == "ow") return LossKind::kOw;
  if (name == "aow") return LossKind::kAow;
  if (name == "re") return LossKind::kRe;
  throw Error(ErrorCode::kInvalidSpec, "unknown loss '" + std::string(name) + "'");
}

LossSpec LossSpec::ow(std::shared_ptr<const GpLogDensity> g) {
  LossSpec s;
  s.kind = LossKind::kOw;
  s.density = std::move(g);
  return s;
}

LossSpec LossSpec::aow(std::shared_ptr<const GpLogDensity> g, bool full_gradient) {
  LossSpec s;
  s.kind = LossKind::kAow;
  s.density = std::move(g);
  s.aow_full_gradient = full_gradient;
  return s;
}

LossSpec LossSpec::re(double lambda, double exp_cap) {
  LossSpec s;
  s.kind = LossKind::kRe;
  s.lambda = lambda;
  s.exp_cap = exp_cap;
  return s;
}

void LossSpec::validate() const {
  if (!(lambda >= 0)) throw Error(ErrorCode::kInvalidSpec, "lambda must be >= 0");
  if (!(exp_cap > 0)) throw Error(ErrorCode::kInvalidSpec, "exp_cap must be > 0");
  if ((kind == LossKind::kOw || kind == LossKind::kAow) && !density) {
    throw Error(ErrorCode::kInvalidSpec, name() + " loss needs a fitted density model");
  }
}

LossEval eval_mse(std::span<const double> y, std::span<const double> y_hat) {
  check_inputs(y, y_hat);
  const double inv_m = 1.0 / static_cast<double>(y.size());
  LossEval out;
  out.grad.resize(y.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = y_hat[i] - y[i];
    acc += d * d;
    out.grad[i] = 2.0 * inv_m * d;
  }
  out.value = acc * inv_m;
  return out;
}

LossEval eval_ow(std::span<const double> y, std::span<const double> y_hat,
                 std::span<const double> weights) {
  check_inputs(y, y_hat);
  if (weights.size() != y.size()) {
    throw Error(ErrorCode::kLengthMismatch, "OW weights do not match the batch");
  }
  const double inv_m = 1.0 / static_cast<double>(y.size());
  LossEval out;
  out.grad.resize(y.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = y_hat[i] - y[i];
    acc += weights[i] * d * d;
    out.grad[i] = 2.0 * inv_m * weights[i] * d;
  }
  out.value = acc * inv_m;
  return out;
}

LossEval eval_ow(std::span<const double> y, std::span<const double> y_hat, const LossSpec& spec) {
  if (spec.ow_weights && spec.ow_weights->size() == y.size()) {
    return eval_ow(y, y_hat, *spec.ow_weights);
  }
  const auto w = precompute_ow_weights(y, require_density(spec));
  return eval_ow(y, y_hat, w);
}

LossEval eval_aow(std::span<const double> y, std::span<const double> y_hat, const LossSpec& spec) {
  check_inputs(y, y_hat);
  const auto& g = require_density(spec);
  const double inv_m = 1.0 / static_cast<double>(y.size());
  LossEval out;
  out.grad.resize(y.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double p_true = g.density_at(y[i]);
    const double p_pred = g.density_at(y_hat[i]);
    const double weight = 1.0 / p_true + p_true / p_pred;
    const double d = y_hat[i] - y[i];
    acc += weight * d * d;
    double grad = 2.0 * weight * d;
    if (spec.aow_full_gradient) {
      grad -= d * d * p_true * g.density_grad_at(y_hat[i]) / (p_pred * p_pred);
    }
    out.grad[i] = inv_m * grad;
  }
  out.value = acc * inv_m;
  return out;
}

LossEval eval_re(std::span<const double> y, std::span<const double> y_hat, const LossSpec& spec) {
  check_inputs(y, y_hat);
  if (!(spec.exp_cap > 0)) throw Error(ErrorCode::kInvalidSpec, "exp_cap must be > 0");
  LossEval out;
  out.grad.assign(y.size(), 0.0);
  accumulate_re(y, y_hat, 1.0, 1.0, spec.exp_cap, out);
  return out;
}

LossEval eval_re_lambda(std::span<const double> y, std::span<const double> y_hat,
                        const LossSpec& spec) {
  if (!(spec.lambda >= 0)) throw Error(ErrorCode::kInvalidSpec, "lambda must be >= 0");
  LossEval out = eval_re(y, y_hat, spec);
  if (spec.lambda > 0) accumulate_re(y, y_hat, -1.0, spec.lambda, spec.exp_cap, out);
  return out;
}

LossEval eval_loss(const LossSpec& spec, std::span<const double> y,
                   std::span<const double> y_hat) {
  switch (spec.kind) {
    case LossKind::kMse: return eval_mse(y, y_hat);
    case LossKind::kOw: return eval_ow(y, y_hat, spec);
    case LossKind::kAow: return eval_aow(y, y_hat, spec);
    case LossKind::kRe: return eval_re_lambda(y, y_hat, spec);
  }
  throw Error(ErrorCode::kInvalidSpec, "unknown loss kind");
}

LossEval eval_loss(const LossSpec& spec, std::span<const double> y, std::span<const double> y_hat,
                   std::span<const double> ow_weights) {
  if (spec.kind == LossKind::kOw) return eval_ow(y, y_hat, ow_weights);
  return eval_loss(spec, y, y_hat);
}

std::vector<double> precompute_ow_weights(std::span<const double> y, const GpLogDensity& g) {
  std::vector<double> w(y.size());
  std::transform(y.begin(), y.end(), w.begin(), [&](double v) { return 1.0 / g.density_at(v); });
  return w;
}

}  // namespace rareloss
