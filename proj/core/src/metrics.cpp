#include "rareloss/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "rareloss/error.hpp"

namespace rareloss {
namespace {

void check_pair(std::span<const double> y, std::span<const double> y_hat) {
  if (y.size() != y_hat.size()) {
    throw Error(ErrorCode::kLengthMismatch, "targets and predictions differ in length");
  }
  if (y.empty()) throw Error(ErrorCode::kInvalidInput, "empty sample");
}

double rate_threshold(std::span<const double> y, double omega) {
  if (!(omega > 0.0 && omega < 1.0)) {
    throw Error(ErrorCode::kDegenerateRate, "extreme event rate must lie in (0, 1)");
  }
  return empirical_quantile(y, 1.0 - omega);
}

nlohmann::ordered_json curve_json(const std::vector<CurvePoint>& c, bool with_count) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& p : c) {
    nlohmann::ordered_json e;
    e["x"] = p.x;
    if (p.defined) {
      e["value"] = p.value;
    } else {
      e["value"] = nullptr;
    }
    if (with_count) e["count"] = p.count;
    arr.push_back(e);
  }
  return arr;
}

std::vector<CurvePoint> curve_from_json(const nlohmann::json& arr) {
  std::vector<CurvePoint> out;
  for (const auto& e : arr) {
    CurvePoint p;
    p.x = e.at("x").get<double>();
    p.defined = !e.at("value").is_null();
    p.value = p.defined ? e.at("value").get<double>() : 0.0;
    p.count = e.value("count", std::size_t{0});
    out.push_back(p);
  }
  return out;
}

}  // namespace

double empirical_quantile(std::span<const double> y, double q) {
  if (y.empty()) throw Error(ErrorCode::kInvalidInput, "quantile of an empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw Error(ErrorCode::kInvalidInput, "quantile level outside [0, 1]");
  std::vector<double> sorted(y.begin(), y.end());
  const double m = static_cast<double>(sorted.size());
  // q m is snapped to the nearest integer when within rounding noise, so that
  // (1 - 0.05) * 100 selects rank 95.
  double qm = q * m;
  if (std::abs(qm - std::round(qm)) <= 1e-9 * std::max(1.0, m)) qm = std::round(qm);
  auto rank = static_cast<std::size_t>(std::ceil(qm));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(rank - 1), sorted.end());
  return sorted[rank - 1];
}

double Confusion::precision() const {
  return tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
}

double Confusion::recall() const {
  return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
}

double log_density_distance(const GpLogDensity& p, const GpLogDensity& q, double lo, double hi,
                            const DensityDistanceOptions& options) {
  if (!(hi > lo)) throw Error(ErrorCode::kDisjointSupport, "observed ranges do not overlap");
  if (options.grid_points < 2) throw Error(ErrorCode::kInvalidSpec, "need at least two grid points");
  const std::size_t n = options.grid_points;
  const double h = (hi - lo) / static_cast<double>(n - 1);
  double integral = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double y = k + 1 == n ? hi : lo + static_cast<double>(k) * h;
    const double v = std::abs(std::log(p.density_at(y)) - std::log(q.density_at(y)));
    integral += (k == 0 || k + 1 == n) ? 0.5 * v : v;
  }
  integral *= h;
  const double width = hi - lo;
  return integral / (options.width_squared ? width * width : width);
}

double log_density_distance(std::span<const double> y_true, std::span<const double> y_pred,
                            const DensityDistanceOptions& options) {
  if (y_true.size() < 5 * options.bins || y_pred.size() < 5 * options.bins) {
    throw Error(ErrorCode::kTooFewSamples, "density distance needs at least " +
                                               std::to_string(5 * options.bins) +
                                               " samples per vector");
  }
  auto [t_lo, t_hi] = std::minmax_element(y_true.begin(), y_true.end());
  auto [p_lo, p_hi] = std::minmax_element(y_pred.begin(), y_pred.end());
  const double lo = std::max(*t_lo, *p_lo);
  const double hi = std::min(*t_hi, *p_hi);
  if (!(hi > lo)) throw Error(ErrorCode::kDisjointSupport, "observed ranges do not overlap");
  const auto p = fit_density(y_true, options.bins);
  const auto q = fit_density(y_pred, options.bins);
  return log_density_distance(p, q, lo, hi, options);
}

std::optional<MseEps> mse_below_eps(std::span<const double> y, std::span<const double> y_hat,
                                    std::span<const double> density, double eps) {
  check_pair(y, y_hat);
  if (density.size() != y.size()) {
    throw Error(ErrorCode::kLengthMismatch, "densities do not match the sample");
  }
  MseEps out;
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (density[i] <= eps) {
      const double e = y[i] - y_hat[i];
      acc += e * e;
      ++out.count;
    }
  }
  if (out.count == 0) return std::nullopt;
  out.value = acc / static_cast<double>(out.count);
  return out;
}

std::optional<MseEps> mse_below_eps(std::span<const double> y, std::span<const double> y_hat,
                                    const GpLogDensity& g, double eps) {
  std::vector<double> d(y.size());
  std::transform(y.begin(), y.end(), d.begin(), [&](double v) { return g.density_at(v); });
  return mse_below_eps(y, y_hat, d, eps);
}

double auprc_at_rate(std::span<const double> y, std::span<const double> y_hat, double omega) {
  check_pair(y, y_hat);
  const double a = rate_threshold(y, omega);
  const auto positives = static_cast<std::size_t>(
      std::count_if(y.begin(), y.end(), [a](double v) { return v >= a; }));
  if (positives == 0) throw Error(ErrorCode::kDegenerateRate, "no positives at this rate");

  std::vector<std::size_t> order(y.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return y_hat[i] > y_hat[j] || (y_hat[i] == y_hat[j] && i < j);
  });

  // Walk thresholds b from the largest prediction down; each distinct value
  // adds its whole tie group to the predicted positives at once.
  const double p = static_cast<double>(positives);
  std::size_t tp = 0, fp = 0;
  double prev_recall = 0.0;
  double area = 0.0;
  std::size_t k = 0;
  while (k < order.size()) {
    const double b = y_hat[order[k]];
    while (k < order.size() && y_hat[order[k]] == b) {
      if (y[order[k]] >= a) {
        ++tp;
      } else {
        ++fp;
      }
      ++k;
    }
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double recall = static_cast<double>(tp) / p;
    area += precision * (recall - prev_recall);
    prev_recall = recall;
  }
  // Sentinel below min(y_hat): same predicted set as the smallest value, so its
  // recall increment is zero.
  area += (static_cast<double>(tp) / static_cast<double>(tp + fp)) * (1.0 - prev_recall);
  return std::clamp(area, 0.0, 1.0);
}

double f1_at_rate(std::span<const double> y, std::span<const double> y_hat, double omega) {
  check_pair(y, y_hat);
  const double a = rate_threshold(y, omega);
  Confusion c;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const bool truth = y[i] >= a;
    const bool pred = y_hat[i] >= a;
    if (truth && pred) ++c.tp;
    else if (!truth && pred) ++c.fp;
    else if (truth) ++c.fn;
    else ++c.tn;
  }
  if (c.tp + c.fn == 0) throw Error(ErrorCode::kDegenerateRate, "no positives at this rate");
  if (c.tp + c.fp == 0) return 0.0;
  const double s = c.precision();
  const double r = c.recall();
  return s + r == 0.0 ? 0.0 : 2.0 * s * r / (s + r);
}

std::vector<double> default_omega_grid(std::size_t points) {
  std::vector<double> grid(points);
  const double lo = std::log(0.005), hi = std::log(0.3);
  for (std::size_t k = 0; k < points; ++k) {
    const double t = points == 1 ? 0.0 : static_cast<double>(k) / static_cast<double>(points - 1);
    grid[k] = std::exp(lo + t * (hi - lo));
  }
  if (points > 1) {
    grid.front() = 0.005;
    grid.back() = 0.3;
  }
  return grid;
}

std::vector<double> default_eps_grid(std::span<const double> y, const GpLogDensity& g,
                                     std::size_t points) {
  if (y.empty() || points == 0) return {};
  double lo = std::numeric_limits<double>::infinity();
  double hi = 0.0;
  for (double v : y) {
    const double d = g.density_at(v);
    lo = std::min(lo, d);
    hi = std::max(hi, d);
  }
  if (!(hi > lo) || points == 1) return {hi};
  std::vector<double> grid(points);
  const double llo = std::log(lo), lhi = std::log(hi);
  for (std::size_t k = 0; k < points; ++k) {
    grid[k] = std::exp(llo + (lhi - llo) * static_cast<double>(k) / static_cast<double>(points - 1));
  }
  grid.front() = lo;
  grid.back() = hi;
  // exp/log round trips can break strict ordering for very narrow ranges
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  return grid;
}

MetricsReport full_report(std::span<const double> y, std::span<const double> y_hat,
                          const GpLogDensity& g, std::span<const double> eps_grid,
                          std::span<const double> omega_grid,
                          const DensityDistanceOptions& options) {
  check_pair(y, y_hat);
  auto increasing = [](std::span<const double> grid) {
    for (std::size_t k = 1; k < grid.size(); ++k) {
      if (!(grid[k] > grid[k - 1])) return false;
    }
    return true;
  };
  if (!increasing(eps_grid) || !increasing(omega_grid)) {
    throw Error(ErrorCode::kInvalidSpec, "metric grids must be strictly increasing");
  }

  MetricsReport r;
  r.eps_grid.assign(eps_grid.begin(), eps_grid.end());
  r.omega_grid.assign(omega_grid.begin(), omega_grid.end());
  try {
    r.density_distance = log_density_distance(y, y_hat, options);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kDisjointSupport && e.code() != ErrorCode::kDegenerateRange &&
        e.code() != ErrorCode::kInvalidInput && e.code() != ErrorCode::kConditioning &&
        e.code() != ErrorCode::kTooFewSamples) {
      throw;
    }
    r.density_distance = std::numeric_limits<double>::infinity();
    r.density_distance_defined = false;
  }

  std::vector<double> density(y.size());
  std::transform(y.begin(), y.end(), density.begin(), [&](double v) { return g.density_at(v); });
  for (double eps : eps_grid) {
    CurvePoint pt{eps, 0.0, 0, false};
    if (auto m = mse_below_eps(y, y_hat, density, eps)) {
      pt.value = m->value;
      pt.count = m->count;
      pt.defined = true;
    }
    r.mse_eps.push_back(pt);
  }
  for (double omega : omega_grid) {
    CurvePoint a{omega, 0.0, 0, true};
    CurvePoint f{omega, 0.0, 0, true};
    try {
      a.value = auprc_at_rate(y, y_hat, omega);
      f.value = f1_at_rate(y, y_hat, omega);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kDegenerateRate) throw;
      a.defined = f.defined = false;
    }
    r.alpha.push_back(a);
    r.f1.push_back(f);
  }
  return r;
}

std::string MetricsReport::to_text() const {
  nlohmann::ordered_json j;
  j["format"] = "rareloss.metrics";
  if (density_distance_defined) {
    j["D"] = density_distance;
  } else {
    j["D"] = nullptr;
  }
  j["eps_grid"] = eps_grid;
  j["omega_grid"] = omega_grid;
  j["mse_eps"] = curve_json(mse_eps, true);
  j["alpha"] = curve_json(alpha, false);
  j["f1"] = curve_json(f1, false);
  return j.dump(1) + "\n";
}

MetricsReport MetricsReport::from_text(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    MetricsReport r;
    r.density_distance_defined = !j.at("D").is_null();
    r.density_distance = r.density_distance_defined ? j.at("D").get<double>()
                                                    : std::numeric_limits<double>::infinity();
    r.eps_grid = j.at("eps_grid").get<std::vector<double>>();
    r.omega_grid = j.at("omega_grid").get<std::vector<double>>();
    r.mse_eps = curve_from_json(j.at("mse_eps"));
    r.alpha = curve_from_json(j.at("alpha"));
    r.f1 = curve_from_json(j.at("f1"));
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("metrics file: ") + e.what());
  }
}

}  // namespace rareloss
