#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <json.hpp>

#include "rareloss/density.hpp"
#include "rareloss/error.hpp"

namespace rareloss {
namespace {

constexpr double kSqrt5 = 2.23606797749978969641;
constexpr long double kSqrt5L = 2.236067977499789696409173668731276235L;

struct TrainingSet {
  Eigen::VectorXd x;
  Eigen::VectorXd t;  // log_p - prior mean
  Eigen::VectorXd noise;
};

Eigen::MatrixXd kernel_matrix(const Eigen::VectorXd& x, double signal_var, double lengthscale) {
  const auto n = x.size();
  Eigen::MatrixXd k(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    k(i, i) = signal_var;
    for (Eigen::Index j = 0; j < i; ++j) {
      k(i, j) = k(j, i) = matern52(std::abs(x(i) - x(j)), signal_var, lengthscale);
    }
  }
  return k;
}

struct Factorization {
  Eigen::LLT<Eigen::MatrixXd> llt;
  double jitter = 0.0;
};

// Cholesky of K + diag(noise) with jitter starting at 1e-10 sigma^2 and growing
// tenfold up to 1e-4 sigma^2.
std::optional<Factorization> factor(const TrainingSet& ts, double signal_var, double lengthscale,
                                    double* last_jitter = nullptr) {
  Eigen::MatrixXd k = kernel_matrix(ts.x, signal_var, lengthscale);
  k.diagonal() += ts.noise;
  double jitter = 1e-10 * signal_var;
  const double max_jitter = 1e-4 * signal_var * (1.0 + 1e-9);
  while (jitter <= max_jitter) {
    Eigen::MatrixXd kj = k;
    kj.diagonal().array() += jitter;
    Factorization f{Eigen::LLT<Eigen::MatrixXd>(kj), jitter};
    if (last_jitter) *last_jitter = jitter;
    if (f.llt.info() == Eigen::Success && f.llt.matrixLLT().diagonal().allFinite() &&
        (f.llt.matrixLLT().diagonal().array() > 0).all()) {
      return f;
    }
    jitter *= 10.0;
  }
  return std::nullopt;
}

double log_marginal_likelihood(const TrainingSet& ts, const Factorization& f) {
  Eigen::VectorXd alpha = f.llt.solve(ts.t);
  const double fit = -0.5 * ts.t.dot(alpha);
  const double logdet = f.llt.matrixLLT().diagonal().array().log().sum();
  return fit - logdet - 0.5 * static_cast<double>(ts.t.size()) * std::log(2 * std::numbers::pi);
}

struct Bounds {
  double lo_log_var, hi_log_var, lo_log_len, hi_log_len;
};

double objective(const TrainingSet& ts, const Bounds& b, const std::array<double, 2>& theta) {
  if (theta[0] < b.lo_log_var || theta[0] > b.hi_log_var || theta[1] < b.lo_log_len ||
      theta[1] > b.hi_log_len) {
    return std::numeric_limits<double>::infinity();
  }
  auto f = factor(ts, std::exp(theta[0]), std::exp(theta[1]));
  if (!f) return std::numeric_limits<double>::infinity();
  const double lml = log_marginal_likelihood(ts, *f);
  return std::isfinite(lml) ? -lml : std::numeric_limits<double>::infinity();
}

// Plain Nelder-Mead on two parameters with a fixed iteration budget.
template <class F>
std::pair<std::array<double, 2>, double> nelder_mead(F&& fn, std::array<double, 2> start,
                                                     double step, int iterations) {
  using Point = std::array<double, 2>;
  std::array<Point, 3> simplex{start, start, start};
  simplex[1][0] += step;
  simplex[2][1] += step;
  std::array<double, 3> values{fn(simplex[0]), fn(simplex[1]), fn(simplex[2])};

  auto combine = [](const Point& a, const Point& b, double w) {
    // a + w (b - a)
    return Point{a[0] + w * (b[0] - a[0]), a[1] + w * (b[1] - a[1])};
  };

  for (int it = 0; it < iterations; ++it) {
    std::array<int, 3> order{0, 1, 2};
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      return values[a] < values[b] || (values[a] == values[b] && a < b);
    });
    const int best = order[0], mid = order[1], worst = order[2];
    if (std::isfinite(values[worst]) &&
        std::abs(values[worst] - values[best]) <= 1e-10 * (1.0 + std::abs(values[best]))) {
      break;
    }
    Point centroid{(simplex[best][0] + simplex[mid][0]) / 2,
                   (simplex[best][1] + simplex[mid][1]) / 2};

    Point reflected = combine(centroid, simplex[worst], -1.0);
    const double fr = fn(reflected);
    if (fr < values[best]) {
      Point expanded = combine(centroid, simplex[worst], -2.0);
      const double fe = fn(expanded);
      if (fe < fr) {
        simplex[worst] = expanded;
        values[worst] = fe;
      } else {
        simplex[worst] = reflected;
        values[worst] = fr;
      }
      continue;
    }
    if (fr < values[mid]) {
      simplex[worst] = reflected;
      values[worst] = fr;
      continue;
    }
    const bool outside = fr < values[worst];
    Point contracted = outside ? combine(centroid, reflected, 0.5)
                               : combine(centroid, simplex[worst], 0.5);
    const double fc = fn(contracted);
    if (fc < (outside ? fr : values[worst])) {
      simplex[worst] = contracted;
      values[worst] = fc;
      continue;
    }
    for (int k : {mid, worst}) {
      simplex[k] = combine(simplex[best], simplex[k], 0.5);
      values[k] = fn(simplex[k]);
    }
  }
  int best = 0;
  for (int k = 1; k < 3; ++k) {
    if (values[k] < values[best]) best = k;
  }
  return {simplex[best], values[best]};
}

}  // namespace

double matern52(double r, double signal_var, double lengthscale) {
  const double s = kSqrt5 * r / lengthscale;
  return signal_var * (1.0 + s + s * s / 3.0) * std::exp(-s);
}

double matern52_dquery(double offset, double signal_var, double lengthscale) {
  // dk/dr = -sigma^2 (5 r / 3 l^2) (1 + sqrt5 r / l) exp(-sqrt5 r / l), and
  // dr/dq = sign(offset), so the product is smooth through offset = 0.
  const double r = std::abs(offset);
  const double s = kSqrt5 * r / lengthscale;
  return -signal_var * (5.0 * offset / (3.0 * lengthscale * lengthscale)) * (1.0 + s) *
         std::exp(-s);
}

GpLogDensity::GpLogDensity(std::vector<double> centers, std::vector<double> coeff,
                           double signal_var, double lengthscale, std::vector<double> noise_var,
                           double prior_mean, double floor)
    : centers_(std::move(centers)),
      coeff_(std::move(coeff)),
      signal_var_(signal_var),
      lengthscale_(lengthscale),
      noise_var_(std::move(noise_var)),
      prior_mean_(prior_mean),
      floor_(floor) {
  if (centers_.size() != coeff_.size() || centers_.size() != noise_var_.size()) {
    throw Error(ErrorCode::kLengthMismatch, "GP centers, coefficients and noise differ in length");
  }
  if (!(signal_var_ > 0) || !(lengthscale_ > 0) || !(floor_ > 0)) {
    throw Error(ErrorCode::kInvalidSpec, "GP signal variance, lengthscale and floor must be > 0");
  }
  for (double v : noise_var_) {
    if (!(v >= 0)) throw Error(ErrorCode::kInvalidSpec, "GP noise variance must be >= 0");
  }
  const long double rate = kSqrt5L / lengthscale_;
  for (std::size_t j = 0; j + 1 < centers_.size(); ++j) {
    if (!(centers_[j] < centers_[j + 1])) {
      throw Error(ErrorCode::kInvalidSpec, "GP centers must be strictly increasing");
    }
    gap_decay_.push_back(std::exp(-rate * (static_cast<long double>(centers_[j + 1]) - centers_[j])));
  }
}

// The fitted coefficients alternate in sign and the terms of k(y)·α can exceed
// their sum by four orders of magnitude, so the sums are formed in extended
// precision. exp(-a|y - c_j|) is swept outward from y with the precomputed gap
// factors.
GpLogDensity::KernelSums GpLogDensity::kernel_sums(double y) const {
  const long double rate = kSqrt5L / lengthscale_, sv = signal_var_;
  const long double l2 = static_cast<long double>(lengthscale_) * lengthscale_;
  KernelSums out;
  auto add = [&](std::size_t j, long double decay) {
    const long double offset = static_cast<long double>(y) - centers_[j];
    const long double s = rate * std::fabs(offset);
    out.value += sv * (1.0L + s + s * s / 3.0L) * decay * coeff_[j];
    out.slope -= sv * (5.0L * offset / (3.0L * l2)) * (1.0L + s) * decay * coeff_[j];
  };
  const auto n = centers_.size();
  const auto right = static_cast<std::size_t>(std::upper_bound(centers_.begin(), centers_.end(), y) -
                                              centers_.begin());
  if (right > 0) {
    long double decay = std::exp(-rate * (static_cast<long double>(y) - centers_[right - 1]));
    for (std::size_t j = right; j-- > 0;) {
      add(j, decay);
      if (j > 0) decay *= gap_decay_[j - 1];
    }
  }
  if (right < n) {
    long double decay = std::exp(-rate * (static_cast<long double>(centers_[right]) - y));
    for (std::size_t j = right; j < n; ++j) {
      add(j, decay);
      if (j + 1 < n) decay *= gap_decay_[j];
    }
  }
  return out;
}

double GpLogDensity::log_density_core(double y) const {
  return static_cast<double>(kernel_sums(y).value + prior_mean_);
}

double GpLogDensity::density_at(double y) const { return std::exp(log_density_core(y)) + floor_; }

double GpLogDensity::density_grad_at(double y) const {
  const auto k = kernel_sums(y);
  return std::exp(static_cast<double>(k.value + prior_mean_)) * static_cast<double>(k.slope);
}

std::string GpLogDensity::to_text() const {
  nlohmann::ordered_json j;
  j["format"] = "rareloss.gp_log_density";
  j["version"] = 1;
  j["n_b"] = centers_.size();
  j["centers"] = centers_;
  j["alpha"] = coeff_;
  j["signal_var"] = signal_var_;
  j["lengthscale"] = lengthscale_;
  j["noise_var"] = noise_var_;
  j["prior_mean"] = prior_mean_;
  j["floor"] = floor_;
  j["diagnostics"] = {
      {"log_marginal_likelihood", diagnostics_.log_marginal_likelihood},
      {"jitter", diagnostics_.jitter},
      {"max_abs_log_residual", diagnostics_.max_abs_log_residual},
      {"max_sanity_excess", diagnostics_.max_sanity_excess},
  };
  return j.dump(2) + "\n";
}

GpLogDensity GpLogDensity::from_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
    if (j.at("format") != "rareloss.gp_log_density") {
      throw Error(ErrorCode::kParse, "not a density file");
    }
    GpLogDensity g(j.at("centers").get<std::vector<double>>(),
                   j.at("alpha").get<std::vector<double>>(), j.at("signal_var").get<double>(),
                   j.at("lengthscale").get<double>(), j.at("noise_var").get<std::vector<double>>(),
                   j.at("prior_mean").get<double>(), j.at("floor").get<double>());
    if (j.at("n_b").get<std::size_t>() != g.size()) {
      throw Error(ErrorCode::kParse, "density file n_b does not match its vectors");
    }
    if (j.contains("diagnostics")) {
      const auto& d = j["diagnostics"];
      g.diagnostics_ = {d.value("log_marginal_likelihood", 0.0), d.value("jitter", 0.0),
                        d.value("max_abs_log_residual", 0.0), d.value("max_sanity_excess", 0.0)};
    }
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("density file: ") + e.what());
  }
}

GpLogDensity fit_log_density_gp(const HistogramDensity& h, const GpFitOptions& options) {
  const std::size_t used = h.nonempty_bins();
  if (used < 5) {
    throw Error(ErrorCode::kInvalidInput,
                "GP fit needs at least 5 non-empty bins, got " + std::to_string(used));
  }
  TrainingSet ts;
  ts.x.resize(static_cast<Eigen::Index>(used));
  ts.t.resize(ts.x.size());
  ts.noise.resize(ts.x.size());
  {
    Eigen::Index k = 0;
    for (std::size_t i = 0; i < h.bins(); ++i) {
      if (h.empty_bin(i)) continue;
      ts.x(k) = h.centers[i];
      ts.t(k) = h.log_p[i] - kLogDensityPriorMean;
      ts.noise(k) = std::max(1.0 / static_cast<double>(h.counts[i]), options.min_noise_var);
      ++k;
    }
  }

  double mean_lp = 0.0;
  for (std::size_t i = 0; i < h.bins(); ++i) {
    if (!h.empty_bin(i)) mean_lp += h.log_p[i];
  }
  mean_lp /= static_cast<double>(used);
  double var_lp = 0.0;
  for (std::size_t i = 0; i < h.bins(); ++i) {
    if (!h.empty_bin(i)) var_lp += (h.log_p[i] - mean_lp) * (h.log_p[i] - mean_lp);
  }
  var_lp = std::max(var_lp / static_cast<double>(used), 1e-6);

  const double range = h.edges.back() - h.edges.front();
  const Bounds bounds{std::log(1e-4), std::log(1e8), std::log(h.width / 4), std::log(100 * range)};

  auto fn = [&](const std::array<double, 2>& theta) { return objective(ts, bounds, theta); };
  std::array<double, 2> best_theta{};
  double best_value = std::numeric_limits<double>::infinity();
  for (double len_scale : {0.5, 2.0}) {
    for (double var0 : {1.0, var_lp}) {
      const std::array<double, 2> start{std::log(var0), std::log(len_scale * h.width * 10)};
      auto [theta, value] = nelder_mead(fn, start, 1.0, options.iterations_per_start);
      if (value < best_value) {
        best_value = value;
        best_theta = theta;
      }
    }
  }
  if (!std::isfinite(best_value)) {
    throw Error(ErrorCode::kConditioning,
                "no hyperparameters gave a positive definite kernel matrix (final jitter 1e-4 "
                "sigma^2)");
  }

  const double signal_var = std::exp(best_theta[0]);
  const double lengthscale = std::exp(best_theta[1]);
  double last_jitter = 0.0;
  auto f = factor(ts, signal_var, lengthscale, &last_jitter);
  if (!f) {
    throw Error(ErrorCode::kConditioning,
                "Cholesky failed at final jitter " + std::to_string(last_jitter));
  }
  Eigen::VectorXd alpha = f->llt.solve(ts.t);

  std::vector<double> centers(ts.x.data(), ts.x.data() + ts.x.size());
  std::vector<double> coeff(alpha.data(), alpha.data() + alpha.size());
  std::vector<double> noise(ts.noise.data(), ts.noise.data() + ts.noise.size());
  GpLogDensity g(std::move(centers), std::move(coeff), signal_var, lengthscale, std::move(noise),
                 kLogDensityPriorMean, options.floor);

  GpFitDiagnostics diag;
  diag.log_marginal_likelihood = -best_value;
  diag.jitter = f->jitter;
  diag.max_sanity_excess = -std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < ts.x.size(); ++k) {
    const double resid =
        std::abs(g.log_density_core(ts.x(k)) - (ts.t(k) + kLogDensityPriorMean));
    diag.max_abs_log_residual = std::max(diag.max_abs_log_residual, resid);
    diag.max_sanity_excess =
        std::max(diag.max_sanity_excess, resid - (3 * std::sqrt(ts.noise(k)) + 0.5));
  }
  g.set_diagnostics(diag);
  return g;
}

GpLogDensity fit_density(std::span<const double> y, std::size_t bins, const GpFitOptions& options) {
  return fit_log_density_gp(histogram_log_density(y, bins), options);
}

}  // namespace rareloss
