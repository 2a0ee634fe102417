#pragma once

// Differentiable estimate of a scalar target density.
//
// A histogram gives noisy log-density values at bin centers; a Gaussian
// process with a Matern-5/2 kernel, per-bin white noise and a very negative
// constant prior mean interpolates them. The GP conditional mean is cheap to
// evaluate (one kernel row times a stored coefficient vector) and has an
// analytic derivative, so it can sit inside a training loop.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace rareloss {

inline constexpr double kDefaultDensityFloor = 1e-5;
// log(1e-16): the GP reverts to this away from the data.
inline constexpr double kLogDensityPriorMean = -36.841361487904734;

struct HistogramDensity {
  std::vector<double> edges;    // n_b + 1, ascending
  std::vector<double> centers;  // n_b
  double width = 0.0;
  std::vector<double> log_p;    // prior mean for empty bins
  std::vector<std::size_t> counts;
  std::size_t sample_count = 0;

  std::size_t bins() const { return centers.size(); }
  bool empty_bin(std::size_t i) const { return counts[i] == 0; }
  std::size_t nonempty_bins() const;
};

// Equal-width histogram over [min(y), max(y)]; the last bin is closed.
HistogramDensity histogram_log_density(std::span<const double> y, std::size_t bins = 100);

double matern52(double r, double signal_var, double lengthscale);
// d/dq k(|q - c|) for the query coordinate q, given the signed offset q - c.
double matern52_dquery(double offset, double signal_var, double lengthscale);

struct GpFitOptions {
  double floor = kDefaultDensityFloor;
  int iterations_per_start = 200;
  double min_noise_var = 1e-4;
};

struct GpFitDiagnostics {
  double log_marginal_likelihood = 0.0;
  double jitter = 0.0;
  // max over training bins of |log(p - floor) - log_p_i|
  double max_abs_log_residual = 0.0;
  // max over training bins of residual - (3 sqrt(noise_i) + 0.5); <= 0 passes
  double max_sanity_excess = 0.0;
};

class GpLogDensity {
 public:
  GpLogDensity() = default;
  GpLogDensity(std::vector<double> centers, std::vector<double> coeff, double signal_var,
               double lengthscale, std::vector<double> noise_var,
               double prior_mean = kLogDensityPriorMean, double floor = kDefaultDensityFloor);

  // exp(k(y, c) . alpha + mu) + floor
  double density_at(double y) const;
  // derivative of the exponential part only; the floor is a constant
  double density_grad_at(double y) const;
  // k(y, c) . alpha + mu, i.e. the log of the un-floored density
  double log_density_core(double y) const;

  std::span<const double> centers() const { return centers_; }
  std::span<const double> coeff() const { return coeff_; }
  std::span<const double> noise_var() const { return noise_var_; }
  double signal_var() const { return signal_var_; }
  double lengthscale() const { return lengthscale_; }
  double prior_mean() const { return prior_mean_; }
  double floor() const { return floor_; }
  std::size_t size() const { return centers_.size(); }

  const GpFitDiagnostics& diagnostics() const { return diagnostics_; }
  void set_diagnostics(const GpFitDiagnostics& d) { diagnostics_ = d; }

  std::string to_text() const;
  static GpLogDensity from_text(const std::string& text);

  friend bool operator==(const GpLogDensity& a, const GpLogDensity& b) {
    return a.centers_ == b.centers_ && a.coeff_ == b.coeff_ && a.signal_var_ == b.signal_var_ &&
           a.lengthscale_ == b.lengthscale_ && a.noise_var_ == b.noise_var_ &&
           a.prior_mean_ == b.prior_mean_ && a.floor_ == b.floor_;
  }

 private:
  struct KernelSums {
    long double value = 0.0L;  // k(y)·α
    long double slope = 0.0L;  // k'(y)·α
  };
  KernelSums kernel_sums(double y) const;

  std::vector<double> centers_;
  std::vector<double> coeff_;
  double signal_var_ = 1.0;
  double lengthscale_ = 1.0;
  std::vector<double> noise_var_;
  double prior_mean_ = kLogDensityPriorMean;
  double floor_ = kDefaultDensityFloor;
  GpFitDiagnostics diagnostics_;
  // exp(-sqrt5 (c[j+1] - c[j]) / l), so a query needs two exponentials.
  std::vector<long double> gap_decay_;
};

GpLogDensity fit_log_density_gp(const HistogramDensity& h, const GpFitOptions& options = {});

// Histogram + GP in one call.
GpLogDensity fit_density(std::span<const double> y, std::size_t bins = 100,
                         const GpFitOptions& options = {});

}  // namespace rareloss
