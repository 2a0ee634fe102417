#pragma once

// Evaluation measures for regression with extreme events.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rareloss/density.hpp"

namespace rareloss {

// ceil(q m)-th smallest value (1-based), q = 0 gives the minimum.
double empirical_quantile(std::span<const double> y, double q);

struct DensityDistanceOptions {
  std::size_t bins = 100;
  std::size_t grid_points = 200;
  // true: divide by |Omega|^2 as in the defining formula; false: by |Omega|.
  bool width_squared = true;
};

// Integrated absolute log-density difference over the intersection of the
// observed ranges, both densities estimated by the histogram + GP pipeline.
double log_density_distance(std::span<const double> y_true, std::span<const double> y_pred,
                            const DensityDistanceOptions& options = {});
// Same measure for already fitted densities on a given interval.
double log_density_distance(const GpLogDensity& p, const GpLogDensity& q, double lo, double hi,
                            const DensityDistanceOptions& options = {});

struct MseEps {
  double value = 0.0;
  std::size_t count = 0;
};
// Mean squared error over samples whose true-target density is <= eps.
// nullopt when no sample qualifies.
std::optional<MseEps> mse_below_eps(std::span<const double> y, std::span<const double> y_hat,
                                    const GpLogDensity& g, double eps);
// Variant with the densities p(y_i) already evaluated.
std::optional<MseEps> mse_below_eps(std::span<const double> y, std::span<const double> y_hat,
                                    std::span<const double> density, double eps);

// Precision and recall of predicted positives {y_hat >= b} against true
// positives {y >= a}.
struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  double precision() const;
  double recall() const;
};

// Area under the precision-recall curve at extreme-event rate omega. The
// threshold on y_hat is swept; only the ranking of y_hat matters.
double auprc_at_rate(std::span<const double> y, std::span<const double> y_hat, double omega);
// F1 with the same threshold a = F_y^{-1}(1 - omega) applied to y and y_hat.
double f1_at_rate(std::span<const double> y, std::span<const double> y_hat, double omega);

struct CurvePoint {
  double x = 0.0;
  double value = 0.0;
  std::size_t count = 0;  // MSE_eps only
  bool defined = true;
};

struct MetricsReport {
  double density_distance = 0.0;  // infinity on disjoint supports
  bool density_distance_defined = true;
  std::vector<double> eps_grid;
  std::vector<double> omega_grid;
  std::vector<CurvePoint> mse_eps;
  std::vector<CurvePoint> alpha;
  std::vector<CurvePoint> f1;

  std::string to_text() const;
  static MetricsReport from_text(const std::string& text);
};

// 30 log-spaced rates in [0.005, 0.3].
std::vector<double> default_omega_grid(std::size_t points = 30);
// Log-spaced thresholds spanning the range of p(y_i) over the given targets.
std::vector<double> default_eps_grid(std::span<const double> y, const GpLogDensity& g,
                                     std::size_t points = 30);

MetricsReport full_report(std::span<const double> y, std::span<const double> y_hat,
                          const GpLogDensity& g, std::span<const double> eps_grid,
                          std::span<const double> omega_grid,
                          const DensityDistanceOptions& options = {});

}  // namespace rareloss
