#include <algorithm>
#include <cmath>

#include "rareloss/density.hpp"
#include "rareloss/error.hpp"

namespace rareloss {

std::size_t HistogramDensity::nonempty_bins() const {
  return static_cast<std::size_t>(
      std::count_if(counts.begin(), counts.end(), [](std::size_t c) { return c > 0; }));
}

HistogramDensity histogram_log_density(std::span<const double> y, std::size_t bins) {
  if (bins == 0) throw Error(ErrorCode::kInvalidInput, "histogram needs at least one bin");
  if (y.size() < bins) {
    throw Error(ErrorCode::kInvalidInput, "histogram needs at least as many samples (" +
                                              std::to_string(y.size()) + ") as bins (" +
                                              std::to_string(bins) + ")");
  }
  for (double v : y) {
    if (!std::isfinite(v)) throw Error(ErrorCode::kInvalidInput, "non-finite target value");
  }
  auto [lo_it, hi_it] = std::minmax_element(y.begin(), y.end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  if (!(hi > lo)) throw Error(ErrorCode::kDegenerateRange, "targets take fewer than two values");

  HistogramDensity h;
  h.sample_count = y.size();
  h.width = (hi - lo) / static_cast<double>(bins);
  h.edges.resize(bins + 1);
  for (std::size_t i = 0; i < bins; ++i) h.edges[i] = lo + static_cast<double>(i) * h.width;
  h.edges[bins] = hi;
  h.centers.resize(bins);
  for (std::size_t i = 0; i < bins; ++i) h.centers[i] = (h.edges[i] + h.edges[i + 1]) / 2;

  h.counts.assign(bins, 0);
  for (double v : y) {
    auto idx = static_cast<std::size_t>(
        std::min<double>(std::floor((v - lo) / h.width), static_cast<double>(bins - 1)));
    // Rounding in the division can land one bin off; settle against the edges.
    while (idx > 0 && v < h.edges[idx]) --idx;
    while (idx + 1 < bins && v >= h.edges[idx + 1]) ++idx;
    ++h.counts[idx];
  }

  const double norm = static_cast<double>(y.size()) * h.width;
  h.log_p.resize(bins);
  for (std::size_t i = 0; i < bins; ++i) {
    h.log_p[i] = h.counts[i] > 0 ? std::log(static_cast<double>(h.counts[i]) / norm)
                                 : kLogDensityPriorMean;
  }
  return h;
}

}  // namespace rareloss
