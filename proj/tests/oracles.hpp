#ifndef PDRO_TESTS_ORACLES_HPP
#define PDRO_TESTS_ORACLES_HPP

// Reference computations written without the library's numerics, used as
// expected values by the unit and acceptance tests.

#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

/// exp(l_i / tau) normalized, in long double.
inline std::vector<long double> tilted(const std::vector<double>& losses, long double tau) {
  long double mx = losses[0] / tau;
  for (double l : losses) mx = std::max(mx, l / tau);
  std::vector<long double> q(losses.size());
  long double s = 0;
  for (std::size_t i = 0; i < q.size(); ++i) s += q[i] = std::exp(losses[i] / tau - mx);
  for (auto& v : q) v /= s;
  return q;
}

inline long double kl_to_uniform(const std::vector<long double>& q) {
  const long double n = static_cast<long double>(q.size());
  long double kl = 0;
  for (long double v : q)
    if (v > 0) kl += v * std::log(n * v);
  return kl;
}

struct GridSolution {
  std::vector<double> weights;
  double log10_tau = 0;
  double kl = 0;
  int clip = 0;  // -1 low, +1 high, 0 interior
};

/// Grid search over `points` equally spaced values of log10(tau) in
/// [-10, 10] for the one whose batch KL is closest to kappa. The grid is
/// scanned in two passes (every `stride`-th point, then every point of the
/// bracketing cell), which visits the same minimizer as a full scan because
/// the KL decreases in tau.
inline GridSolution nonparam_grid(const std::vector<double>& losses, double kappa, long points = 1000000,
                                  long stride = 1000) {
  const auto at = [&](long j) { return -10.0L + 20.0L * static_cast<long double>(j) / static_cast<long double>(points - 1); };
  const auto kl = [&](long j) { return kl_to_uniform(tilted(losses, std::pow(10.0L, at(j)))); };
  GridSolution out;
  long best = 0;
  if (kl(points - 1) >= kappa) {
    best = points - 1;
    out.clip = 1;
  } else if (kl(0) <= kappa) {
    best = 0;
    out.clip = -1;
  } else {
    long lo = 0;
    for (long j = stride; j < points; j += stride) {
      if (kl(j) <= kappa) break;
      lo = j;
    }
    const long hi = std::min(points - 1, lo + stride);
    long double best_gap = 1e300L;
    for (long j = lo; j <= hi; ++j) {
      const long double gap = std::abs(kl(j) - kappa);
      if (gap < best_gap) {
        best_gap = gap;
        best = j;
      }
    }
  }
  const auto q = tilted(losses, std::pow(10.0L, at(best)));
  out.weights.assign(q.begin(), q.end());
  out.log10_tau = static_cast<double>(at(best));
  out.kl = static_cast<double>(kl_to_uniform(q));
  return out;
}

}  // namespace oracle

#endif  // PDRO_TESTS_ORACLES_HPP
