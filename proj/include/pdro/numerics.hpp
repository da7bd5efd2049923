#ifndef PDRO_NUMERICS_HPP
#define PDRO_NUMERICS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pdro {

using RealVec = std::vector<double>;

/// Raised when a value that must stay finite (losses, weights, parameters) does not.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline void require_finite(std::span<const double> v, const std::string& what) {
  if (!all_finite(v)) throw NumericError(what + ": non-finite value");
}

/// Seeded generator: splitmix64 seeding into xoshiro256**.
///
/// Both algorithms are fully specified by their published constants, so a
/// given (seed, stream) yields the same sequence on every platform. Normal
/// and integer draws are implemented here rather than through <random>
/// distributions, whose output is implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) : seed_(seed) {
    std::uint64_t sm = seed ^ (stream * 0xD1B54A32D192ED03ULL);
    for (auto& s : state_) s = splitmix64(sm);
  }

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n), unbiased (Lemire's rejection method).
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_int: empty range");
    __uint128_t m = static_cast<__uint128_t>(next_u64()) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (low < threshold) {
        m = static_cast<__uint128_t>(next_u64()) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(angle);
    has_spare_ = true;
    return r * std::cos(angle);
  }

  /// Draws an index from an unnormalized non-negative weight vector.
  std::size_t categorical(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    if (!(total > 0.0)) throw std::invalid_argument("categorical: weights must have positive mass");
    double u = uniform() * total;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (u < weights[i]) return i;
      u -= weights[i];
    }
    // rounding can leave u marginally above the last bucket
    for (std::size_t i = weights.size(); i-- > 0;)
      if (weights[i] > 0.0) return i;
    return weights.size() - 1;
  }

  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  static std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t state_[4]{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Stable log(sum(exp(v))).
inline double log_sum_exp(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("log_sum_exp: empty input");
  require_finite(values, "log_sum_exp");
  const double m = *std::max_element(values.begin(), values.end());
  double s = 0.0;
  for (double v : values) s += std::exp(v - m);
  return m + std::log(s);
}

inline RealVec softmax(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("softmax: empty input");
  require_finite(logits, "softmax");
  const double m = *std::max_element(logits.begin(), logits.end());
  RealVec out(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    s += out[i];
  }
  for (double& o : out) o /= s;
  return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double squared_norm(std::span<const double> a) { return dot(a, a); }

/// log(1 + exp(z)) without overflow.
inline double log1p_exp(double z) {
  if (z > 0.0) return z + std::log1p(std::exp(-z));
  return std::log1p(std::exp(z));
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double mean(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("mean: empty input");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Sample standard deviation (n-1 denominator); 0 for fewer than two values.
inline double sample_stddev(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

using ScalarFn = std::function<double(const RealVec&)>;
using GradientFn = std::function<RealVec(const RealVec&)>;

/// Max over coordinates of the relative error between `grad` and central
/// differences of `f`, with step eps * (1 + |x_i|).
///
/// The relative error of a coordinate is |g - fd| / max(|g| + |fd|, floor),
/// the floor keeping coordinates with a vanishing gradient from reporting
/// noise as error.
inline double check_gradient(const ScalarFn& f, const GradientFn& grad, const RealVec& point,
                             double eps = 1e-5, double floor = 1e-8) {
  const RealVec g = grad(point);
  if (g.size() != point.size()) throw std::invalid_argument("check_gradient: gradient size mismatch");
  require_finite(g, "check_gradient: analytic gradient");
  double worst = 0.0;
  RealVec x = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double h = eps * (1.0 + std::abs(point[i]));
    x[i] = point[i] + h;
    const double fp = f(x);
    x[i] = point[i] - h;
    const double fm = f(x);
    x[i] = point[i];
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("check_gradient: non-finite function value");
    const double fd = (fp - fm) / (2.0 * h);
    const double denom = std::max(std::abs(g[i]) + std::abs(fd), floor);
    worst = std::max(worst, std::abs(g[i] - fd) / denom);
  }
  return worst;
}

}  // namespace pdro

#endif  // PDRO_NUMERICS_HPP
