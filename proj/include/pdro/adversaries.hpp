#ifndef PDRO_ADVERSARIES_HPP
#define PDRO_ADVERSARIES_HPP

#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pdro/data.hpp"
#include "pdro/numerics.hpp"

namespace pdro {

enum class AdversaryFamily { gaussian, bigram };

inline std::string to_string(AdversaryFamily f) { return f == AdversaryFamily::gaussian ? "gaussian" : "bigram"; }

inline AdversaryFamily parse_adversary_family(const std::string& s) {
  if (s == "gaussian") return AdversaryFamily::gaussian;
  if (s == "bigram") return AdversaryFamily::bigram;
  throw std::invalid_argument("unknown adversary family '" + s + "'");
}

/// Parametric generative model q_psi.
///
/// gaussian: psi is the location of an isotropic Gaussian over the input
/// features, with a fixed scale `sigma`. Only x is modeled; the label
/// conditional cancels in every density ratio.
///
/// bigram: psi holds transition logits, one row per context and one column
/// per next symbol. Contexts are the two label start symbols (rows 0 and 1)
/// followed by the vocabulary tokens (row 2 + t). Next symbols are the
/// vocabulary tokens followed by the end-of-sequence symbol (column
/// vocab_size). Each row is a conditional distribution after softmax.
struct AdversaryParams {
  AdversaryFamily family = AdversaryFamily::gaussian;
  RealVec psi;
  double sigma = 1.0;
  int vocab_size = 0;

  static AdversaryParams gaussian(RealVec location, double sigma) {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw std::invalid_argument("gaussian adversary: sigma must be positive");
    return AdversaryParams{AdversaryFamily::gaussian, std::move(location), sigma, 0};
  }

  /// Uniform bigram: every transition logit 0.
  static AdversaryParams uniform_bigram(int vocab_size) {
    if (vocab_size < 1) throw std::invalid_argument("bigram adversary: vocabulary must be non-empty");
    AdversaryParams p{AdversaryFamily::bigram, {}, 1.0, vocab_size};
    p.psi.assign(static_cast<std::size_t>(p.rows() * p.cols()), 0.0);
    return p;
  }

  // bigram layout
  int rows() const { return vocab_size + 2; }
  int cols() const { return vocab_size + 1; }
  int end_symbol() const { return vocab_size; }
  static int start_row(int label) { return label; }
  static int token_row(int token) { return token + 2; }
  std::size_t index(int row, int col) const { return static_cast<std::size_t>(row * cols() + col); }
};

/// Frozen MLE fit psi_0; the denominator of every importance ratio.
class AdversarySnapshot {
 public:
  explicit AdversarySnapshot(AdversaryParams params) : params_(std::move(params)) {}
  const AdversaryParams& params() const { return params_; }

 private:
  AdversaryParams params_;
};

namespace detail {

inline void require_compatible(const Example& e, const AdversaryParams& a) {
  if (a.family == AdversaryFamily::gaussian) {
    if (e.is_sequence()) throw std::invalid_argument("gaussian adversary cannot score a token sequence");
    if (e.features().size() != a.psi.size()) throw std::invalid_argument("gaussian adversary: dimension mismatch");
  } else {
    if (!e.is_sequence()) throw std::invalid_argument("bigram adversary cannot score real-valued features");
    if (e.label != 0 && e.label != 1) throw std::invalid_argument("bigram adversary: label must be 0 or 1");
    for (int t : e.tokens())
      if (t < 0 || t >= a.vocab_size) throw std::invalid_argument("bigram adversary: token outside vocabulary");
  }
}

/// Symbol transitions (context row, next column) traversed by an example.
template <typename Visit>
void for_each_transition(const Example& e, const AdversaryParams& a, Visit&& visit) {
  int row = AdversaryParams::start_row(e.label);
  for (int t : e.tokens()) {
    visit(row, t);
    row = AdversaryParams::token_row(t);
  }
  visit(row, a.end_symbol());
}

}  // namespace detail

/// Per-row log normalizers of a bigram adversary, computed once and reused
/// across many density evaluations with the same parameters.
class BigramNormalizers {
 public:
  explicit BigramNormalizers(const AdversaryParams& a) : a_(&a), log_z_(static_cast<std::size_t>(a.rows())) {
    for (int r = 0; r < a.rows(); ++r)
      log_z_[static_cast<std::size_t>(r)] =
          log_sum_exp(std::span<const double>(a.psi).subspan(a.index(r, 0), static_cast<std::size_t>(a.cols())));
  }

  double log_prob(int row, int col) const { return a_->psi[a_->index(row, col)] - log_z_[static_cast<std::size_t>(row)]; }

  double log_density(const Example& e) const {
    double lp = 0.0;
    detail::for_each_transition(e, *a_, [&](int r, int c) { lp += log_prob(r, c); });
    return lp;
  }

 private:
  const AdversaryParams* a_;
  RealVec log_z_;
};

inline double gaussian_log_density(const RealVec& x, const AdversaryParams& a) {
  const double var = a.sigma * a.sigma;
  double sq = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) sq += (x[j] - a.psi[j]) * (x[j] - a.psi[j]);
  const auto d = static_cast<double>(x.size());
  return -0.5 * d * std::log(2.0 * std::numbers::pi * var) - sq / (2.0 * var);
}

/// log q_psi(x, y). For the bigram family the label's start symbol is the
/// first context and the end symbol is scored after the last token.
inline double log_density(const Example& e, const AdversaryParams& a) {
  detail::require_compatible(e, a);
  if (a.family == AdversaryFamily::gaussian) return gaussian_log_density(e.features(), a);
  return BigramNormalizers(a).log_density(e);
}

/// log q_psi for every example of a batch, sharing the bigram normalizers.
inline RealVec log_densities(std::span<const Example* const> batch, const AdversaryParams& a) {
  RealVec out(batch.size());
  if (a.family == AdversaryFamily::gaussian) {
    for (std::size_t i = 0; i < batch.size(); ++i) {
      detail::require_compatible(*batch[i], a);
      out[i] = gaussian_log_density(batch[i]->features(), a);
    }
    return out;
  }
  const BigramNormalizers norms(a);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    detail::require_compatible(*batch[i], a);
    out[i] = norms.log_density(*batch[i]);
  }
  return out;
}

inline RealVec log_densities(const Dataset& d, const AdversaryParams& a) {
  std::vector<const Example*> ptrs;
  ptrs.reserve(d.size());
  for (const auto& e : d.examples) ptrs.push_back(&e);
  return log_densities(ptrs, a);
}

/// Adds scale * grad_psi log q_psi(e) into `out` (which has psi's size).
inline void accumulate_grad_log_density(const Example& e, const AdversaryParams& a, double scale, RealVec& out) {
  detail::require_compatible(e, a);
  if (a.family == AdversaryFamily::gaussian) {
    const double var = a.sigma * a.sigma;
    const RealVec& x = e.features();
    for (std::size_t j = 0; j < x.size(); ++j) out[j] += scale * (x[j] - a.psi[j]) / var;
    return;
  }
  detail::for_each_transition(e, a, [&](int r, int c) {
    const auto row = std::span<const double>(a.psi).subspan(a.index(r, 0), static_cast<std::size_t>(a.cols()));
    const RealVec p = softmax(row);
    for (int k = 0; k < a.cols(); ++k) out[a.index(r, k)] -= scale * p[static_cast<std::size_t>(k)];
    out[a.index(r, c)] += scale;
  });
}

/// Analytic gradient of log q_psi(e) with respect to psi.
inline RealVec grad_log_density(const Example& e, const AdversaryParams& a) {
  RealVec g(a.psi.size(), 0.0);
  accumulate_grad_log_density(e, a, 1.0, g);
  return g;
}

/// Maximum-likelihood fit of q_psi_0.
///
/// gaussian: location = empirical mean; sigma^2 = per-dimension population
/// variance averaged over dimensions. bigram: logits are the logs of
/// transition counts smoothed by `smoothing` (add-alpha).
inline AdversarySnapshot mle_fit(const Dataset& data, AdversaryFamily family, double smoothing = 0.1) {
  if (data.examples.empty()) throw std::invalid_argument("mle_fit: empty dataset");
  const auto n = static_cast<double>(data.size());
  if (family == AdversaryFamily::gaussian) {
    if (data.is_sequence()) throw std::invalid_argument("mle_fit: gaussian family needs real-valued features");
    const std::size_t dim = data.examples.front().features().size();
    RealVec mu(dim, 0.0);
    for (const auto& e : data.examples)
      for (std::size_t j = 0; j < dim; ++j) mu[j] += e.features()[j];
    for (double& m : mu) m /= n;
    double var = 0.0;
    for (const auto& e : data.examples)
      for (std::size_t j = 0; j < dim; ++j) var += (e.features()[j] - mu[j]) * (e.features()[j] - mu[j]);
    var /= n * static_cast<double>(dim);
    if (!(var > 0.0)) throw std::invalid_argument("mle_fit: degenerate data (zero variance)");
    return AdversarySnapshot(AdversaryParams::gaussian(std::move(mu), std::sqrt(var)));
  }
  if (!data.is_sequence()) throw std::invalid_argument("mle_fit: bigram family needs token sequences");
  if (smoothing < 0.0) throw std::invalid_argument("mle_fit: smoothing must be non-negative");
  AdversaryParams a = AdversaryParams::uniform_bigram(data.vocab_size);
  RealVec counts(a.psi.size(), smoothing);
  for (const auto& e : data.examples) {
    detail::require_compatible(e, a);
    detail::for_each_transition(e, a, [&](int r, int c) { counts[a.index(r, c)] += 1.0; });
  }
  for (int r = 0; r < a.rows(); ++r) {
    double row_total = 0.0;
    for (int c = 0; c < a.cols(); ++c) row_total += counts[a.index(r, c)];
    for (int c = 0; c < a.cols(); ++c) {
      const double cnt = counts[a.index(r, c)];
      // unseen rows without smoothing fall back to uniform; zero cells get a floor
      a.psi[a.index(r, c)] = row_total == 0.0 ? 0.0 : (cnt > 0.0 ? std::log(cnt) : -1e3);
    }
  }
  return AdversarySnapshot(std::move(a));
}

/// Draws (x, y) from a Gaussian adversary, with y from the given label marginal.
inline Example sample(const AdversaryParams& a, Rng& rng, std::span<const double> label_marginal) {
  if (a.family != AdversaryFamily::gaussian) throw std::invalid_argument("sample: only the gaussian family supports sampling");
  RealVec x(a.psi.size());
  for (std::size_t j = 0; j < x.size(); ++j) x[j] = a.psi[j] + a.sigma * rng.normal();
  const int y = static_cast<int>(rng.categorical(label_marginal));
  return Example{std::move(x), y, -1, {}};
}

/// KL between two isotropic Gaussians sharing sigma: |mu - mu0|^2 / (2 sigma^2).
inline double gaussian_kl(const AdversaryParams& a, const AdversaryParams& b) {
  if (a.family != AdversaryFamily::gaussian || b.family != AdversaryFamily::gaussian)
    throw std::invalid_argument("gaussian_kl: both adversaries must be gaussian");
  if (a.sigma != b.sigma) throw std::invalid_argument("gaussian_kl: sigma differs");
  if (a.psi.size() != b.psi.size()) throw std::invalid_argument("gaussian_kl: dimension mismatch");
  double sq = 0.0;
  for (std::size_t j = 0; j < a.psi.size(); ++j) sq += (a.psi[j] - b.psi[j]) * (a.psi[j] - b.psi[j]);
  return sq / (2.0 * a.sigma * a.sigma);
}

/// Projection of psi onto {KL(q_psi || q_psi0) <= kappa} along the segment to psi0.
///
/// Exterior points land on the boundary. The scale is nudged toward psi0 until
/// the rounded result is inside the ball, which makes the projection
/// idempotent bit for bit.
inline AdversaryParams project_onto_kl_ball(const AdversaryParams& psi, const AdversaryParams& psi0, double kappa) {
  if (!(kappa > 0.0)) throw std::invalid_argument("project_onto_kl_ball: kappa must be positive");
  if (gaussian_kl(psi, psi0) <= kappa) return psi;
  double dist = 0.0;
  for (std::size_t j = 0; j < psi.psi.size(); ++j) dist += (psi.psi[j] - psi0.psi[j]) * (psi.psi[j] - psi0.psi[j]);
  dist = std::sqrt(dist);
  double scale = std::sqrt(2.0 * kappa) * psi.sigma / dist;
  AdversaryParams out = psi;
  for (int attempt = 0; attempt < 64; ++attempt) {
    for (std::size_t j = 0; j < out.psi.size(); ++j) out.psi[j] = psi0.psi[j] + scale * (psi.psi[j] - psi0.psi[j]);
    if (gaussian_kl(out, psi0) <= kappa) return out;
    scale = std::nextafter(scale, 0.0);
  }
  return out;
}

}  // namespace pdro

#endif  // PDRO_ADVERSARIES_HPP
