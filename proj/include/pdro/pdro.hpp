#ifndef PDRO_PDRO_HPP
#define PDRO_PDRO_HPP

#include <cmath>
#include <deque>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pdro/adversaries.hpp"
#include "pdro/data.hpp"
#include "pdro/models.hpp"
#include "pdro/numerics.hpp"
#include "pdro/training.hpp"

namespace pdro {

/// Adversary update rule.
///
/// bare: score-function ascent on the zero-sum payoff E_{q_psi}[loss].
/// kl_projected: bare followed by projection onto the KL ball of radius kappa.
/// relaxed: descent on the reverse-KL relaxation, i.e. ascent on the
///   exp(loss/tau)-weighted log-likelihood of the minibatch.
enum class PdroVariant { bare, kl_projected, relaxed };

inline std::string to_string(PdroVariant v) {
  switch (v) {
    case PdroVariant::bare: return "bare";
    case PdroVariant::kl_projected: return "kl_projected";
    case PdroVariant::relaxed: return "relaxed";
  }
  return "?";
}

inline PdroVariant parse_pdro_variant(const std::string& s) {
  if (s == "bare") return PdroVariant::bare;
  if (s == "kl_projected") return PdroVariant::kl_projected;
  if (s == "relaxed") return PdroVariant::relaxed;
  throw std::invalid_argument("unknown P-DRO variant '" + s + "'");
}

struct PdroConfig {
  TrainConfig train;
  double tau = 0.01;
  std::size_t window = 5;
  double adv_lr = 1e-4;
  double kappa = 1.0;
  PdroVariant variant = PdroVariant::relaxed;
  /// Samples per bare/kl_projected adversary step; 0 means the batch size.
  std::size_t bare_samples = 0;
  /// Upper bound on importance weights in the model step; 0 disables clipping.
  double weight_clip = 0.0;
  /// Add-alpha smoothing of the bigram MLE fit.
  double smoothing = 0.1;

  void validate() const {
    train.validate();
    if (!(tau > 0.0)) throw std::invalid_argument("tau must be positive");
    if (window < 1) throw std::invalid_argument("normalizer window must be at least 1");
    if (adv_lr < 0.0) throw std::invalid_argument("adversary learning rate must be non-negative");
    if (variant == PdroVariant::kl_projected && !(kappa > 0.0)) throw std::invalid_argument("kappa must be positive");
    if (weight_clip < 0.0) throw std::invalid_argument("weight clip must be non-negative");
  }

  void echo(std::map<std::string, std::string>& out) const {
    train.echo(out);
    const auto fmt = [](double v) {
      std::ostringstream s;
      s.precision(17);
      s << v;
      return s.str();
    };
    out["tau"] = fmt(tau);
    out["k"] = std::to_string(window);
    out["lambda"] = fmt(adv_lr);
    out["kappa"] = fmt(kappa);
    out["variant"] = to_string(variant);
    out["bare_samples"] = std::to_string(bare_samples);
    out["weight_clip"] = fmt(weight_clip);
    out["smoothing"] = fmt(smoothing);
  }
};

/// Raised when exp(loss / tau) cannot be represented.
class NormalizerOverflow : public NumericError {
 public:
  using NumericError::NumericError;
};

/// Running estimate of Z = E_p exp(loss / tau) over the k most recent minibatches.
///
/// Each slot keeps log(sum_i exp(loss_i / tau)) and the batch size, so the
/// estimate never overflows internally. Before k batches have been seen the
/// average runs over the batches available.
class RunningNormalizer {
 public:
  explicit RunningNormalizer(std::size_t window) : window_(window) {
    if (window == 0) throw std::invalid_argument("RunningNormalizer: window must be positive");
  }

  std::size_t window() const { return window_; }
  std::size_t batches() const { return slots_.size(); }

  /// Adds a batch and returns log Z~.
  double push(std::span<const double> losses, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("RunningNormalizer: tau must be positive");
    if (losses.empty()) throw std::invalid_argument("RunningNormalizer: empty batch");
    require_finite(losses, "RunningNormalizer losses");
    RealVec scaled(losses.size());
    for (std::size_t i = 0; i < losses.size(); ++i) scaled[i] = losses[i] / tau;
    slots_.push_back(Slot{log_sum_exp(scaled), losses.size()});
    if (slots_.size() > window_) slots_.pop_front();
    return log_value();
  }

  double log_value() const {
    if (slots_.empty()) throw std::logic_error("RunningNormalizer: no batches pushed");
    RealVec logs;
    std::size_t count = 0;
    for (const auto& s : slots_) {
      logs.push_back(s.log_sum);
      count += s.count;
    }
    return log_sum_exp(logs) - std::log(static_cast<double>(count));
  }

  double value() const {
    const double z = std::exp(log_value());
    if (!std::isfinite(z))
      throw NormalizerOverflow("exp(loss/tau) overflows double precision; raise tau (log Z = " +
                               std::to_string(log_value()) + ")");
    return z;
  }

 private:
  struct Slot {
    double log_sum;
    std::size_t count;
  };
  std::size_t window_;
  std::deque<Slot> slots_;
};

/// Pushes a batch into the normalizer and returns Z~ itself.
inline double update_normalizer(RunningNormalizer& norm, std::span<const double> batch_losses, double tau) {
  norm.push(batch_losses, tau);
  return norm.value();
}

/// log(q_psi / q_psi0) for each batch example.
inline RealVec importance_log_weights(std::span<const Example* const> batch, const AdversaryParams& psi,
                                      const AdversaryParams& psi0) {
  if (psi.family != psi0.family) throw std::invalid_argument("importance weights: adversary families differ");
  const RealVec num = log_densities(batch, psi);
  const RealVec den = log_densities(batch, psi0);
  RealVec out(batch.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = num[i] - den[i];
  require_finite(out, "importance log-weights");
  return out;
}

/// q_psi / q_psi0 for each batch example, exponentiated from log space.
inline RealVec importance_weights(std::span<const Example* const> batch, const AdversaryParams& psi,
                                  const AdversaryParams& psi0) {
  RealVec w = importance_log_weights(batch, psi, psi0);
  for (double& v : w) v = std::exp(v);
  if (!all_finite(w)) throw NumericError("importance weights overflow");
  return w;
}

/// theta <- theta - lr * (1/|B|) sum_i w_i grad loss_i (through `updater`).
inline void model_step(std::span<const Example* const> batch, ModelParams& model, std::span<const double> weights,
                       ModelUpdater& updater) {
  if (batch.size() != weights.size()) throw std::invalid_argument("model_step: weight count mismatch");
  const auto n = static_cast<double>(batch.size());
  RealVec coeffs(weights.size());
  for (std::size_t i = 0; i < coeffs.size(); ++i) coeffs[i] = weights[i] / n;
  updater.apply(model, weighted_loss_gradient(batch, model, coeffs));
}

/// One ascent step on the exp(loss/tau)-weighted log-likelihood:
/// psi <- psi + lr * (1/|B|) sum_i exp(loss_i / tau - log Z~) grad log q_psi(x_i, y_i).
inline AdversaryParams adversary_step_relaxed(std::span<const Example* const> batch, std::span<const double> losses,
                                              const AdversaryParams& psi, double log_z, double tau, double lr) {
  if (batch.size() != losses.size()) throw std::invalid_argument("adversary_step_relaxed: loss count mismatch");
  if (!(tau > 0.0)) throw std::invalid_argument("adversary_step_relaxed: tau must be positive");
  if (!std::isfinite(log_z)) throw NumericError("adversary_step_relaxed: non-finite normalizer");
  const auto n = static_cast<double>(batch.size());
  RealVec grad(psi.psi.size(), 0.0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double v = std::exp(losses[i] / tau - log_z);
    if (!std::isfinite(v)) throw NormalizerOverflow("adversary weight overflow; raise tau or the window size");
    accumulate_grad_log_density(*batch[i], psi, v / n, grad);
  }
  AdversaryParams out = psi;
  for (std::size_t j = 0; j < grad.size(); ++j) out.psi[j] += lr * grad[j];
  require_finite(out.psi, "adversary parameters");
  return out;
}

/// Convenience form that scores the batch under `model` and uses a supplied Z~ (> 0).
inline AdversaryParams adversary_step_relaxed(std::span<const Example* const> batch, const ModelParams& model,
                                              const AdversaryParams& psi, double z, double tau, double lr) {
  if (!(z > 0.0)) throw std::invalid_argument("adversary_step_relaxed: normalizer must be positive");
  return adversary_step_relaxed(batch, batch_losses(batch, model), psi, std::log(z), tau, lr);
}

/// Score-function ascent on E_{q_psi}[loss(x, y; theta)]: draws `n_samples`
/// points from q_psi (labels from `label_marginal`) and moves psi by
/// lr * mean(loss * grad log q_psi). The ratio p / q_psi0 is taken as 1.
inline AdversaryParams adversary_step_bare(std::span<const double> label_marginal, const ModelParams& model,
                                           const AdversaryParams& psi, double lr, Rng& rng, std::size_t n_samples) {
  if (psi.family != AdversaryFamily::gaussian)
    throw std::invalid_argument("adversary_step_bare: only the gaussian family is supported");
  if (n_samples == 0) throw std::invalid_argument("adversary_step_bare: need at least one sample");
  RealVec grad(psi.psi.size(), 0.0);
  const auto n = static_cast<double>(n_samples);
  for (std::size_t s = 0; s < n_samples; ++s) {
    const Example draw = sample(psi, rng, label_marginal);
    accumulate_grad_log_density(draw, psi, loss(draw, model) / n, grad);
  }
  AdversaryParams out = psi;
  for (std::size_t j = 0; j < grad.size(); ++j) out.psi[j] += lr * grad[j];
  require_finite(out.psi, "adversary parameters");
  return out;
}

inline AdversaryParams adversary_step_kl_projected(std::span<const double> label_marginal, const ModelParams& model,
                                                   const AdversaryParams& psi, const AdversaryParams& psi0,
                                                   double kappa, double lr, Rng& rng, std::size_t n_samples) {
  return project_onto_kl_ball(adversary_step_bare(label_marginal, model, psi, lr, rng, n_samples), psi0, kappa);
}

/// Simultaneous-gradient P-DRO game.
///
/// psi_0 is the MLE fit of the adversary family on the training split and
/// psi starts there. Every minibatch drives one model step on the
/// importance-weighted loss and one adversary step (chosen by the variant),
/// both computed from the pre-update (theta, psi).
inline RunHistory train_pdro(const PdroConfig& cfg, const DatasetSplits& data, ModelParams model_init,
                             AdversaryFamily family) {
  cfg.validate();
  const AdversarySnapshot psi0 = mle_fit(data.train, family, cfg.smoothing);
  AdversaryParams psi = psi0.params();
  RunningNormalizer normalizer(cfg.window);
  ModelUpdater updater(cfg.train.model_optimizer, cfg.train.model_lr);
  Rng sample_rng(cfg.train.seed, kAdversarySampleStream);
  const RealVec label_marginal = data.train.label_marginal();

  TrainingHooks hooks;
  hooks.step = [&](const Batch& batch, ModelParams& model) {
    const RealVec losses = batch_losses(batch, model);
    RealVec weights = importance_weights(batch, psi, psi0.params());
    if (cfg.weight_clip > 0.0)
      for (double& w : weights) w = std::min(w, cfg.weight_clip);

    AdversaryParams next = psi;
    if (cfg.variant == PdroVariant::relaxed) {
      const double log_z = normalizer.push(losses, cfg.tau);
      next = adversary_step_relaxed(batch, losses, psi, log_z, cfg.tau, cfg.adv_lr);
    } else {
      const std::size_t n_samples = cfg.bare_samples == 0 ? batch.size() : cfg.bare_samples;
      next = cfg.variant == PdroVariant::bare
                 ? adversary_step_bare(label_marginal, model, psi, cfg.adv_lr, sample_rng, n_samples)
                 : adversary_step_kl_projected(label_marginal, model, psi, psi0.params(), cfg.kappa, cfg.adv_lr,
                                               sample_rng, n_samples);
    }
    model_step(batch, model, weights, updater);
    psi = std::move(next);
    return mean(losses);
  };
  hooks.valid_log_weights = [&](const Dataset& valid, const ModelParams&) {
    const RealVec num = log_densities(valid, psi);
    const RealVec den = log_densities(valid, psi0.params());
    RealVec out(num.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = num[i] - den[i];
    return out;
  };

  RunHistory h = run_training(cfg.train, data, std::move(model_init), hooks);
  h.method = "pdro_" + to_string(cfg.variant);
  cfg.echo(h.config);
  h.config["adversary"] = to_string(family);
  h.psi0 = psi0;
  h.final_adversary = psi;
  return h;
}

}  // namespace pdro

#endif  // PDRO_PDRO_HPP
