#ifndef PDRO_BASELINES_HPP
#define PDRO_BASELINES_HPP

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pdro/data.hpp"
#include "pdro/models.hpp"
#include "pdro/numerics.hpp"
#include "pdro/pdro.hpp"
#include "pdro/training.hpp"

namespace pdro {

namespace detail {
inline std::string format_real(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}
}  // namespace detail

/// Plain minibatch SGD on the unweighted loss. Checkpoints carry uniform weights.
inline RunHistory train_erm(const TrainConfig& cfg, const DatasetSplits& data, ModelParams model_init) {
  ModelUpdater updater(cfg.model_optimizer, cfg.model_lr);
  TrainingHooks hooks;
  hooks.step = [&](const Batch& batch, ModelParams& model) {
    const RealVec losses = batch_losses(batch, model);
    const RealVec ones(batch.size(), 1.0);
    model_step(batch, model, ones, updater);
    return mean(losses);
  };
  hooks.valid_log_weights = [](const Dataset& valid, const ModelParams&) { return RealVec(valid.size(), 0.0); };
  RunHistory h = run_training(cfg, data, std::move(model_init), hooks);
  h.method = "erm";
  return h;
}

// ---------------------------------------------------------------------------
// Non-parametric KL-constrained DRO.

enum class TauClip { none, low, high };

inline std::string to_string(TauClip c) {
  switch (c) {
    case TauClip::none: return "none";
    case TauClip::low: return "low";
    case TauClip::high: return "high";
  }
  return "?";
}

struct NonParamSolution {
  /// Worst-case distribution over the batch, summing to 1.
  RealVec weights;
  double tau = 0.0;
  double achieved_kl = 0.0;
  TauClip clip = TauClip::none;
};

constexpr double kLog10TauMin = -10.0;
constexpr double kLog10TauMax = 10.0;
constexpr int kTauBisectionSteps = 100;

/// q_i proportional to exp(loss_i / tau), normalized over the batch.
inline RealVec tilted_weights(std::span<const double> losses, double tau) {
  RealVec scaled(losses.size());
  for (std::size_t i = 0; i < losses.size(); ++i) scaled[i] = losses[i] / tau;
  return softmax(scaled);
}

/// KL(q || uniform) = sum_i q_i log(n q_i) for q = tilted_weights(losses, tau).
inline double tilted_batch_kl(std::span<const double> losses, double tau) {
  RealVec scaled(losses.size());
  for (std::size_t i = 0; i < losses.size(); ++i) scaled[i] = losses[i] / tau;
  const double lse = log_sum_exp(scaled);
  const double log_n = std::log(static_cast<double>(losses.size()));
  double kl = 0.0;
  for (double a : scaled) {
    const double log_q = a - lse;
    const double q = std::exp(log_q);
    if (q > 0.0) kl += q * (log_q + log_n);
  }
  return std::max(kl, 0.0);
}

/// Exponentially tilted worst case within a KL ball around the batch.
///
/// Finds tau* by bisection on log10(tau) in [-10, 10] so that the batch KL to
/// uniform equals kappa. The KL decreases in tau. When kappa is out of reach
/// tau* is clipped: high when even tau = 1e10 over-shoots kappa (or all
/// losses tie), low when even tau = 1e-10 falls short.
inline NonParamSolution nonparam_inner(std::span<const double> losses, double kappa) {
  if (!(kappa > 0.0)) throw std::invalid_argument("nonparam_inner: kappa must be positive");
  if (losses.empty()) throw std::invalid_argument("nonparam_inner: empty batch");
  require_finite(losses, "nonparam_inner losses");
  const auto kl_at = [&](double log10_tau) { return tilted_batch_kl(losses, std::pow(10.0, log10_tau)); };

  NonParamSolution sol;
  const bool all_equal = std::all_of(losses.begin(), losses.end(), [&](double l) { return l == losses[0]; });
  double log10_tau = 0.0;
  if (all_equal || kl_at(kLog10TauMax) >= kappa) {
    log10_tau = kLog10TauMax;
    sol.clip = TauClip::high;
  } else if (kl_at(kLog10TauMin) <= kappa) {
    log10_tau = kLog10TauMin;
    sol.clip = TauClip::low;
  } else {
    double lo = kLog10TauMin;
    double hi = kLog10TauMax;
    for (int it = 0; it < kTauBisectionSteps; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (kl_at(mid) > kappa)
        lo = mid;
      else
        hi = mid;
    }
    log10_tau = 0.5 * (lo + hi);
  }
  sol.tau = std::pow(10.0, log10_tau);
  sol.weights = tilted_weights(losses, sol.tau);
  sol.achieved_kl = tilted_batch_kl(losses, sol.tau);
  return sol;
}

/// Per batch: worst-case weights from nonparam_inner, scaled by the batch
/// size so uniform weights reproduce ERM, then a weighted model step.
/// Validation log-weights are the non-parametric worst case of the current
/// model on the validation set, log(n q_i).
inline RunHistory train_nonparam(const TrainConfig& cfg, const DatasetSplits& data, ModelParams model_init,
                                 double kappa) {
  if (!(kappa > 0.0)) throw std::invalid_argument("train_nonparam: kappa must be positive");
  ModelUpdater updater(cfg.model_optimizer, cfg.model_lr);
  TrainingHooks hooks;
  hooks.step = [&](const Batch& batch, ModelParams& model) {
    const RealVec losses = batch_losses(batch, model);
    RealVec weights = nonparam_inner(losses, kappa).weights;
    const auto n = static_cast<double>(batch.size());
    for (double& w : weights) w *= n;
    model_step(batch, model, weights, updater);
    return mean(losses);
  };
  hooks.valid_log_weights = [&](const Dataset& valid, const ModelParams& model) {
    RealVec losses;
    losses.reserve(valid.size());
    for (const auto& e : valid.examples) losses.push_back(loss(e, model));
    const RealVec q = nonparam_inner(losses, kappa).weights;
    const double log_n = std::log(static_cast<double>(q.size()));
    RealVec out(q.size());
    // a zero weight would give -inf; floor it far below any realistic ratio
    for (std::size_t i = 0; i < q.size(); ++i) out[i] = q[i] > 0.0 ? std::log(q[i]) + log_n : -700.0;
    return out;
  };
  RunHistory h = run_training(cfg, data, std::move(model_init), hooks);
  h.method = "nonparam";
  h.config["kappa"] = detail::format_real(kappa);
  return h;
}

// ---------------------------------------------------------------------------
// Online Group-DRO with exponentiated-gradient group weights.

/// Simplex over evaluation groups plus the EG step size.
struct GroupWeights {
  std::vector<GroupId> groups;
  RealVec weights;
  double eta = 0.1;

  static GroupWeights uniform(std::vector<GroupId> groups, double eta) {
    if (groups.empty()) throw std::invalid_argument("GroupWeights: no groups");
    std::sort(groups.begin(), groups.end());
    groups.erase(std::unique(groups.begin(), groups.end()), groups.end());
    GroupWeights gw;
    gw.weights.assign(groups.size(), 1.0 / static_cast<double>(groups.size()));
    gw.groups = std::move(groups);
    gw.eta = eta;
    return gw;
  }

  std::size_t index(GroupId g) const {
    auto it = std::lower_bound(groups.begin(), groups.end(), g);
    if (it == groups.end() || *it != g) throw std::out_of_range("group " + std::to_string(g) + " has no weight");
    return static_cast<std::size_t>(it - groups.begin());
  }
};

namespace detail {

/// EG update: present groups are multiplied by exp(eta * mean_loss) and
/// rescaled to keep their joint mass; absent groups keep their weight.
inline void exponentiated_gradient_update(GroupWeights& gw, std::span<const double> group_loss,
                                          const std::vector<bool>& present) {
  double present_mass = 0.0;
  double updated_mass = 0.0;
  RealVec updated(gw.weights.size(), 0.0);
  for (std::size_t g = 0; g < gw.weights.size(); ++g) {
    if (!present[g]) continue;
    present_mass += gw.weights[g];
    updated[g] = gw.weights[g] * std::exp(gw.eta * group_loss[g]);
    updated_mass += updated[g];
  }
  if (!std::isfinite(updated_mass)) throw NumericError("group weights overflow; lower eta");
  if (updated_mass > 0.0)
    for (std::size_t g = 0; g < gw.weights.size(); ++g)
      if (present[g]) gw.weights[g] = updated[g] / updated_mass * present_mass;
  double total = 0.0;
  for (double w : gw.weights) total += w;
  for (double& w : gw.weights) w /= total;
}

}  // namespace detail

/// One Group-DRO step with hard group assignments: EG update of the group
/// weights from per-group mean batch losses, then a model step on
/// sum_g w_g * mean_loss_g.
inline void groupdro_step(std::span<const Example* const> batch, ModelParams& model, GroupWeights& gw,
                          const GroupingScheme& grouping, ModelUpdater& updater) {
  const std::size_t k = gw.weights.size();
  std::vector<std::size_t> idx(batch.size());
  RealVec sum(k, 0.0);
  RealVec count(k, 0.0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    idx[i] = gw.index(grouping(batch[i]->group));
    sum[idx[i]] += loss(*batch[i], model);
    count[idx[i]] += 1.0;
  }
  RealVec group_loss(k, 0.0);
  std::vector<bool> present(k, false);
  for (std::size_t g = 0; g < k; ++g)
    if (count[g] > 0.0) {
      group_loss[g] = sum[g] / count[g];
      present[g] = true;
    }
  detail::exponentiated_gradient_update(gw, group_loss, present);
  RealVec coeffs(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) coeffs[i] = gw.weights[idx[i]] / count[idx[i]];
  updater.apply(model, weighted_loss_gradient(batch, model, coeffs));
}

/// Group-DRO over soft pseudo-groups: each example carries a posterior over
/// the groups of `gw`, and per-group losses are posterior-weighted means.
inline void groupdro_soft_step(std::span<const Example* const> batch, ModelParams& model, GroupWeights& gw,
                               ModelUpdater& updater) {
  const std::size_t k = gw.weights.size();
  for (const Example* e : batch) {
    if (e->posteriors.size() != k) throw std::invalid_argument("groupdro_soft_step: posterior row has the wrong length");
    double s = 0.0;
    for (double p : e->posteriors) {
      if (!(p >= 0.0) || !std::isfinite(p)) throw std::invalid_argument("groupdro_soft_step: malformed posterior");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-6) throw std::invalid_argument("groupdro_soft_step: posterior row does not sum to 1");
  }
  RealVec losses(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) losses[i] = loss(*batch[i], model);
  RealVec sum(k, 0.0);
  RealVec mass(k, 0.0);
  for (std::size_t i = 0; i < batch.size(); ++i)
    for (std::size_t g = 0; g < k; ++g) {
      sum[g] += batch[i]->posteriors[g] * losses[i];
      mass[g] += batch[i]->posteriors[g];
    }
  RealVec group_loss(k, 0.0);
  std::vector<bool> present(k, false);
  for (std::size_t g = 0; g < k; ++g)
    if (mass[g] > 0.0) {
      group_loss[g] = sum[g] / mass[g];
      present[g] = true;
    }
  detail::exponentiated_gradient_update(gw, group_loss, present);
  RealVec coeffs(batch.size(), 0.0);
  for (std::size_t i = 0; i < batch.size(); ++i)
    for (std::size_t g = 0; g < k; ++g)
      if (present[g]) coeffs[i] += gw.weights[g] * batch[i]->posteriors[g] / mass[g];
  updater.apply(model, weighted_loss_gradient(batch, model, coeffs));
}

/// Oracle DRO: Group-DRO on the (mapped) ground-truth groups.
inline RunHistory train_groupdro(const TrainConfig& cfg, const DatasetSplits& data, ModelParams model_init, double eta,
                                 const GroupingScheme& grouping) {
  std::vector<GroupId> groups;
  for (const auto& [raw, mapped] : grouping.mapping) groups.push_back(mapped);
  GroupWeights gw = GroupWeights::uniform(groups, eta);
  ModelUpdater updater(cfg.model_optimizer, cfg.model_lr);
  TrainingHooks hooks;
  hooks.step = [&](const Batch& batch, ModelParams& model) {
    const RealVec losses = batch_losses(batch, model);
    groupdro_step(batch, model, gw, grouping, updater);
    return mean(losses);
  };
  hooks.valid_log_weights = [](const Dataset& valid, const ModelParams&) { return RealVec(valid.size(), 0.0); };
  RunHistory h = run_training(cfg, data, std::move(model_init), hooks);
  h.method = "groupdro";
  h.config["eta"] = detail::format_real(eta);
  return h;
}

/// Group-DRO over externally supplied soft groupings (stand-in for topic CVaR).
inline RunHistory train_groupdro_soft(const TrainConfig& cfg, const DatasetSplits& data, ModelParams model_init,
                                      double eta) {
  if (data.train.examples.empty() || data.train.examples.front().posteriors.empty())
    throw std::invalid_argument("train_groupdro_soft: training examples carry no posteriors");
  const std::size_t k = data.train.examples.front().posteriors.size();
  std::vector<GroupId> groups(k);
  for (std::size_t g = 0; g < k; ++g) groups[g] = static_cast<GroupId>(g);
  GroupWeights gw = GroupWeights::uniform(groups, eta);
  ModelUpdater updater(cfg.model_optimizer, cfg.model_lr);
  TrainingHooks hooks;
  hooks.step = [&](const Batch& batch, ModelParams& model) {
    const RealVec losses = batch_losses(batch, model);
    groupdro_soft_step(batch, model, gw, updater);
    return mean(losses);
  };
  hooks.valid_log_weights = [](const Dataset& valid, const ModelParams&) { return RealVec(valid.size(), 0.0); };
  RunHistory h = run_training(cfg, data, std::move(model_init), hooks);
  h.method = "groupdro_soft";
  h.config["eta"] = detail::format_real(eta);
  return h;
}

/// Posterior rows equal to the one-hot distractor indicator of each example
/// (pseudo-group 1 if the sequence contains `distractor`, else 0).
inline void attach_distractor_posteriors(Dataset& d, int distractor) {
  for (auto& e : d.examples) {
    const bool has = std::find(e.tokens().begin(), e.tokens().end(), distractor) != e.tokens().end();
    e.posteriors = has ? RealVec{0.0, 1.0} : RealVec{1.0, 0.0};
  }
}

}  // namespace pdro

#endif  // PDRO_BASELINES_HPP
