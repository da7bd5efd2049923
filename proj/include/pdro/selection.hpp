#ifndef PDRO_SELECTION_HPP
#define PDRO_SELECTION_HPP

#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pdro/data.hpp"
#include "pdro/training.hpp"

namespace pdro {

/// Default validation-KL threshold: an adversary may concentrate on no less
/// than a tenth of the validation set.
inline const double kDefaultValidKl = std::log(10.0);

/// Which per-example statistic the selection criteria average.
enum class SelectionStat { zero_one, nll };

inline SelectionStat parse_selection_stat(const std::string& s) {
  if (s == "zero_one" || s == "error") return SelectionStat::zero_one;
  if (s == "nll" || s == "loss") return SelectionStat::nll;
  throw std::invalid_argument("unknown selection statistic '" + s + "'");
}

inline const RealVec& statistic(const CheckpointRecord& r, SelectionStat stat) {
  return stat == SelectionStat::zero_one ? r.errors : r.losses;
}

/// Monte-Carlo estimate of KL(q_psi || p) on validation, with q_psi/q_psi0
/// standing in for q_psi/p: mean of w log w.
inline double adversary_valid_kl(const CheckpointRecord& r) {
  if (r.log_weights.empty()) throw std::invalid_argument("adversary_valid_kl: empty record");
  require_finite(r.log_weights, "adversary_valid_kl");
  double s = 0.0;
  for (double lw : r.log_weights) s += std::exp(lw) * lw;
  return s / static_cast<double>(r.log_weights.size());
}

/// Indices of records whose adversary passes the validation-KL filter.
/// Record 0 (psi_0) always passes.
inline std::vector<std::size_t> filter_adversaries(std::span<const CheckpointRecord> records,
                                                   double kappa_valid = kDefaultValidKl) {
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (i == 0 || adversary_valid_kl(records[i]) <= kappa_valid) kept.push_back(i);
  return kept;
}

/// Weighted mean (1/n) sum_i exp(log_w_i) * stat_i.
inline double reweighted_mean(std::span<const double> log_weights, std::span<const double> stat) {
  if (log_weights.size() != stat.size()) throw std::invalid_argument("validation vectors are not aligned");
  double s = 0.0;
  for (std::size_t i = 0; i < stat.size(); ++i) s += std::exp(log_weights[i]) * stat[i];
  return s / static_cast<double>(stat.size());
}

/// Max over adversaries of the reweighted validation statistic of one model.
inline double robust_valid_loss(std::span<const double> model_stat, std::span<const CheckpointRecord* const> adversaries) {
  if (adversaries.empty()) throw std::invalid_argument("robust_valid_loss: no adversaries");
  double worst = -std::numeric_limits<double>::infinity();
  for (const CheckpointRecord* a : adversaries) worst = std::max(worst, reweighted_mean(a->log_weights, model_stat));
  return worst;
}

struct SelectionOptions {
  SelectionStat stat = SelectionStat::zero_one;
  /// Validation-KL threshold; infinity disables the filter.
  double kappa_valid = kDefaultValidKl;
};

namespace detail {

/// scores[s][a]: reweighted validation statistic of checkpoint s under the
/// adversary of record a. Per-example statistics are the only state needed.
inline std::vector<RealVec> score_matrix(const RunHistory& h, SelectionStat stat) {
  const std::size_t n = h.records.size();
  std::vector<RealVec> weights(n);
  for (std::size_t a = 0; a < n; ++a) {
    weights[a].resize(h.records[a].log_weights.size());
    for (std::size_t i = 0; i < weights[a].size(); ++i) weights[a][i] = std::exp(h.records[a].log_weights[i]);
  }
  std::vector<RealVec> scores(n, RealVec(n, 0.0));
  for (std::size_t s = 0; s < n; ++s) {
    const RealVec& x = statistic(h.records[s], stat);
    for (std::size_t a = 0; a < n; ++a) {
      if (weights[a].size() != x.size()) throw std::invalid_argument("validation vectors are not aligned");
      double acc = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) acc += weights[a][i] * x[i];
      scores[s][a] = acc / static_cast<double>(x.size());
    }
  }
  return scores;
}

inline double max_over(const RealVec& row, const std::vector<std::size_t>& pool) {
  double worst = -std::numeric_limits<double>::infinity();
  for (std::size_t a : pool) worst = std::max(worst, row[a]);
  return worst;
}

/// Filtered adversary indices among records 0..upto, given precomputed KLs.
inline std::vector<std::size_t> pool_upto(const RealVec& kls, double kappa_valid, std::size_t upto) {
  std::vector<std::size_t> pool;
  for (std::size_t a = 0; a <= upto; ++a)
    if (a == 0 || kls[a] <= kappa_valid) pool.push_back(a);
  return pool;
}

inline RealVec record_kls(const RunHistory& h) {
  RealVec kls;
  for (const auto& r : h.records) kls.push_back(adversary_valid_kl(r));
  return kls;
}

}  // namespace detail

/// Full Minmax: argmin over checkpoints of the robust validation loss against
/// every filtered adversary of the run. Ties go to the earliest checkpoint.
inline std::size_t minmax_select(const RunHistory& h, const SelectionOptions& opt = {}) {
  if (h.records.empty()) throw std::invalid_argument("minmax_select: empty history");
  const auto scores = detail::score_matrix(h, opt.stat);
  const auto pool = detail::pool_upto(detail::record_kls(h), opt.kappa_valid, h.records.size() - 1);
  std::size_t best = 0;
  double best_value = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < h.records.size(); ++t) {
    const double v = detail::max_over(scores[t], pool);
    if (v < best_value) {
      best_value = v;
      best = t;
    }
  }
  return best;
}

enum class GreedyMode {
  /// Only the incumbent and the newest checkpoint are compared, each against
  /// all adversaries seen so far.
  single_incumbent,
  /// Every past checkpoint's cached validation statistics are re-scored when
  /// a new adversary arrives, so the incumbent is always the Minmax choice
  /// over the checkpoints and adversaries seen so far.
  cached,
};

/// Greedy-Minmax stopping, processing checkpoints in training order.
///
/// At step T the adversary pool is the filtered subset of psi_0..psi_T. A
/// challenger replaces the incumbent only if its robust loss is strictly
/// lower. In `cached` mode (the default) all earlier checkpoints are
/// re-scored against the grown pool, which makes the final choice identical
/// to `minmax_select`; memory stays O(T * |D_valid|) since only per-example
/// statistics are kept.
inline std::size_t greedy_minmax_select(const RunHistory& h, const SelectionOptions& opt = {},
                                        GreedyMode mode = GreedyMode::cached) {
  if (h.records.empty()) throw std::invalid_argument("greedy_minmax_select: empty history");
  const auto scores = detail::score_matrix(h, opt.stat);
  const RealVec kls = detail::record_kls(h);
  std::size_t incumbent = 0;
  for (std::size_t t = 1; t < h.records.size(); ++t) {
    const auto pool = detail::pool_upto(kls, opt.kappa_valid, t);
    if (mode == GreedyMode::single_incumbent) {
      if (detail::max_over(scores[t], pool) < detail::max_over(scores[incumbent], pool)) incumbent = t;
    } else {
      double best_value = std::numeric_limits<double>::infinity();
      for (std::size_t s = 0; s <= t; ++s) {
        const double v = detail::max_over(scores[s], pool);
        if (v < best_value) {
          best_value = v;
          incumbent = s;
        }
      }
    }
  }
  return incumbent;
}

/// Argmin of the unweighted validation statistic; ties go to the earliest.
inline std::size_t average_select(const RunHistory& h, const SelectionOptions& opt = {}) {
  if (h.records.empty()) throw std::invalid_argument("average_select: empty history");
  std::size_t best = 0;
  double best_value = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < h.records.size(); ++t) {
    const double v = mean(statistic(h.records[t], opt.stat));
    if (v < best_value) {
      best_value = v;
      best = t;
    }
  }
  return best;
}

/// Worst-group mean of a validation statistic.
inline double worst_group_value(std::span<const double> stat, std::span<const GroupId> groups) {
  if (stat.size() != groups.size()) throw std::invalid_argument("worst_group_value: vectors not aligned");
  std::map<GroupId, std::pair<double, double>> acc;
  for (std::size_t i = 0; i < stat.size(); ++i) {
    acc[groups[i]].first += stat[i];
    acc[groups[i]].second += 1.0;
  }
  double worst = -std::numeric_limits<double>::infinity();
  for (const auto& [g, sn] : acc) worst = std::max(worst, sn.first / sn.second);
  return worst;
}

/// Argmin over checkpoints of the worst validation-group statistic.
inline std::size_t oracle_select(const RunHistory& h, std::span<const GroupId> valid_groups,
                                 const SelectionOptions& opt = {}) {
  if (h.records.empty()) throw std::invalid_argument("oracle_select: empty history");
  std::size_t best = 0;
  double best_value = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < h.records.size(); ++t) {
    const double v = worst_group_value(statistic(h.records[t], opt.stat), valid_groups);
    if (v < best_value) {
      best_value = v;
      best = t;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Criteria by name.

enum class Criterion { average, minmax, minmax_kl, greedy_minmax, oracle, last };

inline std::string to_string(Criterion c) {
  switch (c) {
    case Criterion::average: return "average";
    case Criterion::minmax: return "minmax";
    case Criterion::minmax_kl: return "minmax_kl";
    case Criterion::greedy_minmax: return "greedy_minmax";
    case Criterion::oracle: return "oracle";
    case Criterion::last: return "last";
  }
  return "?";
}

inline Criterion parse_criterion(const std::string& s) {
  for (Criterion c : {Criterion::average, Criterion::minmax, Criterion::minmax_kl, Criterion::greedy_minmax,
                      Criterion::oracle, Criterion::last})
    if (to_string(c) == s) return c;
  throw std::invalid_argument("unknown selection criterion '" + s + "'");
}

/// `minmax` runs unfiltered; `minmax_kl` and `greedy_minmax` apply the
/// validation-KL filter at `kappa_valid`.
inline SelectionOptions options_for(Criterion c, SelectionOptions base = {}) {
  if (c == Criterion::minmax) base.kappa_valid = std::numeric_limits<double>::infinity();
  return base;
}

/// Chosen checkpoint of one run under a criterion.
inline std::size_t select_checkpoint(const RunHistory& h, Criterion c, const SelectionOptions& base = {}) {
  const SelectionOptions opt = options_for(c, base);
  switch (c) {
    case Criterion::average: return average_select(h, opt);
    case Criterion::minmax:
    case Criterion::minmax_kl: return minmax_select(h, opt);
    case Criterion::greedy_minmax: return greedy_minmax_select(h, opt);
    case Criterion::oracle: return oracle_select(h, h.valid_groups, opt);
    case Criterion::last: return h.records.size() - 1;
  }
  throw std::logic_error("unreachable");
}

/// Score of a chosen checkpoint under a criterion, comparable across runs
/// that share a validation set (lower is better). Minmax-family criteria
/// pool the filtered adversaries of all `runs`.
inline double selection_score(const RunHistory& h, std::size_t checkpoint, Criterion c,
                              std::span<const CheckpointRecord* const> pooled, const SelectionOptions& base = {}) {
  const SelectionOptions opt = options_for(c, base);
  const RealVec& stat = statistic(h.records.at(checkpoint), opt.stat);
  switch (c) {
    case Criterion::average:
    case Criterion::last: return mean(stat);
    case Criterion::oracle: return worst_group_value(stat, h.valid_groups);
    case Criterion::minmax:
    case Criterion::minmax_kl:
    case Criterion::greedy_minmax: return robust_valid_loss(stat, pooled);
  }
  throw std::logic_error("unreachable");
}

struct RunChoice {
  std::size_t run = 0;
  std::size_t checkpoint = 0;
  double score = 0.0;
  std::size_t pooled_adversaries = 0;
};

/// Filtered adversaries of every run, pooled.
inline std::vector<const CheckpointRecord*> pool_adversaries(std::span<const RunHistory> runs, double kappa_valid) {
  std::vector<const CheckpointRecord*> pool;
  for (const auto& h : runs)
    for (std::size_t i : filter_adversaries(h.records, kappa_valid)) pool.push_back(&h.records[i]);
  return pool;
}

/// Cross-run selection: each run first picks its checkpoint with `c`, then
/// the run whose choice scores best against the pooled adversaries of all
/// runs wins. Ties go to the first run.
inline RunChoice hyperparam_select(std::span<const RunHistory> runs, Criterion c = Criterion::greedy_minmax,
                                   const SelectionOptions& base = {}) {
  if (runs.empty()) throw std::invalid_argument("hyperparam_select: no runs");
  for (const auto& h : runs)
    if (h.valid_fingerprint != runs.front().valid_fingerprint)
      throw std::invalid_argument("hyperparam_select: runs were validated on different datasets");
  const SelectionOptions opt = options_for(c, base);
  const auto pool = pool_adversaries(runs, opt.kappa_valid);
  RunChoice best;
  best.score = std::numeric_limits<double>::infinity();
  best.pooled_adversaries = pool.size();
  for (std::size_t r = 0; r < runs.size(); ++r) {
    const std::size_t t = select_checkpoint(runs[r], c, base);
    const double v = selection_score(runs[r], t, c, pool, base);
    if (v < best.score) {
      best.run = r;
      best.checkpoint = t;
      best.score = v;
    }
  }
  return best;
}

}  // namespace pdro

#endif  // PDRO_SELECTION_HPP
