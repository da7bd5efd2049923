#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "pdro/selection.hpp"

using namespace pdro;

namespace {

// log-weight standing in for a zero weight
constexpr double kZero = -700.0;

CheckpointRecord record(int epoch, RealVec log_weights, RealVec errors) {
  CheckpointRecord r;
  r.epoch = epoch;
  r.log_weights = std::move(log_weights);
  r.losses = errors;
  r.errors = std::move(errors);
  return r;
}

// Random history over a small validation set. Errors are 0/1 and weights
// come from a small discrete set so that ties are common.
RunHistory random_history(Rng& r, std::size_t checkpoints, std::size_t n_valid) {
  RunHistory h;
  for (std::size_t i = 0; i < n_valid; ++i) h.valid_groups.push_back(static_cast<GroupId>(i % 3));
  for (std::size_t t = 0; t < checkpoints; ++t) {
    RealVec lw(n_valid, 0.0), err(n_valid);
    if (t > 0)
      for (double& v : lw) v = std::log(static_cast<double>(1 + r.uniform_int(4)) / 2.0);
    for (double& e : err) e = r.bernoulli(0.4) ? 1.0 : 0.0;
    h.records.push_back(record(static_cast<int>(t), lw, err));
  }
  return h;
}

// Reference Minmax written from the definition, without the score matrix.
std::size_t reference_minmax(const RunHistory& h, double kappa_valid) {
  std::vector<const CheckpointRecord*> pool;
  for (std::size_t a = 0; a < h.records.size(); ++a) {
    const auto& lw = h.records[a].log_weights;
    double kl = 0;
    for (double v : lw) kl += std::exp(v) * v;
    kl /= static_cast<double>(lw.size());
    if (a == 0 || kl <= kappa_valid) pool.push_back(&h.records[a]);
  }
  std::size_t best = 0;
  double best_v = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < h.records.size(); ++t) {
    double worst = -std::numeric_limits<double>::infinity();
    for (const auto* a : pool) {
      double s = 0;
      for (std::size_t i = 0; i < h.records[t].errors.size(); ++i) s += std::exp(a->log_weights[i]) * h.records[t].errors[i];
      worst = std::max(worst, s / static_cast<double>(h.records[t].errors.size()));
    }
    if (worst < best_v) {
      best_v = worst;
      best = t;
    }
  }
  return best;
}

}  // namespace

TEST(AdversaryValidKl, UnitWeightsGiveZero) {
  EXPECT_EQ(adversary_valid_kl(record(0, RealVec(50, 0.0), RealVec(50, 0.0))), 0.0);
}

TEST(AdversaryValidKl, SubsetConcentration) {
  for (auto [alpha, n] : {std::pair{0.1, 100}, std::pair{0.05, 200}}) {
    RealVec lw(static_cast<std::size_t>(n), kZero);
    for (int i = 0; i < static_cast<int>(alpha * n); ++i) lw[static_cast<std::size_t>(i)] = std::log(1.0 / alpha);
    EXPECT_NEAR(adversary_valid_kl(record(1, lw, RealVec(lw.size(), 0.0))), std::log(1.0 / alpha), 1e-12);
  }
}

TEST(AdversaryValidKl, MatchesDirectSum) {
  Rng r(1);
  for (int trial = 0; trial < 20; ++trial) {
    RealVec lw(37);
    for (double& v : lw) v = r.normal();
    long double direct = 0;
    for (double v : lw) direct += std::exp(static_cast<long double>(v)) * v;
    direct /= 37;
    EXPECT_NEAR(adversary_valid_kl(record(1, lw, RealVec(37, 0.0))), static_cast<double>(direct), 1e-12);
  }
}

TEST(FilterAdversaries, ThresholdArithmetic) {
  RealVec ten(100, kZero), twenty(100, kZero);
  for (int i = 0; i < 10; ++i) ten[static_cast<std::size_t>(i)] = std::log(10.0);
  for (int i = 0; i < 5; ++i) twenty[static_cast<std::size_t>(i)] = std::log(20.0);
  const std::vector<CheckpointRecord> recs{record(0, RealVec(100, 0.0), RealVec(100, 0.0)),
                                           record(1, RealVec(100, 0.0), RealVec(100, 0.0)),
                                           record(2, twenty, RealVec(100, 0.0)), record(3, ten, RealVec(100, 0.0))};
  // log 10 itself sits on the boundary; allow for rounding in w log w
  EXPECT_EQ(filter_adversaries(recs, std::log(10.0) + 1e-12), (std::vector<std::size_t>{0, 1, 3}));
  EXPECT_EQ(filter_adversaries(recs, std::log(5.0)), (std::vector<std::size_t>{0, 1}));
}

TEST(FilterAdversaries, RecordZeroAlwaysKeptAndMonotone) {
  Rng r(2);
  for (int trial = 0; trial < 50; ++trial) {
    RunHistory h = random_history(r, 8, 30);
    for (std::size_t t = 1; t < h.records.size(); ++t)
      for (double& v : h.records[t].log_weights) v = 3.0 * r.normal();
    EXPECT_EQ(adversary_valid_kl(h.records[0]), 0.0);
    std::vector<std::size_t> prev;
    for (double kappa : {0.0, std::log(5.0), std::log(10.0), std::log(20.0), 1e9}) {
      const auto kept = filter_adversaries(h.records, kappa);
      ASSERT_FALSE(kept.empty());
      EXPECT_EQ(kept.front(), 0u);
      for (std::size_t i : prev) EXPECT_NE(std::find(kept.begin(), kept.end(), i), kept.end());
      prev = kept;
    }
  }
}

TEST(RobustValidLoss, SnapshotOnlyIsPlainError) {
  const auto r0 = record(0, RealVec(4, 0.0), RealVec{1, 0, 0, 1});
  const CheckpointRecord* pool[] = {&r0};
  EXPECT_DOUBLE_EQ(robust_valid_loss(r0.errors, pool), 0.5);
}

TEST(RobustValidLoss, HandComputedInstance) {
  // weights (2, 2, 0, 0) and (0.5, 0.5, 1.5, 1.5) on errors (1, 0, 0, 1)
  const auto a = record(1, RealVec{std::log(2.0), std::log(2.0), kZero, kZero}, RealVec(4, 0.0));
  const auto b = record(2, RealVec{std::log(0.5), std::log(0.5), std::log(1.5), std::log(1.5)}, RealVec(4, 0.0));
  const RealVec err{1, 0, 0, 1};
  const CheckpointRecord* just_a[] = {&a};
  const CheckpointRecord* both[] = {&a, &b};
  EXPECT_NEAR(robust_valid_loss(err, just_a), 0.5, 1e-15);
  EXPECT_NEAR(robust_valid_loss(err, both), 0.5, 1e-15);
  const RealVec err2{0, 0, 1, 1};
  EXPECT_NEAR(robust_valid_loss(err2, just_a), 0.0, 1e-300);
  EXPECT_NEAR(robust_valid_loss(err2, both), 0.75, 1e-15);
}

TEST(RobustValidLoss, SupersetNeverDecreases) {
  Rng r(3);
  const RunHistory h = random_history(r, 10, 25);
  std::vector<const CheckpointRecord*> pool;
  double prev = -1;
  for (const auto& rec : h.records) {
    pool.push_back(&rec);
    const double v = robust_valid_loss(h.records[4].errors, pool);
    EXPECT_GE(v, prev);
    prev = v;
  }
}

TEST(Minmax, TrivialCases) {
  Rng r(4);
  RunHistory one = random_history(r, 1, 10);
  EXPECT_EQ(minmax_select(one), 0u);
  EXPECT_EQ(greedy_minmax_select(one), 0u);
  RunHistory improving;
  improving.valid_groups.assign(10, 0);
  for (int t = 0; t < 5; ++t) {
    RealVec err(10, 0.0);
    for (int i = 0; i < 5 - t; ++i) err[static_cast<std::size_t>(i)] = 1.0;
    improving.records.push_back(record(t, RealVec(10, 0.0), err));
  }
  EXPECT_EQ(minmax_select(improving), 4u);
  EXPECT_EQ(greedy_minmax_select(improving), 4u);
  EXPECT_EQ(average_select(improving), 4u);
}

TEST(Minmax, MatchesReferenceAndGreedy) {
  Rng r(5);
  for (int trial = 0; trial < 100; ++trial) {
    const RunHistory h = random_history(r, 2 + r.uniform_int(10), 20);
    for (double kappa : {kDefaultValidKl, std::numeric_limits<double>::infinity(), 0.05}) {
      const SelectionOptions opt{SelectionStat::zero_one, kappa};
      const std::size_t ref = reference_minmax(h, kappa);
      EXPECT_EQ(minmax_select(h, opt), ref);
      EXPECT_EQ(greedy_minmax_select(h, opt), ref);
    }
  }
}

TEST(Minmax, ReorderingKeepsTheChosenScore) {
  Rng r(6);
  for (int trial = 0; trial < 20; ++trial) {
    RunHistory h = random_history(r, 6, 20);
    const SelectionOptions opt{SelectionStat::zero_one, std::numeric_limits<double>::infinity()};
    const auto score = [&](const RunHistory& x, std::size_t t) {
      std::vector<const CheckpointRecord*> pool;
      for (const auto& rec : x.records) pool.push_back(&rec);
      return robust_valid_loss(x.records[t].errors, pool);
    };
    const double before = score(h, minmax_select(h, opt));
    std::reverse(h.records.begin() + 1, h.records.end());
    EXPECT_EQ(score(h, minmax_select(h, opt)), before);
  }
}

TEST(Minmax, EqualsAverageWhenAdversariesAreSnapshot) {
  Rng r(7);
  for (int trial = 0; trial < 50; ++trial) {
    RunHistory h = random_history(r, 8, 20);
    for (auto& rec : h.records) std::fill(rec.log_weights.begin(), rec.log_weights.end(), 0.0);
    EXPECT_EQ(minmax_select(h), average_select(h));
  }
}

TEST(GreedyMinmax, SingleIncumbentCanMissTheMinmaxChoice) {
  // checkpoint 1 beats 0 under psi_0 and psi_1, then adversary 2 exposes it;
  // comparing only incumbent and newcomer never revisits checkpoint 0
  RunHistory h;
  h.valid_groups.assign(4, 0);
  const RealVec w2{std::log(4.0), kZero, kZero, kZero};
  h.records.push_back(record(0, RealVec(4, 0.0), RealVec{0, 0, 1, 1}));
  h.records.push_back(record(1, RealVec(4, 0.0), RealVec{1, 0, 0, 0}));
  h.records.push_back(record(2, w2, RealVec{1, 1, 1, 0}));
  const SelectionOptions opt{SelectionStat::zero_one, std::numeric_limits<double>::infinity()};
  EXPECT_EQ(minmax_select(h, opt), 0u);
  EXPECT_EQ(greedy_minmax_select(h, opt), 0u);
  EXPECT_EQ(greedy_minmax_select(h, opt, GreedyMode::single_incumbent), 1u);
  std::vector<const CheckpointRecord*> pool{&h.records[0], &h.records[1], &h.records[2]};
  EXPECT_DOUBLE_EQ(robust_valid_loss(h.records[0].errors, pool), 0.5);
  EXPECT_DOUBLE_EQ(robust_valid_loss(h.records[1].errors, pool), 1.0);
}

TEST(GreedyMinmax, SingleIncumbentNeverBeatsMinmax) {
  Rng r(8);
  for (int trial = 0; trial < 100; ++trial) {
    const RunHistory h = random_history(r, 10, 20);
    const SelectionOptions opt;
    std::vector<const CheckpointRecord*> pool;
    for (std::size_t a : filter_adversaries(h.records, opt.kappa_valid)) pool.push_back(&h.records[a]);
    const double full = robust_valid_loss(h.records[minmax_select(h, opt)].errors, pool);
    const double single =
        robust_valid_loss(h.records[greedy_minmax_select(h, opt, GreedyMode::single_incumbent)].errors, pool);
    EXPECT_LE(full, single);
  }
}

TEST(AverageSelect, TieGoesToEarliest) {
  RunHistory h;
  h.valid_groups.assign(4, 0);
  for (int t = 0; t < 3; ++t) h.records.push_back(record(t, RealVec(4, 0.0), RealVec{1, 0, 0, 0}));
  EXPECT_EQ(average_select(h), 0u);
}

TEST(OracleSelect, OneGroupEqualsAverageAndHandInstance) {
  Rng r(9);
  for (int trial = 0; trial < 20; ++trial) {
    RunHistory h = random_history(r, 6, 20);
    h.valid_groups.assign(20, 0);
    EXPECT_EQ(oracle_select(h, h.valid_groups), average_select(h));
  }
  RunHistory h;
  h.valid_groups = {0, 0, 0, 1};
  h.records.push_back(record(0, RealVec(4, 0.0), RealVec{0, 0, 0, 1}));  // worst group error 1
  h.records.push_back(record(1, RealVec(4, 0.0), RealVec{1, 1, 0, 0}));  // worst group error 2/3
  h.records.push_back(record(2, RealVec(4, 0.0), RealVec{1, 0, 1, 0}));  // worst group error 2/3
  EXPECT_EQ(average_select(h), 0u);
  EXPECT_EQ(oracle_select(h, h.valid_groups), 1u);
}

TEST(HyperparamSelect, SingleRunReducesToGreedy) {
  Rng r(10);
  for (int trial = 0; trial < 20; ++trial) {
    const std::vector<RunHistory> runs{random_history(r, 8, 20)};
    const RunChoice c = hyperparam_select(runs);
    EXPECT_EQ(c.run, 0u);
    EXPECT_EQ(c.checkpoint, greedy_minmax_select(runs[0]));
  }
}

TEST(HyperparamSelect, DuplicateRunTiesToFirst) {
  Rng r(11);
  const RunHistory h = random_history(r, 8, 20);
  const std::vector<RunHistory> runs{h, h};
  for (Criterion c : {Criterion::average, Criterion::minmax, Criterion::minmax_kl, Criterion::greedy_minmax,
                      Criterion::oracle, Criterion::last})
    EXPECT_EQ(hyperparam_select(runs, c).run, 0u) << to_string(c);
}

TEST(HyperparamSelect, PoolsAdversariesAcrossRuns) {
  // run 0 looks perfect under its own adversaries but fails run 1's adversary
  RunHistory a, b;
  a.valid_groups = b.valid_groups = {0, 0, 0, 0};
  a.records.push_back(record(0, RealVec(4, 0.0), RealVec{0, 0, 1, 0}));
  b.records.push_back(record(0, RealVec(4, 0.0), RealVec{1, 0, 0, 0}));
  b.records.push_back(record(1, RealVec{kZero, kZero, std::log(2.0), std::log(2.0)}, RealVec{1, 0, 0, 0}));
  const std::vector<RunHistory> runs{a, b};
  const RunChoice c = hyperparam_select(runs, Criterion::minmax);
  EXPECT_EQ(c.run, 1u);
  EXPECT_EQ(c.pooled_adversaries, 3u);
  EXPECT_DOUBLE_EQ(c.score, 0.25);
}

TEST(HyperparamSelect, RejectsMismatchedValidationSets) {
  Rng r(12);
  std::vector<RunHistory> runs{random_history(r, 3, 10), random_history(r, 3, 10)};
  runs[1].valid_fingerprint = 99;
  EXPECT_THROW(hyperparam_select(runs), std::invalid_argument);
  EXPECT_THROW(hyperparam_select(std::vector<RunHistory>{}), std::invalid_argument);
}

TEST(Criterion, NamesRoundTrip) {
  for (Criterion c : {Criterion::average, Criterion::minmax, Criterion::minmax_kl, Criterion::greedy_minmax,
                      Criterion::oracle, Criterion::last})
    EXPECT_EQ(parse_criterion(to_string(c)), c);
  EXPECT_THROW(parse_criterion("best"), std::invalid_argument);
}
