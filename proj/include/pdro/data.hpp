#ifndef PDRO_DATA_HPP
#define PDRO_DATA_HPP

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "pdro/numerics.hpp"

namespace pdro {

using TokenSeq = std::vector<int>;
using GroupId = int;

/// One data point. `group` is bookkeeping for evaluation; only Oracle DRO and
/// oracle selection are allowed to read it during training.
struct Example {
  std::variant<RealVec, TokenSeq> x;
  int label = 0;
  GroupId group = 0;
  /// Optional soft pseudo-group assignment (one row of a simplex).
  RealVec posteriors;

  bool is_sequence() const { return std::holds_alternative<TokenSeq>(x); }
  const RealVec& features() const { return std::get<RealVec>(x); }
  const TokenSeq& tokens() const { return std::get<TokenSeq>(x); }
};

enum class Split { train, valid, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "valid") return Split::valid;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + s + "'");
}

struct Dataset {
  std::vector<Example> examples;
  Split split = Split::train;
  /// Vocabulary size for sequence data, 0 for real-valued features.
  int vocab_size = 0;

  std::size_t size() const { return examples.size(); }
  bool is_sequence() const { return vocab_size > 0; }
  const Example& operator[](std::size_t i) const { return examples[i]; }

  /// Number of examples per group id.
  std::map<GroupId, std::size_t> group_counts() const {
    std::map<GroupId, std::size_t> counts;
    for (const auto& e : examples) ++counts[e.group];
    return counts;
  }

  std::map<GroupId, double> group_frequencies() const {
    std::map<GroupId, double> freqs;
    for (const auto& [g, c] : group_counts())
      freqs[g] = static_cast<double>(c) / static_cast<double>(examples.size());
    return freqs;
  }

  /// Empirical distribution of labels, indexed by label.
  RealVec label_marginal() const {
    RealVec m(2, 0.0);
    for (const auto& e : examples) m.at(static_cast<std::size_t>(e.label)) += 1.0;
    for (double& v : m) v /= static_cast<double>(examples.size());
    return m;
  }

  void validate() const {
    if (examples.empty()) throw std::invalid_argument("dataset is empty");
    for (const auto& e : examples) {
      if (e.label != 0 && e.label != 1) throw std::invalid_argument("label must be 0 or 1");
      if (e.is_sequence() != is_sequence())
        throw std::invalid_argument("dataset mixes sequence and real-valued examples");
      if (e.is_sequence()) {
        if (e.tokens().empty()) throw std::invalid_argument("empty token sequence");
        for (int t : e.tokens())
          if (t < 0 || t >= vocab_size) throw std::invalid_argument("token id outside vocabulary");
      }
    }
  }
};

struct DatasetSplits {
  Dataset train;
  Dataset valid;
  Dataset test;
};

// ---------------------------------------------------------------------------
// Toy task: two Gaussian domains with different labeling boundaries.

/// Geometry of the two-domain toy task.
///
/// Each domain is an isotropic unit-variance Gaussian. Within domain d, the
/// label is drawn as y ~ Bernoulli(sigmoid(sharpness * <normal_d, x - mean_d>)),
/// so the Bayes classifier of each domain is the hyperplane through its mean.
/// The two normals are orthogonal: a single linear classifier tuned to the
/// majority domain is at chance on the minority one. The means are placed so
/// that the line joining them bisects both normals, which is where the best
/// worst-domain linear classifier lives.
struct ToyGeometry {
  RealVec majority_mean{0.0, 0.0};
  RealVec minority_mean{4.0, -4.0};
  RealVec majority_normal{1.0, 0.0};
  RealVec minority_normal{0.0, 1.0};
  double sharpness = 4.0;
  /// One minority point for every `ratio` majority points.
  double ratio = 50.0;
  /// Each test domain is topped up to at least this many points.
  std::size_t min_test_per_domain = 2000;
};

constexpr GroupId kMajorityDomain = 0;
constexpr GroupId kMinorityDomain = 1;

namespace detail {

inline Example draw_toy_point(Rng& rng, const ToyGeometry& geo, GroupId domain) {
  const RealVec& mu = domain == kMajorityDomain ? geo.majority_mean : geo.minority_mean;
  const RealVec& n = domain == kMajorityDomain ? geo.majority_normal : geo.minority_normal;
  RealVec x{mu[0] + rng.normal(), mu[1] + rng.normal()};
  const double margin = n[0] * (x[0] - mu[0]) + n[1] * (x[1] - mu[1]);
  const int y = rng.bernoulli(sigmoid(geo.sharpness * margin)) ? 1 : 0;
  return Example{std::move(x), y, domain, {}};
}

inline Dataset draw_toy_split(Rng& rng, const ToyGeometry& geo, std::size_t n, Split split) {
  Dataset d;
  d.split = split;
  d.examples.reserve(n);
  const double p_minority = 1.0 / (1.0 + geo.ratio);
  for (std::size_t i = 0; i < n; ++i) {
    const GroupId domain = rng.bernoulli(p_minority) ? kMinorityDomain : kMajorityDomain;
    d.examples.push_back(draw_toy_point(rng, geo, domain));
  }
  return d;
}

}  // namespace detail

inline DatasetSplits gen_toy_gaussian(std::uint64_t seed, std::size_t n_train, std::size_t n_valid,
                                      std::size_t n_test, const ToyGeometry& geo = {}) {
  if (n_train < 100 || n_valid < 100 || n_test < 100)
    throw std::invalid_argument("gen_toy_gaussian: every split needs at least 100 points");
  Rng rng(seed, 1);
  DatasetSplits s;
  s.train = detail::draw_toy_split(rng, geo, n_train, Split::train);
  s.valid = detail::draw_toy_split(rng, geo, n_valid, Split::valid);
  s.test = detail::draw_toy_split(rng, geo, n_test, Split::test);
  const std::size_t min_per_domain = std::max<std::size_t>(geo.min_test_per_domain, 100);
  auto counts = s.test.group_counts();
  for (GroupId domain : {kMajorityDomain, kMinorityDomain})
    for (std::size_t c = counts[domain]; c < min_per_domain; ++c)
      s.test.examples.push_back(detail::draw_toy_point(rng, geo, domain));
  return s;
}

// ---------------------------------------------------------------------------
// BiasedSynth: bag-of-tokens sentiment analog with a spurious distractor token.

/// Token layout of the synthetic biased-sequence task.
///
/// Ids [0, class_tokens) are negative-indicative, [class_tokens,
/// 2*class_tokens) positive-indicative, the rest up to vocab_size-1 are
/// shared, and vocab_size-1 is the distractor. A sentence of class c draws
/// each token from its own indicative subset with probability own_mass, from
/// the other class's subset with probability other_mass, and from the shared
/// tokens otherwise.
struct BiasedSeqConfig {
  int vocab_size = 30;
  int class_tokens = 8;
  double own_mass = 0.38;
  double other_mass = 0.22;
  int min_length = 5;
  int max_length = 12;

  int distractor() const { return vocab_size - 1; }
  int shared_begin() const { return 2 * class_tokens; }
  int shared_count() const { return vocab_size - 1 - 2 * class_tokens; }

  void validate() const {
    if (class_tokens < 1 || shared_count() < 1)
      throw std::invalid_argument("BiasedSeqConfig: vocabulary too small for the token layout");
    if (own_mass < 0 || other_mass < 0 || own_mass + other_mass > 1.0)
      throw std::invalid_argument("BiasedSeqConfig: invalid token masses");
    if (min_length < 1 || max_length < min_length)
      throw std::invalid_argument("BiasedSeqConfig: invalid length range");
  }
};

/// Group id of a biased-sequence example: 2 * label + distractor_present.
inline GroupId biased_group(int label, bool distractor) { return 2 * label + (distractor ? 1 : 0); }

namespace detail {

inline TokenSeq draw_sentence(Rng& rng, const BiasedSeqConfig& cfg, int label, bool distractor) {
  const auto length = static_cast<int>(
      cfg.min_length + rng.uniform_int(static_cast<std::uint64_t>(cfg.max_length - cfg.min_length + 1)));
  TokenSeq seq;
  seq.reserve(static_cast<std::size_t>(length) + 1);
  if (distractor) seq.push_back(cfg.distractor());
  const int own_begin = label == 0 ? 0 : cfg.class_tokens;
  const int other_begin = label == 0 ? cfg.class_tokens : 0;
  for (int i = 0; i < length; ++i) {
    const double u = rng.uniform();
    const auto pick = [&](int n) { return static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n))); };
    if (u < cfg.own_mass)
      seq.push_back(own_begin + pick(cfg.class_tokens));
    else if (u < cfg.own_mass + cfg.other_mass)
      seq.push_back(other_begin + pick(cfg.class_tokens));
    else
      seq.push_back(cfg.shared_begin() + pick(cfg.shared_count()));
  }
  return seq;
}

inline Dataset draw_biased_split(Rng& rng, const BiasedSeqConfig& cfg, double bias, std::size_t n, Split split) {
  Dataset d;
  d.split = split;
  d.vocab_size = cfg.vocab_size;
  d.examples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = rng.bernoulli(0.5) ? 1 : 0;
    const bool distractor = rng.bernoulli(label == 0 ? bias : 1.0 - bias);
    d.examples.push_back(Example{draw_sentence(rng, cfg, label, distractor), label, biased_group(label, distractor), {}});
  }
  return d;
}

/// Balanced test split: n/2 per class, exactly half of each class with the distractor.
inline Dataset draw_balanced_split(Rng& rng, const BiasedSeqConfig& cfg, std::size_t n) {
  Dataset d;
  d.split = Split::test;
  d.vocab_size = cfg.vocab_size;
  const std::size_t per_class = n / 2;
  for (int label : {0, 1}) {
    std::vector<bool> flags(per_class, false);
    for (std::size_t i = 0; i < per_class / 2; ++i) flags[i] = true;
    rng.shuffle(flags);
    for (bool distractor : flags)
      d.examples.push_back(Example{draw_sentence(rng, cfg, label, distractor), label, biased_group(label, distractor), {}});
  }
  rng.shuffle(d.examples);
  return d;
}

}  // namespace detail

/// Train/valid carry the distractor on `bias` of negatives and 1-bias of
/// positives; the test split is balanced so every group is well populated.
inline DatasetSplits gen_biased_sequences(std::uint64_t seed, double bias, std::size_t n_train, std::size_t n_valid,
                                          std::size_t n_test, const BiasedSeqConfig& cfg = {}) {
  if (!(bias > 0.5 && bias < 1.0) && bias != 0.5)
    throw std::invalid_argument("gen_biased_sequences: bias must lie in (0.5, 1)");
  if (n_train < 100 || n_valid < 100 || n_test < 100)
    throw std::invalid_argument("gen_biased_sequences: every split needs at least 100 examples");
  cfg.validate();
  Rng rng(seed, 2);
  DatasetSplits s;
  s.train = detail::draw_biased_split(rng, cfg, bias, n_train, Split::train);
  s.valid = detail::draw_biased_split(rng, cfg, bias, n_valid, Split::valid);
  s.test = detail::draw_balanced_split(rng, cfg, n_test);
  return s;
}

// ---------------------------------------------------------------------------
// Grouping and metrics.

/// Maps raw group ids to evaluation group ids.
struct GroupingScheme {
  std::map<GroupId, GroupId> mapping;
  std::size_t min_size = 100;
  /// Id shared by all merged small groups; only meaningful if any were merged.
  GroupId merged_id = -1;

  GroupId operator()(GroupId raw) const {
    auto it = mapping.find(raw);
    if (it == mapping.end()) throw std::out_of_range("group " + std::to_string(raw) + " is not in the grouping");
    return it->second;
  }

  bool is_identity() const {
    for (const auto& [from, to] : mapping)
      if (from != to) return false;
    return true;
  }

  static GroupingScheme identity(const Dataset& d) {
    GroupingScheme g;
    g.min_size = 0;
    for (const auto& [id, count] : d.group_counts()) g.mapping[id] = id;
    return g;
  }
};

/// Groups with fewer than `min_size` members are folded into one catch-all group.
inline GroupingScheme merge_small_groups(const Dataset& test, std::size_t min_size = 100) {
  if (test.examples.empty()) throw std::invalid_argument("merge_small_groups: empty dataset");
  GroupingScheme scheme;
  scheme.min_size = min_size;
  const auto counts = test.group_counts();
  GroupId max_id = counts.rbegin()->first;
  scheme.merged_id = max_id + 1;
  for (const auto& [id, count] : counts) scheme.mapping[id] = count >= min_size ? id : scheme.merged_id;
  return scheme;
}

inline double robust_accuracy(const std::map<GroupId, double>& per_group_acc) {
  if (per_group_acc.empty()) throw std::invalid_argument("robust_accuracy: no groups");
  double worst = per_group_acc.begin()->second;
  for (const auto& [g, a] : per_group_acc) worst = std::min(worst, a);
  return worst;
}

inline double reweighted_average_accuracy(const std::map<GroupId, double>& per_group_acc,
                                          const std::map<GroupId, double>& group_freqs) {
  if (per_group_acc.size() != group_freqs.size())
    throw std::invalid_argument("reweighted_average_accuracy: group key sets differ");
  double total_freq = 0.0;
  double acc = 0.0;
  for (const auto& [g, f] : group_freqs) {
    auto it = per_group_acc.find(g);
    if (it == per_group_acc.end()) throw std::invalid_argument("reweighted_average_accuracy: group key sets differ");
    total_freq += f;
    acc += f * it->second;
  }
  if (std::abs(total_freq - 1.0) > 1e-9)
    throw std::invalid_argument("reweighted_average_accuracy: frequencies must sum to 1");
  return acc;
}

/// Training-group frequencies re-expressed in evaluation groups.
inline std::map<GroupId, double> mapped_frequencies(const Dataset& train, const GroupingScheme& grouping) {
  std::map<GroupId, double> freqs;
  for (const auto& [g, f] : train.group_frequencies()) freqs[grouping(g)] += f;
  return freqs;
}

}  // namespace pdro

#endif  // PDRO_DATA_HPP
