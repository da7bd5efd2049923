#ifndef PDRO_MODELS_HPP
#define PDRO_MODELS_HPP

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pdro/data.hpp"
#include "pdro/numerics.hpp"

namespace pdro {

/// Bag-of-tokens count vector of length vocab_size.
inline RealVec featurize_sequence(const TokenSeq& tokens, int vocab_size) {
  RealVec counts(static_cast<std::size_t>(vocab_size), 0.0);
  for (int t : tokens) {
    if (t < 0 || t >= vocab_size) throw std::out_of_range("featurize_sequence: token " + std::to_string(t) + " outside vocabulary");
    counts[static_cast<std::size_t>(t)] += 1.0;
  }
  return counts;
}

/// Parameters of a binary logistic-regression classifier.
///
/// theta holds one weight per input feature followed by the bias. For
/// sequence data the input features are bag-of-tokens counts, so
/// `vocab_size` must be set; for real-valued data it is 0.
struct ModelParams {
  RealVec theta;
  int vocab_size = 0;

  static ModelParams zeros(std::size_t input_dim, int vocab_size = 0) {
    return ModelParams{RealVec(input_dim + 1, 0.0), vocab_size};
  }

  /// Zero-initialized model sized for the examples of `d`.
  static ModelParams for_dataset(const Dataset& d) {
    if (d.is_sequence()) return zeros(static_cast<std::size_t>(d.vocab_size), d.vocab_size);
    return zeros(d.examples.front().features().size());
  }

  std::size_t dim() const { return theta.size(); }
  std::size_t input_dim() const { return theta.size() - 1; }
};

/// Input features with a trailing constant 1 for the bias.
inline RealVec augmented_features(const Example& e, const ModelParams& m) {
  RealVec x;
  if (e.is_sequence()) {
    if (m.vocab_size <= 0) throw std::invalid_argument("sequence example given to a real-valued model");
    x = featurize_sequence(e.tokens(), m.vocab_size);
  } else {
    x = e.features();
  }
  if (x.size() != m.input_dim())
    throw std::invalid_argument("feature dimension " + std::to_string(x.size()) + " does not match model dimension " +
                                std::to_string(m.input_dim()));
  x.push_back(1.0);
  return x;
}

inline double logit(const Example& e, const ModelParams& m) { return dot(augmented_features(e, m), m.theta); }

/// Negative log-likelihood of the true label: log(1 + exp(-(2y-1) * logit)).
inline double loss(const Example& e, const ModelParams& m) {
  const double sign = e.label == 1 ? 1.0 : -1.0;
  return log1p_exp(-sign * logit(e, m));
}

inline RealVec grad_loss(const Example& e, const ModelParams& m) {
  RealVec x = augmented_features(e, m);
  // d/dz log(1+exp(-s z)) = -s * sigmoid(-s z) = sigmoid(z) - y
  const double r = sigmoid(dot(x, m.theta)) - static_cast<double>(e.label);
  for (double& v : x) v *= r;
  return x;
}

/// Ties (logit exactly 0) go to label 0.
inline int predict(const Example& e, const ModelParams& m) { return logit(e, m) > 0.0 ? 1 : 0; }

inline double zero_one_error(const Example& e, const ModelParams& m) { return predict(e, m) == e.label ? 0.0 : 1.0; }

/// Per-group accuracy of a model on a dataset, with raw groups mapped through `grouping`.
inline std::map<GroupId, double> per_group_accuracy(const Dataset& d, const ModelParams& m, const GroupingScheme& grouping) {
  std::map<GroupId, double> correct;
  std::map<GroupId, double> total;
  for (const auto& e : d.examples) {
    const GroupId g = grouping(e.group);
    total[g] += 1.0;
    correct[g] += predict(e, m) == e.label ? 1.0 : 0.0;
  }
  std::map<GroupId, double> acc;
  for (const auto& [g, n] : total) acc[g] = correct[g] / n;
  return acc;
}

// ---------------------------------------------------------------------------
// Model optimizers.

enum class ModelOptimizer { sgd, adam };

inline ModelOptimizer parse_model_optimizer(const std::string& s) {
  if (s == "sgd") return ModelOptimizer::sgd;
  if (s == "adam") return ModelOptimizer::adam;
  throw std::invalid_argument("unknown model optimizer '" + s + "'");
}

inline std::string to_string(ModelOptimizer o) { return o == ModelOptimizer::sgd ? "sgd" : "adam"; }

/// Applies a descent direction to theta.
///
/// With `sgd` this is theta -= lr * direction. With `adam` the direction is
/// treated as a gradient and rescaled with the usual constants
/// (beta1 = 0.9, beta2 = 0.999, eps = 1e-8, bias-corrected).
class ModelUpdater {
 public:
  explicit ModelUpdater(ModelOptimizer kind = ModelOptimizer::sgd, double lr = 0.1) : kind_(kind), lr_(lr) {}

  double learning_rate() const { return lr_; }

  void apply(ModelParams& m, std::span<const double> gradient) {
    if (gradient.size() != m.dim()) throw std::invalid_argument("ModelUpdater: gradient size mismatch");
    if (kind_ == ModelOptimizer::sgd) {
      for (std::size_t j = 0; j < m.dim(); ++j) m.theta[j] -= lr_ * gradient[j];
    } else {
      if (first_.empty()) {
        first_.assign(m.dim(), 0.0);
        second_.assign(m.dim(), 0.0);
      }
      ++step_;
      const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(step_));
      const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(step_));
      for (std::size_t j = 0; j < m.dim(); ++j) {
        first_[j] = kBeta1 * first_[j] + (1.0 - kBeta1) * gradient[j];
        second_[j] = kBeta2 * second_[j] + (1.0 - kBeta2) * gradient[j] * gradient[j];
        m.theta[j] -= lr_ * (first_[j] / c1) / (std::sqrt(second_[j] / c2) + kEps);
      }
    }
    require_finite(m.theta, "model parameters");
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  ModelOptimizer kind_;
  double lr_;
  RealVec first_;
  RealVec second_;
  long step_ = 0;
};

/// sum_i coeffs[i] * grad_loss(batch[i]), accumulated in batch order.
inline RealVec weighted_loss_gradient(std::span<const Example* const> batch, const ModelParams& m,
                                      std::span<const double> coeffs) {
  if (batch.size() != coeffs.size()) throw std::invalid_argument("weighted_loss_gradient: size mismatch");
  RealVec g(m.dim(), 0.0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (coeffs[i] == 0.0) continue;
    const RealVec gi = grad_loss(*batch[i], m);
    for (std::size_t j = 0; j < g.size(); ++j) g[j] += coeffs[i] * gi[j];
  }
  return g;
}

}  // namespace pdro

#endif  // PDRO_MODELS_HPP
