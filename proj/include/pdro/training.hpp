#ifndef PDRO_TRAINING_HPP
#define PDRO_TRAINING_HPP

#include <bit>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pdro/adversaries.hpp"
#include "pdro/data.hpp"
#include "pdro/models.hpp"
#include "pdro/numerics.hpp"

namespace pdro {

/// Validation-set sufficient statistics of one checkpoint.
///
/// log_weights[i] is log(q_psi_t / q_psi_0) of validation example i under the
/// adversary of this checkpoint (all zeros for record 0 and for methods
/// without a parametric adversary). losses/errors are those of the model
/// theta_t on the same examples.
struct CheckpointRecord {
  int epoch = 0;
  RealVec log_weights;
  RealVec losses;
  RealVec errors;
  ModelParams model;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double valid_loss = 0.0;
  double valid_error = 0.0;
  double valid_kl = 0.0;
};

/// Everything a run leaves behind for stopping and model selection.
struct RunHistory {
  std::string method;
  /// Config echo, written verbatim to the run directory.
  std::map<std::string, std::string> config;
  std::vector<CheckpointRecord> records;
  std::vector<EpochStats> stats;
  /// Raw group ids of the validation examples, aligned with record vectors.
  std::vector<GroupId> valid_groups;
  std::uint64_t valid_fingerprint = 0;
  ModelParams final_model;
  std::optional<AdversarySnapshot> psi0;
  std::optional<AdversaryParams> final_adversary;

  std::size_t completed_epochs() const { return records.empty() ? 0 : records.size() - 1; }
};

/// FNV-1a hash of a dataset's content, used to check that runs share a validation set.
inline std::uint64_t fingerprint(const Dataset& d) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto mix = [&h](std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  };
  mix(d.size());
  for (const auto& e : d.examples) {
    mix(static_cast<std::uint64_t>(e.label));
    mix(static_cast<std::uint64_t>(static_cast<std::int64_t>(e.group)));
    if (e.is_sequence()) {
      mix(e.tokens().size());
      for (int t : e.tokens()) mix(static_cast<std::uint64_t>(t));
    } else {
      for (double v : e.features()) mix(std::bit_cast<std::uint64_t>(v));
    }
  }
  return h;
}

/// Hyper-parameters shared by every trainer.
struct TrainConfig {
  int epochs = 20;
  std::size_t batch_size = 64;
  double model_lr = 0.1;
  ModelOptimizer model_optimizer = ModelOptimizer::sgd;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 0) throw std::invalid_argument("epochs must be non-negative");
    if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
    if (!(model_lr > 0.0)) throw std::invalid_argument("model learning rate must be positive");
  }

  void echo(std::map<std::string, std::string>& out) const {
    out["epochs"] = std::to_string(epochs);
    out["batch_size"] = std::to_string(batch_size);
    std::ostringstream lr;
    lr.precision(17);
    lr << model_lr;
    out["model_lr"] = lr.str();
    out["model_optimizer"] = to_string(model_optimizer);
    out["seed"] = std::to_string(seed);
  }
};

/// RNG stream ids, so that e.g. sampling in one method never perturbs the
/// minibatch order of another.
enum RngStream : std::uint64_t { kShuffleStream = 10, kAdversarySampleStream = 11 };

using Batch = std::vector<const Example*>;

inline RealVec batch_losses(std::span<const Example* const> batch, const ModelParams& m) {
  RealVec out(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) out[i] = loss(*batch[i], m);
  require_finite(out, "batch losses");
  return out;
}

/// Per-epoch hooks a trainer supplies to `run_training`.
struct TrainingHooks {
  /// One simultaneous update from a minibatch; returns the batch's mean loss.
  std::function<double(const Batch&, ModelParams&)> step;
  /// log(q_psi_t / q_psi_0) of the validation examples for the current checkpoint.
  std::function<RealVec(const Dataset& valid, const ModelParams&)> valid_log_weights;
};

namespace detail {

inline CheckpointRecord make_record(int epoch, const Dataset& valid, const ModelParams& m, RealVec log_weights) {
  CheckpointRecord r;
  r.epoch = epoch;
  r.losses.reserve(valid.size());
  r.errors.reserve(valid.size());
  for (const auto& e : valid.examples) {
    r.losses.push_back(loss(e, m));
    r.errors.push_back(zero_one_error(e, m));
  }
  if (log_weights.size() != valid.size()) throw std::logic_error("validation log-weights have the wrong length");
  require_finite(log_weights, "validation log-weights");
  r.log_weights = std::move(log_weights);
  r.model = m;
  return r;
}

inline double weighted_kl(std::span<const double> log_weights) {
  double s = 0.0;
  for (double lw : log_weights) s += std::exp(lw) * lw;
  return s / static_cast<double>(log_weights.size());
}

inline EpochStats make_stats(int epoch, double train_loss, const CheckpointRecord& r) {
  return EpochStats{epoch, train_loss, mean(r.losses), mean(r.errors), weighted_kl(r.log_weights)};
}

}  // namespace detail

/// Shuffled-minibatch loop shared by every method. Record 0 is the initial
/// model against psi_0; one record follows each epoch.
inline RunHistory run_training(const TrainConfig& cfg, const DatasetSplits& data, ModelParams model,
                               const TrainingHooks& hooks) {
  cfg.validate();
  data.train.validate();
  data.valid.validate();
  RunHistory h;
  cfg.echo(h.config);
  h.valid_fingerprint = fingerprint(data.valid);
  for (const auto& e : data.valid.examples) h.valid_groups.push_back(e.group);

  h.records.push_back(detail::make_record(0, data.valid, model, hooks.valid_log_weights(data.valid, model)));
  double initial_train_loss = 0.0;
  for (const auto& e : data.train.examples) initial_train_loss += loss(e, model);
  initial_train_loss /= static_cast<double>(data.train.size());
  h.stats.push_back(detail::make_stats(0, initial_train_loss, h.records.back()));

  Rng shuffle_rng(cfg.seed, kShuffleStream);
  std::vector<std::size_t> order(data.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      Batch batch;
      batch.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) batch.push_back(&data.train.examples[order[i]]);
      double batch_mean = 0.0;
      try {
        batch_mean = hooks.step(batch, model);
      } catch (const NumericError& err) {
        throw NumericError("run aborted at epoch " + std::to_string(epoch) + ", example offset " +
                           std::to_string(start) + ": " + err.what());
      }
      loss_sum += batch_mean * static_cast<double>(batch.size());
      seen += batch.size();
    }
    try {
      h.records.push_back(detail::make_record(epoch, data.valid, model, hooks.valid_log_weights(data.valid, model)));
    } catch (const NumericError& err) {
      throw NumericError("run aborted at epoch " + std::to_string(epoch) + ", validation: " + err.what());
    }
    h.stats.push_back(detail::make_stats(epoch, loss_sum / static_cast<double>(seen), h.records.back()));
  }
  h.final_model = std::move(model);
  return h;
}

}  // namespace pdro

#endif  // PDRO_TRAINING_HPP
