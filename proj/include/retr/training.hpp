#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "retr/data.hpp"
#include "retr/eval.hpp"
#include "retr/model.hpp"

namespace retr::training {

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 128;
  std::size_t max_epochs = 200;
  std::size_t patience = 10;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 42;

  void validate() const;
};

/// One negative per slot with a target: uniform over 1..num_items excluding
/// that slot's target. Slots without a target get 0.
std::vector<std::int64_t> sample_negatives(std::span<const std::int64_t> targets,
                                           std::size_t num_items, Rng& rng);

/// Mean over masked-in slots of -log sigmoid(pos - neg). Throws ContractError
/// when the mask selects nothing.
template <typename T>
Tensor<T> pairwise_loss(const Tensor<T>& pos, const Tensor<T>& neg, std::span<const std::uint8_t> mask);

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;
};

/// Bias-corrected Adam over every named parameter using its current
/// gradient. Throws NonFiniteGradient naming the parameter before changing
/// anything if a gradient is NaN or infinite.
template <typename T>
void adam_step(model::ModelParams<T>& params, AdamState& state, const TrainConfig& config);

/// Tracks the best validation score; stop once `patience` consecutive
/// epochs fail to improve on it.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}
  /// Returns true when `score` is a new best.
  bool observe(double score);
  bool should_stop() const { return since_best_ >= patience_; }
  std::size_t since_best() const { return since_best_; }

 private:
  std::size_t patience_;
  std::size_t since_best_ = 0;
  bool seen_ = false;
  double best_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_mrr = 0;
  double val_hr10 = 0;
  double val_ndcg10 = 0;
  std::vector<double> keep_rates;
};

struct TrainResult {
  model::ModelParams<float> best;
  std::size_t best_epoch = 0;
  double best_val_mrr = 0;
  std::vector<EpochRecord> log;
  std::string stop_reason;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains from `init` on split.train, validating on split.validation after
/// every epoch, and returns the parameters of the best validation epoch.
TrainResult train(const model::ModelConfig& config, const model::ModelParams<float>& init,
                  const data::SplitDataset& split, const TrainConfig& train_config,
                  const eval::EvalConfig& eval_config, const EpochCallback& on_epoch = {});

void write_epoch_header(std::ostream& out, std::size_t blocks);
void write_epoch_row(std::ostream& out, const EpochRecord& record);

}  // namespace retr::training
